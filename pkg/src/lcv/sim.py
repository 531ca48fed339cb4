"""Closed-loop sorting line simulation and the paired speed experiment.

Infeed is laid onto the belt by a feeder at the upstream end. The feeder
queue is a profile indexed by belt travel: while the belt advances ``r``
volumes in a step it picks up ``r`` volume-lengths of the profile. Two runs
that travel the same total distance therefore see exactly the same material,
which is what makes the average-speed-matched comparison fair.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import estimation
from .control import MpcConfig, TravelForecast, draw_infeed, mpc_step, stage_reward
from .core import StateVector, StepOutcome, SystemConfig, apply_sorting, shift_mass, step
from .estimation import CameraModel, DetectionFrame, NoiseConfig

__all__ = [
    "RegimeParams",
    "InfeedModel",
    "PlantNoise",
    "Scenario",
    "RunRecord",
    "PairedRow",
    "PairedSummary",
    "rng_streams",
    "generate_infeed",
    "plant_step",
    "synthesize_detections",
    "run_closed_loop",
    "paired_experiment",
    "summarize_pairs",
    "profit_rate_stats",
]

_SLIP_CONCENTRATION = 10.0


@dataclass(frozen=True)
class RegimeParams:
    mean_rate: float = 1.0
    rate_dispersion: float = 1.0
    regime_mean_duration: float = 50.0

    def __post_init__(self):
        if self.mean_rate < 0:
            raise ValueError("mean_rate must be >= 0")
        if self.rate_dispersion <= 0:
            raise ValueError("rate_dispersion must be > 0")
        if self.regime_mean_duration < 1:
            raise ValueError("regime_mean_duration must be >= 1")


@dataclass(frozen=True, eq=False)
class InfeedModel:
    """Regime-switching infeed per material, or a scripted schedule.

    A scripted ``schedule`` (rows of per-material mass) replaces the random
    model outright; rows past its end are empty.
    """

    regimes: tuple[RegimeParams, ...]
    seed: int = 0
    schedule: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "regimes", tuple(self.regimes))
        if self.schedule is not None:
            sched = np.array(self.schedule, dtype=float).reshape(-1, len(self.regimes))
            if np.any(sched < 0):
                raise ValueError("scripted infeed must be nonnegative")
            object.__setattr__(self, "schedule", sched)


@dataclass(frozen=True)
class PlantNoise:
    slip_prob: float = 0.0
    pick_noise: float = 0.0
    detector_miss_rate: float = 0.0
    bbox_jitter_px: float = 0.0

    def __post_init__(self):
        for name in ("slip_prob", "detector_miss_rate"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.pick_noise < 0 or self.bbox_jitter_px < 0:
            raise ValueError("noise scales must be >= 0")

    @property
    def is_zero(self) -> bool:
        return self.slip_prob == 0 and self.pick_noise == 0 \
            and self.detector_miss_rate == 0 and self.bbox_jitter_px == 0


@dataclass(frozen=True)
class Scenario:
    system: SystemConfig
    camera: CameraModel
    noise: NoiseConfig
    plant: PlantNoise
    mpc: MpcConfig
    infeed: InfeedModel
    steps: int = 3600
    r_init: float | None = None
    lookahead: float = math.inf
    config_hash: str = ""

    def __post_init__(self):
        self.camera.check(self.system)
        self.mpc.check(self.system)
        if len(self.infeed.regimes) != self.system.n:
            raise ValueError("infeed needs one regime block per material")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")

    @property
    def initial_speed(self) -> float:
        r = self.system.r_min if self.r_init is None else self.r_init
        return self.system.clamp_speed(r)


def rng_streams(seed: int) -> dict[str, np.random.Generator]:
    """Independent generators for the infeed, plant and detector."""
    children = np.random.SeedSequence(seed).spawn(3)
    return {name: np.random.default_rng(ss) for name, ss in zip(("infeed", "plant", "detector"), children)}


def generate_infeed(model: InfeedModel, steps: int, rng: np.random.Generator | None = None) -> np.ndarray:
    """Per-material infeed schedule of shape ``(steps, n)``.

    Each material switches between regimes of geometric length; within a
    regime the rate is gamma distributed with the configured mean and shape.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    n = len(model.regimes)
    out = np.zeros((steps, n))
    if model.schedule is not None:
        k = min(steps, len(model.schedule))
        out[:k] = model.schedule[:k]
        return out
    rng = rng_streams(model.seed)["infeed"] if rng is None else rng
    for i, reg in enumerate(model.regimes):
        t = 0
        while t < steps:
            length = int(rng.geometric(1.0 / reg.regime_mean_duration))
            rate = rng.gamma(reg.rate_dispersion, reg.mean_rate / reg.rate_dispersion) if reg.mean_rate > 0 else 0.0
            out[t:t + length, i] = rate
            t += length
    return out


def synthesize_detections(mass: np.ndarray, camera: CameraModel, noise: PlantNoise,
                          rng: np.random.Generator, step_index: int) -> DetectionFrame:
    """Fake detector output for the visible part of the belt.

    Every ``mass_per_object`` of mass becomes one box inside its volume's pixel
    band; a leftover fraction becomes a box hanging off the bottom edge of
    the image so that only that fraction of it is visible.
    """
    n = mass.shape[0]
    lam = camera.lam
    visible = mass[:, camera.first_volume:camera.first_volume + lam] / camera.mass_per_object
    whole = np.floor(visible).astype(np.int64)
    frac = visible - whole
    has_part = frac > 1e-12
    counts = (whole + has_part).ravel()
    total = int(counts.sum())
    if total == 0:
        return DetectionFrame(step_index, np.zeros(0, dtype=np.int64), np.zeros((0, 4)))
    cell = np.repeat(np.arange(n * lam), counts)
    mats = cell // lam
    vol = cell % lam
    # the last box of a cell with a leftover fraction is the partial one
    ends = np.cumsum(counts)
    partial = np.zeros(total, dtype=bool)
    partial[ends[has_part.ravel()] - 1] = True
    vis = np.ones(total)
    vis[partial] = frac.ravel()[has_part.ravel()]

    band = camera.image_width / lam
    w = 0.5 * band
    h = min(w, 0.5 * camera.image_height)
    edges = camera.band_edges
    cx = edges[vol] + w / 2 + rng.random(total) * (band - w)
    y0 = rng.random(total) * (camera.image_height - h)
    y0 = np.where(partial, camera.image_height - vis * h, y0)
    boxes = np.column_stack([cx - w / 2, y0, cx + w / 2, y0 + h])

    keep = rng.random(total) >= noise.detector_miss_rate
    if noise.bbox_jitter_px > 0:
        boxes = boxes + rng.normal(0.0, noise.bbox_jitter_px, size=boxes.shape)
        x0 = np.minimum(boxes[:, 0], boxes[:, 2])
        x1 = np.maximum(boxes[:, 0], boxes[:, 2])
        yy0 = np.minimum(boxes[:, 1], boxes[:, 3])
        yy1 = np.maximum(boxes[:, 1], boxes[:, 3])
        boxes = np.column_stack([x0, yy0, np.maximum(x1, x0 + 1e-3), np.maximum(yy1, yy0 + 1e-3)])
    return DetectionFrame(step_index, mats[keep], boxes[keep])


def plant_step(truth: StateVector, u: float, infeed, system: SystemConfig, camera: CameraModel,
               noise: PlantNoise, rng: np.random.Generator, detector_rng: np.random.Generator,
               step_index: int = 0) -> tuple[StepOutcome, DetectionFrame]:
    """True plant transition plus the detector's view of the new state.

    Slipping mass stays in its volume for the step; realised picks are the
    nominal pick scaled by ``1 + N(0, pick_noise)`` and clipped to what the
    station can take. Without slip and pick noise this is exactly ``step``.
    """
    if noise.slip_prob == 0 and noise.pick_noise == 0:
        outcome = step(truth, u, system, infeed)
    else:
        if not system.u_min <= u <= system.u_max:
            raise ValueError(f"speed change u={u} outside [{system.u_min}, {system.u_max}]")
        mass = truth.mass
        p = noise.slip_prob
        if p == 0:
            slip = np.zeros_like(mass)
        elif p == 1:
            slip = np.ones_like(mass)
        else:
            slip = rng.beta(_SLIP_CONCENTRATION * p, _SLIP_CONCENTRATION * (1 - p), size=mass.shape)
        stay = slip * mass
        moved, exited = shift_mass(mass - stay, truth.speed)
        moved += stay
        if noise.pick_noise == 0:
            after, picked = apply_sorting(moved, system)
        else:
            after = moved.copy()
            picked = np.zeros(system.n)
            for st in system.stations:
                seg = after[st.material, st.span.start:st.span.stop]
                on_span = seg.sum()
                if on_span <= 0:
                    continue
                nominal = min(st.pick_cap, on_span)
                realised = nominal * (1.0 + rng.normal(0.0, noise.pick_noise))
                realised = min(max(realised, 0.0), nominal)
                seg *= 1.0 - realised / on_span
                picked[st.material] = realised
        if infeed is not None:
            after[:, 0] += np.asarray(infeed, dtype=float)
        outcome = StepOutcome(StateVector.from_parts(after, system.clamp_speed(truth.speed + u)), picked, exited)
    frame = synthesize_detections(outcome.next.mass, camera, noise, detector_rng, step_index)
    return outcome, frame


@dataclass
class RunRecord:
    seed: int
    controller: str
    config_hash: str
    columns: list[str]
    rows: list[list] = field(default_factory=list)
    frames: list[DetectionFrame] | None = None
    target_speed: float | None = None

    def column(self, name: str) -> np.ndarray:
        k = self.columns.index(name)
        return np.array([row[k] for row in self.rows], dtype=float)

    @property
    def total_value(self) -> float:
        return float(self.rows[-1][self.columns.index("cumulative_value")]) if self.rows else 0.0

    @property
    def average_speed(self) -> float:
        return float(np.mean(self.column("speed")))

    @property
    def profit_rate(self) -> float:
        return self.total_value / max(len(self.rows), 1)

    @property
    def filename(self) -> str:
        return f"run_{self.seed}_{self.controller}.csv"

    def header(self) -> list[str]:
        lines = [f"config_hash={self.config_hash}", f"seed={self.seed}", f"controller={self.controller}"]
        if self.target_speed is not None:
            lines.append(f"target_speed={self.target_speed!r}")
        return lines

    def to_csv(self) -> str:
        buf = io.StringIO()
        for line in self.header():
            buf.write(f"# {line}\n")
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(self.columns)
        for row in self.rows:
            writer.writerow([_fmt(v) for v in row])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "RunRecord":
        """Parse the output of ``to_csv``; raises ValueError on missing columns."""
        meta = {}
        lines = text.splitlines()
        body = []
        for line in lines:
            if line.startswith("#"):
                key, _, value = line[1:].strip().partition("=")
                meta[key] = value
            elif line.strip():
                body.append(line)
        if not body:
            raise ValueError("run file has no column header")
        reader = csv.reader(body)
        columns = next(reader)
        missing = [c for c in ("step", "speed", "u", "cumulative_value") if c not in columns]
        if missing:
            raise ValueError(f"run file lacks column {missing[0]!r}")
        kinds = [_INT_COLUMNS.get(c, float) for c in columns]
        rows = []
        for k, raw in enumerate(reader, start=2):
            if len(raw) != len(columns):
                raise ValueError(f"row {k}: expected {len(columns)} fields, got {len(raw)}")
            rows.append([kind(v) for kind, v in zip(kinds, raw)])
        target = meta.get("target_speed")
        return cls(seed=int(meta.get("seed", 0)), controller=meta.get("controller", ""),
                   config_hash=meta.get("config_hash", ""), columns=columns, rows=rows,
                   target_speed=None if target is None else float(target))


_INT_COLUMNS = {"step": int, "solver_iterations": int, "solver_backtracks": int, "solver_status": str}


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _columns(n: int) -> list[str]:
    cols = ["step", "speed", "u"]
    for prefix in ("infeed", "infeed_est", "station_mass", "picked", "exited"):
        cols += [f"{prefix}_{i}" for i in range(n)]
    cols += ["reward", "cumulative_value"]
    cols += [f"true_total_{i}" for i in range(n)] + [f"est_total_{i}" for i in range(n)]
    cols += ["trace_p", "solver_iterations", "solver_objective", "solver_grad_norm",
             "solver_backtracks", "solver_status"]
    return cols


def run_closed_loop(scenario: Scenario, controller: str = "mpc", seed: int = 0,
                    speed: float | None = None, record_detections: bool = False,
                    profile: np.ndarray | None = None) -> RunRecord:
    """Run the plant, detector, filter and controller for ``scenario.steps``.

    ``controller`` is ``"mpc"`` or ``"constant"``; the constant controller
    starts at ``speed`` and commands whatever change keeps it there. The
    realised value is always booked with prose accounting.
    """
    system, camera, noise, plant = scenario.system, scenario.camera, scenario.noise, scenario.plant
    if controller not in ("mpc", "constant"):
        raise ValueError(f"unknown controller {controller!r}")
    if controller == "constant":
        if speed is None:
            raise ValueError("constant controller needs a target speed")
        target = system.clamp_speed(float(speed))
        r0 = target
    else:
        target = None
        r0 = scenario.initial_speed

    streams = rng_streams(seed)
    if profile is None:
        profile = infeed_profile(scenario, seed)
    n_slices = float(len(profile))
    n = system.n
    stations = [system.station_for(i) for i in range(n)]

    truth = StateVector.empty(system, r0)
    filt = estimation.initial_filter(system, noise, r0)
    record = RunRecord(seed, controller, scenario.config_hash, _columns(n),
                       frames=[] if record_detections else None, target_speed=target)
    plan = None
    pos = 0.0
    cumulative = 0.0
    feed = np.zeros(n)
    feed_est = np.zeros(n)
    for k in range(scenario.steps):
        report = None
        if controller == "mpc":
            forecast = TravelForecast(profile, pos, scenario.lookahead)
            u, plan, report = mpc_step(filt.mean, plan, forecast, system, scenario.mpc)
        else:
            u = min(max(target - truth.speed, system.u_min), system.u_max)
        r = truth.speed
        draw_infeed(profile, pos, r, n_slices, feed)
        draw_infeed(profile, pos, r, min(pos + scenario.lookahead, n_slices), feed_est)
        pos += r
        outcome, frame = plant_step(truth, u, feed, system, camera, plant,
                                    streams["plant"], streams["detector"], k + 1)
        filt = estimation.predict(filt, u, feed_est, system, noise)
        if len(frame):
            filt = estimation.update(filt, estimation.measure(frame, camera, system), camera, system, noise)
        if record_detections:
            record.frames.append(frame)
        reward = stage_reward(outcome, system, "prose", scenario.mpc.mixed_price)
        cumulative += reward
        nxt = outcome.next.mass
        station_mass = [float(nxt[i, st.span.start:st.span.stop].sum()) if st else 0.0
                        for i, st in enumerate(stations)]
        row = [k, r, float(u), *feed, *feed_est, *station_mass, *outcome.picked, *outcome.exited,
               reward, cumulative, *nxt.sum(axis=1), *filt.mean.mass.sum(axis=1), filt.trace]
        if report is None:
            row += [0, 0.0, 0.0, 0, ""]
        else:
            row += [report.iterations, report.objective, report.grad_norm, report.backtracks_total, report.status]
        record.rows.append(row)
        truth = outcome.next
    return record


def infeed_profile(scenario: Scenario, seed: int) -> np.ndarray:
    """Feeder profile long enough for a full run at top speed plus lookahead."""
    extra = 0 if math.isinf(scenario.lookahead) else scenario.lookahead
    slices = int(math.ceil(scenario.steps * scenario.system.r_max + extra)) + 1
    model = replace(scenario.infeed, seed=seed)
    return generate_infeed(model, slices, rng_streams(seed)["infeed"])


@dataclass(frozen=True)
class PairedRow:
    seed: int
    mpc_total_value: float
    avg_mpc_speed: float
    baseline_total_value: float
    improvement_pct: float
    mpc_profit_rate: float
    baseline_profit_rate: float


@dataclass(frozen=True)
class PairedSummary:
    rows: tuple[PairedRow, ...]
    mean_improvement_pct: float
    median_improvement_pct: float
    wins: int
    mpc_profit_rate_mean: float
    mpc_profit_rate_var: float
    baseline_profit_rate_mean: float
    baseline_profit_rate_var: float

    COLUMNS = ("seed", "mpc_total_value", "avg_mpc_speed", "baseline_total_value",
               "improvement_pct", "mpc_profit_rate", "baseline_profit_rate")

    def aggregates(self) -> dict[str, float]:
        return {
            "runs": len(self.rows),
            "mean_improvement_pct": self.mean_improvement_pct,
            "median_improvement_pct": self.median_improvement_pct,
            "wins": self.wins,
            "mpc_profit_rate_mean": self.mpc_profit_rate_mean,
            "mpc_profit_rate_var": self.mpc_profit_rate_var,
            "baseline_profit_rate_mean": self.baseline_profit_rate_mean,
            "baseline_profit_rate_var": self.baseline_profit_rate_var,
        }

    def to_csv(self, config_hash: str) -> str:
        buf = io.StringIO()
        buf.write(f"# config_hash={config_hash}\n")
        for key, value in self.aggregates().items():
            buf.write(f"# {key}={_fmt(value)}\n")
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(self.COLUMNS)
        for row in self.rows:
            writer.writerow([_fmt(getattr(row, c)) for c in self.COLUMNS])
        return buf.getvalue()


def improvement_pct(mpc: float, baseline: float) -> float:
    if baseline != 0:
        return 100.0 * (mpc - baseline) / abs(baseline)
    if mpc == baseline:
        return 0.0
    return math.copysign(math.inf, mpc - baseline)


def profit_rate_stats(rates: Sequence[float]) -> tuple[float, float]:
    """Mean and population variance of per-run profit rates."""
    rates = np.asarray(rates, dtype=float)
    if rates.size == 0:
        return math.nan, math.nan
    return float(rates.mean()), float(rates.var())


def summarize_pairs(rows: Sequence[PairedRow]) -> PairedSummary:
    rows = tuple(sorted(rows, key=lambda r: r.seed))
    imp = np.array([r.improvement_pct for r in rows])
    mpc_mean, mpc_var = profit_rate_stats([r.mpc_profit_rate for r in rows])
    base_mean, base_var = profit_rate_stats([r.baseline_profit_rate for r in rows])
    return PairedSummary(
        rows=rows,
        mean_improvement_pct=float(np.mean(imp)) if len(imp) else math.nan,
        median_improvement_pct=float(np.median(imp)) if len(imp) else math.nan,
        wins=int(sum(r.mpc_total_value > r.baseline_total_value for r in rows)),
        mpc_profit_rate_mean=mpc_mean, mpc_profit_rate_var=mpc_var,
        baseline_profit_rate_mean=base_mean, baseline_profit_rate_var=base_var,
    )


def run_pair(scenario: Scenario, seed: int) -> tuple[PairedRow, RunRecord, RunRecord]:
    """MPC run, then a constant-speed rerun of the same seed at its average speed."""
    profile = infeed_profile(scenario, seed)
    mpc_run = run_closed_loop(scenario, "mpc", seed, profile=profile)
    r_bar = mpc_run.average_speed
    base_run = run_closed_loop(scenario, "constant", seed, speed=r_bar, profile=profile)
    row = PairedRow(seed, mpc_run.total_value, r_bar, base_run.total_value,
                    improvement_pct(mpc_run.total_value, base_run.total_value),
                    mpc_run.profit_rate, base_run.profit_rate)
    return row, mpc_run, base_run


def paired_experiment(scenario: Scenario, seeds: Sequence[int], workers: int = 1):
    """Run the paired MPC vs constant-speed protocol for every seed.

    Returns ``(summary, runs)`` where ``runs`` lists the RunRecords in seed
    order, MPC before baseline.
    """
    seeds = sorted(set(int(s) for s in seeds))
    if not seeds:
        raise ValueError("at least one seed is required")
    if workers > 1 and len(seeds) > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run_pair, [scenario] * len(seeds), seeds))
    else:
        results = [run_pair(scenario, s) for s in seeds]
    rows = [r[0] for r in results]
    runs = [run for r in results for run in r[1:]]
    return summarize_pairs(rows), runs
