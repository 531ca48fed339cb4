"""Camera binning and the Kalman filter over the control-volume state."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .core import StateVector, SystemConfig, shift_mass, step, transition_matrix

__all__ = [
    "Detection",
    "DetectionFrame",
    "CameraModel",
    "MeasurementVector",
    "NoiseConfig",
    "FilterState",
    "DetectionFormatError",
    "bin_detections",
    "bin_boxes",
    "measure",
    "observation_matrix",
    "observed_indices",
    "initial_filter",
    "predict",
    "update",
    "run_filter",
    "read_detections",
    "write_detections",
]


@dataclass(frozen=True)
class Detection:
    step: int
    material: int
    bbox: tuple[float, float, float, float]

    def __post_init__(self):
        x0, y0, x1, y1 = self.bbox
        if not (x0 < x1 and y0 < y1):
            raise ValueError(f"degenerate bbox {self.bbox}")
        if self.material < 0:
            raise ValueError(f"material index must be >= 0, got {self.material}")


@dataclass(frozen=True, eq=False)
class DetectionFrame:
    """All detections of one timestep, stored column-wise."""

    step: int
    materials: np.ndarray
    boxes: np.ndarray

    def __len__(self):
        return len(self.materials)

    @classmethod
    def from_records(cls, step: int, records: Sequence[Detection]) -> "DetectionFrame":
        mats = np.array([d.material for d in records], dtype=np.int64)
        boxes = np.array([d.bbox for d in records], dtype=float).reshape(-1, 4)
        return cls(step, mats, boxes)

    def records(self) -> list[Detection]:
        return [Detection(self.step, int(k), tuple(float(v) for v in box))
                for k, box in zip(self.materials, self.boxes)]


@dataclass(frozen=True)
class CameraModel:
    """Viewport of ``lam`` consecutive volumes starting at ``first_volume``.

    The image x-axis spans the visible volumes linearly, upstream on the left.
    """

    first_volume: int = 0
    lam: int = 1
    image_width: float = 640.0
    image_height: float = 480.0
    mass_per_object: float = 1.0

    def __post_init__(self):
        if self.lam < 1:
            raise ValueError("camera must see at least one volume")
        if self.first_volume < 0:
            raise ValueError("first_volume must be >= 0")
        if self.image_width <= 0 or self.image_height <= 0:
            raise ValueError("image dimensions must be positive")
        if self.mass_per_object <= 0:
            raise ValueError("mass_per_object must be positive")

    def check(self, config: SystemConfig) -> None:
        if self.first_volume + self.lam > config.m:
            raise ValueError(
                f"camera covers volumes {self.first_volume}..{self.first_volume + self.lam - 1} "
                f"but the belt only has {config.m}")

    @property
    def band_edges(self) -> np.ndarray:
        return np.linspace(0.0, self.image_width, self.lam + 1)


@dataclass(frozen=True, eq=False)
class MeasurementVector:
    """Material-major measurements of the visible volumes (length n * lam)."""

    z: np.ndarray

    def __post_init__(self):
        z = np.array(self.z, dtype=float).ravel()
        if np.any(z < 0):
            raise ValueError("measurements must be nonnegative")
        object.__setattr__(self, "z", z)


@dataclass(frozen=True)
class NoiseConfig:
    q_mass: float = 0.01
    q_speed: float = 1e-6
    r_meas: float = 0.25
    p0_mass: float = 1.0
    p0_speed: float = 0.0

    def __post_init__(self):
        for name in ("q_mass", "q_speed", "r_meas", "p0_mass", "p0_speed"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")


@dataclass(frozen=True, eq=False)
class FilterState:
    mean: StateVector
    cov: np.ndarray

    @property
    def trace(self) -> float:
        return float(np.trace(self.cov))


class DetectionFormatError(ValueError):
    def __init__(self, line: int, msg: str):
        super().__init__(f"line {line}: {msg}")
        self.line = line


def bin_boxes(materials: np.ndarray, boxes: np.ndarray, camera: CameraModel, n: int) -> np.ndarray:
    """Fractional-area binning of boxes into an (n, lam) count array."""
    out = np.zeros((n, camera.lam))
    if len(materials) == 0:
        return out
    boxes = np.asarray(boxes, dtype=float)
    x0, y0, x1, y1 = boxes.T
    area = (x1 - x0) * (y1 - y0)
    visible_h = np.clip(np.minimum(y1, camera.image_height) - np.maximum(y0, 0.0), 0.0, None)
    edges = camera.band_edges
    overlap_w = np.clip(np.minimum(x1[:, None], edges[None, 1:]) - np.maximum(x0[:, None], edges[None, :-1]),
                        0.0, None)
    frac = overlap_w * (visible_h / area)[:, None]
    np.add.at(out, np.asarray(materials, dtype=np.int64), frac)
    return out


def bin_detections(detections, camera: CameraModel, config: SystemConfig) -> MeasurementVector:
    """Bin one frame of detections into per-volume object counts.

    Each box adds, to every visible volume, the share of its area lying over
    that volume's pixel band. A box fully inside the viewport contributes 1 in
    total; parts outside the image count for nothing.
    """
    if isinstance(detections, DetectionFrame):
        mats, boxes = detections.materials, detections.boxes
    else:
        detections = list(detections)
        if len({d.step for d in detections}) > 1:
            raise ValueError("detections must come from a single timestep")
        frame = DetectionFrame.from_records(detections[0].step if detections else 0, detections)
        mats, boxes = frame.materials, frame.boxes
    if len(mats) and mats.max() >= config.n:
        raise ValueError(f"detection material {mats.max()} out of range for n={config.n}")
    return MeasurementVector(bin_boxes(mats, boxes, camera, config.n).ravel())


def measure(detections, camera: CameraModel, config: SystemConfig) -> np.ndarray:
    """Binned counts converted to mass units for the filter."""
    return bin_detections(detections, camera, config).z * camera.mass_per_object


def observed_indices(camera: CameraModel, config: SystemConfig) -> np.ndarray:
    vols = camera.first_volume + np.arange(camera.lam)
    return (np.arange(config.n)[:, None] * config.m + vols[None, :]).ravel()


def observation_matrix(camera: CameraModel, config: SystemConfig) -> np.ndarray:
    camera.check(config)
    idx = observed_indices(camera, config)
    H = np.zeros((len(idx), config.size))
    H[np.arange(len(idx)), idx] = 1.0
    return H


def initial_filter(config: SystemConfig, noise: NoiseConfig, speed: float,
                   mass: np.ndarray | None = None) -> FilterState:
    mass = np.zeros((config.n, config.m)) if mass is None else mass
    diag = np.full(config.size, noise.p0_mass)
    diag[-1] = noise.p0_speed
    return FilterState(StateVector.from_parts(mass, speed), np.diag(diag))


def _shift_leading(P: np.ndarray, speed: float, n: int, m: int) -> np.ndarray:
    # apply the motion matrix to the rows of P
    out = np.empty_like(P)
    blocks = P[:-1].reshape(n, m, -1).swapaxes(1, 2)
    moved, _ = shift_mass(blocks, speed)
    out[:-1] = moved.swapaxes(1, 2).reshape(n * m, -1)
    out[-1] = P[-1]
    return out


def predict(filt: FilterState, u: float, infeed_estimate, config: SystemConfig, noise: NoiseConfig) -> FilterState:
    """Propagate the estimate through one transition.

    The mean goes through ``step``; the covariance through the transition
    matrix frozen at the current mean, computed via shifts rather than dense
    products.
    """
    mean = filt.mean
    nxt = step(mean, u, config, infeed_estimate).next
    n, m, r = config.n, config.m, mean.speed
    moved, _ = shift_mass(mean.mass, r)
    survival = np.ones(config.size)
    for st in config.stations:
        on_span = moved[st.material, st.span.start:st.span.stop].sum()
        p = 0.0 if on_span <= st.pick_cap else 1.0 - st.pick_cap / on_span
        survival[st.material * m + st.span.start:st.material * m + st.span.stop] = p
    LP = _shift_leading(filt.cov, r, n, m)
    LPL = _shift_leading(LP.T, r, n, m)
    cov = survival[:, None] * LPL * survival[None, :]
    cov[np.diag_indices_from(cov)] += np.append(np.full(n * m, noise.q_mass), noise.q_speed)
    return FilterState(nxt, 0.5 * (cov + cov.T))


def predict_dense(filt: FilterState, u: float, infeed_estimate, config: SystemConfig, noise: NoiseConfig) -> FilterState:
    """Reference ``predict`` using the explicit transition matrix."""
    A = transition_matrix(filt.mean, config)
    Q = np.diag(np.append(np.full(config.n * config.m, noise.q_mass), noise.q_speed))
    nxt = step(filt.mean, u, config, infeed_estimate).next
    return FilterState(nxt, A @ filt.cov @ A.T + Q)


def update(filt: FilterState, z, camera: CameraModel, config: SystemConfig, noise: NoiseConfig) -> FilterState:
    """Kalman measurement update with a Joseph-form covariance.

    ``z`` is in mass units (see ``measure``). Negative masses in the
    posterior mean are clamped to zero.
    """
    z = z.z if isinstance(z, MeasurementVector) else np.asarray(z, dtype=float)
    idx = observed_indices(camera, config)
    if z.shape != idx.shape:
        raise ValueError(f"measurement length {z.shape} does not match n*lambda={len(idx)}")
    P = filt.cov
    x = filt.mean.data
    S = P[np.ix_(idx, idx)] + noise.r_meas * np.eye(len(idx))
    try:
        np.linalg.cholesky(S)
    except np.linalg.LinAlgError:
        S = S + 1e-9 * np.eye(len(idx))
    K = np.linalg.solve(S, P[idx, :]).T
    x_new = x + K @ (z - x[idx])
    # (I - KH) P (I - KH)^T + K R K^T with H a row selection
    MP = P - K @ P[idx, :]
    cov = MP - MP[:, idx] @ K.T + noise.r_meas * (K @ K.T)
    cov = 0.5 * (cov + cov.T)
    x_new[:-1] = np.maximum(x_new[:-1], 0.0)
    return FilterState(StateVector(x_new, config.n, config.m), cov)


def run_filter(frames: Mapping[int, object], controls: Sequence[float], infeed_estimates,
               config: SystemConfig, camera: CameraModel, noise: NoiseConfig,
               initial: FilterState) -> list[FilterState]:
    """Replay a detection stream through predict/update.

    Returns estimates of ``X_0 .. X_K`` for ``K = len(controls)``. Detections
    tagged step ``k`` observe ``X_k``; steps with no detections are
    predict-only.
    """
    infeed_estimates = np.asarray(infeed_estimates, dtype=float)
    if len(infeed_estimates) != len(controls):
        raise ValueError(f"{len(controls)} controls but {len(infeed_estimates)} infeed estimates")
    late = [k for k in frames if k > len(controls) or k < 0]
    if late:
        raise ValueError(f"detections at step {min(late)} fall outside the {len(controls)}-step control stream")
    filt = initial
    frame = frames.get(0)
    if frame is not None and len(frame):
        filt = update(filt, measure(frame, camera, config), camera, config, noise)
    out = [filt]
    for k, u in enumerate(controls):
        filt = predict(filt, float(u), infeed_estimates[k], config, noise)
        frame = frames.get(k + 1)
        if frame is not None and len(frame):
            filt = update(filt, measure(frame, camera, config), camera, config, noise)
        out.append(filt)
    return out


def read_detections(path) -> dict[int, DetectionFrame]:
    """Parse a line-delimited detection stream into frames keyed by step.

    Fractional step stamps are rounded to the nearest model step.
    """
    grouped: dict[int, list[Detection]] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                stamp = float(rec["step"])
                if not math.isfinite(stamp):
                    raise ValueError("step is not finite")
                if len(rec["bbox"]) != 4:
                    raise ValueError("bbox needs exactly 4 numbers")
                det = Detection(int(round(stamp)), int(rec["material"]),
                                tuple(float(v) for v in rec["bbox"]))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise DetectionFormatError(lineno, str(exc)) from None
            grouped.setdefault(det.step, []).append(det)
    return {k: DetectionFrame.from_records(k, v) for k, v in sorted(grouped.items())}


def write_detections(frames: Iterable[DetectionFrame], path) -> None:
    with open(Path(path), "w", encoding="utf-8") as fh:
        for frame in frames:
            for k, box in zip(frame.materials, frame.boxes):
                fh.write(json.dumps({"step": int(frame.step), "material": int(k),
                                     "bbox": [float(v) for v in box]}) + "\n")
