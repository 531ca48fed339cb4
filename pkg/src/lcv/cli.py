"""Command-line entry point: ``lcv simulate | experiment | estimate | report``.

Exit codes: 0 on success, 2 for bad input (config, detection or run files,
flags), 3 when a run fails at runtime.
"""

from __future__ import annotations

import argparse
import json
import shutil
import sys
import tempfile
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, builtin_config_path, scenario_from_dict
from .estimation import DetectionFormatError, initial_filter, read_detections, run_filter, write_detections
from .sim import PairedRow, RunRecord, improvement_pct, paired_experiment, run_closed_loop, summarize_pairs

EXIT_OK, EXIT_INPUT, EXIT_RUNTIME = 0, 2, 3


class InputError(Exception):
    """Bad user input; reported with exit code 2."""


def _parse_seeds(text: str) -> list[int]:
    if ".." in text:
        a, _, b = text.partition("..")
        try:
            lo, hi = int(a), int(b)
        except ValueError:
            raise argparse.ArgumentTypeError(f"expected A..B, got {text!r}") from None
        if hi < lo:
            raise argparse.ArgumentTypeError(f"empty seed range {text!r}")
        return list(range(lo, hi + 1))
    try:
        return [int(v) for v in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected A..B or a comma list, got {text!r}") from None


def _resolve_config(value: str) -> Path:
    path = Path(value)
    if path.exists():
        return path
    builtin = builtin_config_path(value)
    if builtin.exists():
        return builtin
    raise InputError(f"config file not found: {value}")


def _load(args):
    # overrides are applied to the document so the config hash covers them
    path = _resolve_config(args.config)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise InputError(f"invalid config: invalid JSON: {exc}") from None
    except OSError as exc:
        raise InputError(f"cannot read config {path}: {exc}") from None
    if isinstance(doc, dict):
        if getattr(args, "accounting", None):
            doc.setdefault("mpc", {})["accounting"] = args.accounting
        if getattr(args, "steps", None) is not None:
            if args.steps < 1:
                raise InputError("--steps must be >= 1")
            doc.setdefault("system", {})["steps"] = args.steps
    try:
        scenario = scenario_from_dict(doc)
    except ConfigError as exc:
        raise InputError(f"invalid config: {exc}") from None
    except AttributeError:
        raise InputError("invalid config: expected JSON objects for each block") from None
    return path, scenario


class OutputDir:
    """Build the output in a sibling temp directory and move it into place on success."""

    def __init__(self, target: Path, force: bool):
        self.target = Path(target)
        self.force = force
        if self.target.exists() and not force:
            raise InputError(f"output directory {self.target} exists; pass --force to replace it")

    def __enter__(self) -> Path:
        self.target.parent.mkdir(parents=True, exist_ok=True)
        self.tmp = Path(tempfile.mkdtemp(prefix=f".{self.target.name}.", dir=self.target.parent))
        return self.tmp

    def __exit__(self, exc_type, exc, tb):
        if exc_type is not None:
            shutil.rmtree(self.tmp, ignore_errors=True)
            return False
        if self.target.exists():
            if self.target.is_dir():
                shutil.rmtree(self.target)
            else:
                self.target.unlink()
        self.tmp.rename(self.target)
        return False


def _write_manifest(out: Path, args, config_path, seeds, config_hash):
    manifest = {
        "command": args.command,
        "config": str(config_path),
        "config_hash": config_hash,
        "seeds": list(seeds),
        "output": str(args.out),
        "version": __version__,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def cmd_simulate(args) -> int:
    path, scenario = _load(args)
    if args.controller == "constant" and args.speed is None:
        raise InputError("--controller constant needs --speed")
    if args.controller == "mpc" and args.speed is not None:
        raise InputError("--speed only applies to --controller constant")
    if args.speed is not None and not scenario.system.r_min <= args.speed <= scenario.system.r_max:
        raise InputError(f"--speed must lie in [{scenario.system.r_min}, {scenario.system.r_max}]")
    seed = args.seed
    with OutputDir(args.out, args.force) as out:
        record = run_closed_loop(scenario, args.controller, seed, speed=args.speed,
                                 record_detections=args.dump_detections)
        (out / record.filename).write_text(record.to_csv())
        if args.dump_detections:
            write_detections(record.frames, out / f"detections_{seed}_{args.controller}.jsonl")
        _write_manifest(out, args, path, [seed], scenario.config_hash)
    print(f"total_value={record.total_value!r}")
    print(f"average_speed={record.average_speed!r}")
    return EXIT_OK


def cmd_experiment(args) -> int:
    path, scenario = _load(args)
    seeds = args.seeds if args.seeds is not None else [args.seed]
    if args.workers < 1:
        raise InputError("--workers must be >= 1")
    with OutputDir(args.out, args.force) as out:
        summary, runs = paired_experiment(scenario, seeds, workers=args.workers)
        for run in runs:
            (out / run.filename).write_text(run.to_csv())
        (out / "summary.csv").write_text(summary.to_csv(scenario.config_hash))
        _write_manifest(out, args, path, sorted(set(seeds)), scenario.config_hash)
    print(f"runs={len(summary.rows)} wins={summary.wins} mean_improvement_pct={summary.mean_improvement_pct!r}")
    print(f"median_improvement_pct={summary.median_improvement_pct!r}")
    return EXIT_OK


def _read_run(path: Path) -> RunRecord:
    try:
        return RunRecord.from_csv(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise InputError(f"file not found: {path}") from None
    except ValueError as exc:
        raise InputError(f"{path}: {exc}") from None


def cmd_estimate(args) -> int:
    path, scenario = _load(args)
    system = scenario.system
    try:
        frames = read_detections(args.detections)
    except FileNotFoundError:
        raise InputError(f"file not found: {args.detections}") from None
    except DetectionFormatError as exc:
        raise InputError(f"{args.detections}: {exc}") from None
    controls = _read_run(Path(args.controls))
    est_cols = [f"infeed_est_{i}" for i in range(system.n)]
    missing = [c for c in est_cols if c not in controls.columns]
    if missing:
        raise InputError(f"{args.controls}: missing column {missing[0]!r}")
    u = controls.column("u")
    feed = np.column_stack([controls.column(c) for c in est_cols]) if len(u) else np.zeros((0, system.n))
    speed0 = float(controls.column("speed")[0]) if len(u) else scenario.initial_speed
    try:
        estimates = run_filter(frames, u, feed, system, scenario.camera, scenario.noise,
                               initial_filter(system, scenario.noise, speed0))
    except ValueError as exc:
        raise InputError(str(exc)) from None
    with OutputDir(args.out, args.force) as out:
        lines = [f"# config_hash={scenario.config_hash}",
                 ",".join(["step", *[f"est_total_{i}" for i in range(system.n)], "trace_p"])]
        # row k holds the estimate after step k, as in run files
        for k, filt in enumerate(estimates[1:]):
            totals = filt.mean.mass.sum(axis=1)
            lines.append(",".join([str(k), *[repr(float(v)) for v in totals], repr(filt.trace)]))
        (out / "estimate.csv").write_text("\n".join(lines) + "\n")
        _write_manifest(out, args, path, [], scenario.config_hash)
    print(f"steps={len(u)}")
    return EXIT_OK


def _collect_runs(paths) -> list[RunRecord]:
    files = []
    for p in map(Path, paths):
        if p.is_dir():
            files += sorted(p.glob("run_*.csv"))
        elif p.exists():
            files.append(p)
        else:
            raise InputError(f"file not found: {p}")
    if not files:
        raise InputError("no run files given")
    return [_read_run(f) for f in files]


def cmd_report(args) -> int:
    runs = _collect_runs(args.inputs)
    by_kind: dict[str, list[float]] = {}
    for run in runs:
        by_kind.setdefault(run.controller or "unknown", []).append(run.profit_rate)
    hashes = sorted({run.config_hash for run in runs})
    table = ["controller,runs,profit_rate_mean,profit_rate_var"]
    for kind in sorted(by_kind):
        rates = np.asarray(by_kind[kind])
        table.append(f"{kind},{len(rates)},{float(rates.mean())!r},{float(rates.var())!r}")

    pairs = {}
    for run in runs:
        pairs.setdefault(run.seed, {})[run.controller] = run
    rows = []
    for seed, pair in sorted(pairs.items()):
        if "mpc" in pair and "constant" in pair:
            mpc, base = pair["mpc"], pair["constant"]
            rows.append(PairedRow(seed, mpc.total_value, mpc.average_speed, base.total_value,
                                  improvement_pct(mpc.total_value, base.total_value),
                                  mpc.profit_rate, base.profit_rate))
    header = [f"# config_hash={h}" for h in hashes]
    if rows:
        for key, value in summarize_pairs(rows).aggregates().items():
            header.append(f"# {key}={value!r}")
    text = "\n".join(header + table) + "\n"
    with OutputDir(args.out, args.force) as out:
        (out / "report.csv").write_text(text)
    print("\n".join(table))
    for line in header:
        print(line[2:])
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True,
                        help="scenario JSON file, or the name of a bundled scenario (e.g. three_material)")
    common.add_argument("--out", required=True, type=Path, help="output directory (created atomically)")
    common.add_argument("--force", action="store_true", help="replace an existing output directory")
    common.add_argument("--steps", type=int, default=None, help="override the run length in steps")

    control = argparse.ArgumentParser(add_help=False)
    control.add_argument("--accounting", choices=("prose", "literal"), default=None,
                         help="MPC value accounting (default: from config)")

    parser = argparse.ArgumentParser(prog="lcv", description="Sorting line speed control simulator.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[common, control], help="run one closed-loop simulation")
    p.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
    p.add_argument("--controller", choices=("mpc", "constant"), default="mpc", help="speed controller")
    p.add_argument("--speed", type=float, default=None, help="target speed for --controller constant")
    p.add_argument("--dump-detections", action="store_true",
                   help="also write the synthetic detection stream as JSON lines")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("experiment", parents=[common, control],
                       help="paired MPC vs average-speed constant runs over several seeds")
    g = p.add_mutually_exclusive_group()
    g.add_argument("--seed", type=int, default=0, help="single seed (default 0)")
    g.add_argument("--seeds", type=_parse_seeds, default=None, help="seed range A..B (inclusive) or list a,b,c")
    p.add_argument("--workers", type=int, default=1, help="parallel worker processes (default 1)")
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("estimate", parents=[common], help="replay a detection stream through the filter")
    p.add_argument("--detections", required=True, help="JSON-lines detection file")
    p.add_argument("--controls", required=True,
                   help="run CSV supplying u, infeed_est_* and the initial speed")
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("report", help="profit-rate statistics per controller from run CSVs")
    p.add_argument("inputs", nargs="+", help="run CSV files or directories containing run_*.csv")
    p.add_argument("--out", required=True, type=Path, help="output directory (created atomically)")
    p.add_argument("--force", action="store_true", help="replace an existing output directory")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_INPUT
    try:
        return args.func(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except Exception as exc:  # runtime failure inside a run
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
