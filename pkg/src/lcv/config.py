"""JSON scenario files.

A scenario is one JSON document with the blocks ``system``, ``materials``,
``stations``, ``camera``, ``noise``, ``mpc`` and ``infeed``. Validation
errors name the offending key, e.g. ``stations[0].span``.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import fields
from importlib import resources
from pathlib import Path

from .control import MpcConfig
from .core import MaterialSpec, SortStation, SystemConfig
from .estimation import CameraModel, NoiseConfig
from .sim import InfeedModel, PlantNoise, RegimeParams, Scenario

__all__ = ["ConfigError", "load_scenario", "scenario_from_dict", "config_hash", "builtin_config_path"]

_MISSING = object()


class ConfigError(ValueError):
    def __init__(self, key: str, msg: str):
        super().__init__(f"{key}: {msg}")
        self.key = key


def config_hash(doc: dict) -> str:
    canon = json.dumps(doc, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:16]


def builtin_config_path(name: str) -> Path:
    """Path of a scenario shipped with the package (e.g. ``three_material``)."""
    return Path(str(resources.files("lcv") / "data" / f"{name}.json"))


def _get(block, key, path, kind=float, default=_MISSING):
    if not isinstance(block, dict):
        raise ConfigError(path, "expected an object")
    if key not in block or (block[key] is None and default is not _MISSING):
        if default is _MISSING:
            raise ConfigError(f"{path}.{key}", "missing required key")
        return default
    value = block[key]
    where = f"{path}.{key}"
    if kind is int:
        if isinstance(value, bool) or not isinstance(value, (int, float)) or int(value) != value:
            raise ConfigError(where, f"expected an integer, got {value!r}")
        return int(value)
    if kind is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(where, f"expected a number, got {value!r}")
        return float(value)
    if kind is str:
        if not isinstance(value, str):
            raise ConfigError(where, f"expected a string, got {value!r}")
        return value
    return value


def _checked(path, build):
    try:
        return build()
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(path, str(exc)) from None


def _list(doc, key):
    value = doc.get(key, _MISSING)
    if value is _MISSING:
        raise ConfigError(key, "missing required block")
    if not isinstance(value, list):
        raise ConfigError(key, "expected a list")
    return value


def _block(doc, key, required=True):
    value = doc.get(key, _MISSING)
    if value is _MISSING:
        if required:
            raise ConfigError(key, "missing required block")
        return {}
    if not isinstance(value, dict):
        raise ConfigError(key, "expected an object")
    return value


def _segments(segments, n):
    # [{"from": a, "to": b, "rates": [...]}, ...] -> rows; later segments add to earlier ones
    spans = []
    for k, seg in enumerate(segments):
        path = f"infeed.schedule[{k}]"
        a, b = _get(seg, "from", path, int), _get(seg, "to", path, int)
        rates = _get(seg, "rates", path, list)
        if not 0 <= a <= b:
            raise ConfigError(f"{path}.from", "need 0 <= from <= to")
        if len(rates) != n or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in rates):
            raise ConfigError(f"{path}.rates", f"expected {n} numbers")
        spans.append((a, b, rates))
    rows = [[0.0] * n for _ in range(max(b for _, b, _ in spans))]
    for a, b, rates in spans:
        for t in range(a, b):
            rows[t] = [x + float(v) for x, v in zip(rows[t], rates)]
    return rows


def scenario_from_dict(doc: dict) -> Scenario:
    if not isinstance(doc, dict):
        raise ConfigError("<root>", "expected a JSON object")

    materials = []
    for k, mat in enumerate(_list(doc, "materials")):
        path = f"materials[{k}]"
        name = _get(mat, "name", path, str, default=f"material_{k}")
        price = _get(mat, "price", path)
        materials.append(_checked(f"{path}.price", lambda: MaterialSpec(k, name, price)))

    stations = []
    for k, st in enumerate(doc.get("stations", [])):
        path = f"stations[{k}]"
        material = _get(st, "material", path, int)
        span = _get(st, "span", path, list)
        if not (isinstance(span, list) and len(span) == 2
                and all(isinstance(v, int) and not isinstance(v, bool) for v in span)):
            raise ConfigError(f"{path}.span", "expected [first, last] volume indices")
        if span[1] < span[0]:
            raise ConfigError(f"{path}.span", "last volume precedes first")
        cap = _get(st, "pick_cap", path)
        stations.append(_checked(path, lambda: SortStation(material, range(span[0], span[1] + 1), cap)))

    sysb = _block(doc, "system")
    system = _checked("system", lambda: SystemConfig(
        m=_get(sysb, "m", "system", int),
        materials=materials,
        stations=stations,
        r_min=_get(sysb, "r_min", "system"),
        r_max=_get(sysb, "r_max", "system"),
        u_min=_get(sysb, "u_min", "system"),
        u_max=_get(sysb, "u_max", "system"),
        dt=_get(sysb, "dt", "system", default=1.0),
    ))
    steps = _get(sysb, "steps", "system", int, default=3600)
    r_init = _get(sysb, "r_init", "system", default=None)

    camb = _block(doc, "camera")
    camera = _checked("camera", lambda: CameraModel(
        first_volume=_get(camb, "first_volume", "camera", int, default=0),
        lam=_get(camb, "lambda", "camera", int),
        image_width=_get(camb, "image_width", "camera", default=640.0),
        image_height=_get(camb, "image_height", "camera", default=480.0),
        mass_per_object=_get(camb, "mass_per_object", "camera", default=1.0),
    ))
    _checked("camera.lambda", lambda: camera.check(system))

    nb = _block(doc, "noise", required=False)
    noise = _checked("noise", lambda: NoiseConfig(**{
        f.name: _get(nb, f.name, "noise", default=f.default) for f in fields(NoiseConfig)}))
    plant = _checked("noise", lambda: PlantNoise(**{
        f.name: _get(nb, f.name, "noise", default=f.default) for f in fields(PlantNoise)}))

    mb = _block(doc, "mpc", required=False)
    unknown = set(mb) - {f.name for f in fields(MpcConfig)}
    if unknown:
        raise ConfigError(f"mpc.{sorted(unknown)[0]}", "unknown key")
    kinds = {"horizon": int, "accounting": str, "max_iters": int, "max_backtracks": int}
    mpc = _checked("mpc", lambda: MpcConfig(**{
        f.name: _get(mb, f.name, "mpc", kinds.get(f.name, float), default=f.default)
        for f in fields(MpcConfig)}))

    ib = _block(doc, "infeed")
    regimes = []
    for k, reg in enumerate(_get(ib, "materials", "infeed", list)):
        path = f"infeed.materials[{k}]"
        regimes.append(_checked(path, lambda: RegimeParams(
            mean_rate=_get(reg, "mean_rate", path),
            rate_dispersion=_get(reg, "rate_dispersion", path, default=1.0),
            regime_mean_duration=_get(reg, "regime_mean_duration", path, default=50.0),
        )))
    if len(regimes) != system.n:
        raise ConfigError("infeed.materials", f"expected {system.n} entries, one per material")
    schedule = _get(ib, "schedule", "infeed", list, default=None)
    if schedule and isinstance(schedule[0], dict):
        schedule = _segments(schedule, len(regimes))
    infeed = _checked("infeed.schedule", lambda: InfeedModel(tuple(regimes), schedule=schedule))
    lookahead = _get(ib, "lookahead", "infeed", default=math.inf)

    return _checked("<scenario>", lambda: Scenario(
        system=system, camera=camera, noise=noise, plant=plant, mpc=mpc, infeed=infeed,
        steps=steps, r_init=r_init, lookahead=lookahead, config_hash=config_hash(doc)))


def load_scenario(path) -> Scenario:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError("<file>", f"invalid JSON: {exc}") from None
    return scenario_from_dict(doc)
