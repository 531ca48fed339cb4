"""Longitudinal control volume state and transition dynamics.

The belt is cut into ``m`` control volumes; the state holds the mass of each
of ``n`` materials in every volume followed by the belt speed ``r`` (in
volumes per timestep)::

    data[i * m + j] = mass of material i in volume j
    data[n * m]     = belt speed

One transition moves the material along the belt (motion matrix), lets the
sort stations remove what they can (sort matrix), then loads fresh infeed into
volume 0 and applies the speed change.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

__all__ = [
    "InvalidSpeedError",
    "MaterialSpec",
    "SortStation",
    "SystemConfig",
    "StateVector",
    "StepOutcome",
    "integral_motion_matrix",
    "motion_matrix",
    "separation_params",
    "sort_matrix",
    "transition_matrix",
    "shift_mass",
    "apply_sorting",
    "step",
    "total_material",
]


class InvalidSpeedError(ValueError):
    """Belt speed outside the range the motion model is defined on."""


@dataclass(frozen=True)
class MaterialSpec:
    id: int
    name: str
    price: float

    def __post_init__(self):
        if self.price < 0:
            raise ValueError(f"material {self.id}: price must be >= 0, got {self.price}")


@dataclass(frozen=True)
class SortStation:
    """A picker removing up to ``pick_cap`` mass of one material per step.

    ``span`` is the contiguous range of volume indices the station can reach.
    """

    material: int
    span: range
    pick_cap: float

    def __post_init__(self):
        if len(self.span) == 0:
            raise ValueError("station span must be nonempty")
        if self.span.step != 1:
            raise ValueError("station span must be contiguous")
        if self.pick_cap < 0:
            raise ValueError(f"pick_cap must be >= 0, got {self.pick_cap}")


@dataclass(frozen=True)
class SystemConfig:
    m: int
    materials: tuple[MaterialSpec, ...]
    stations: tuple[SortStation, ...] = ()
    r_min: float = 1.0
    r_max: float = 1.0
    u_min: float = -1.0
    u_max: float = 1.0
    dt: float = 1.0
    _station_of: dict = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "materials", tuple(self.materials))
        object.__setattr__(self, "stations", tuple(self.stations))
        if self.m < 1:
            raise ValueError(f"m must be >= 1, got {self.m}")
        if self.n < 1:
            raise ValueError("at least one material is required")
        for k, mat in enumerate(self.materials):
            if mat.id != k:
                raise ValueError(f"material ids must be dense 0..n-1; got id {mat.id} at position {k}")
        if not 0 <= self.r_min <= self.r_max:
            raise ValueError(f"need 0 <= r_min <= r_max, got r_min={self.r_min}, r_max={self.r_max}")
        if self.r_max > self.m:
            raise ValueError(f"r_max={self.r_max} exceeds the belt length m={self.m}")
        if not self.u_min <= 0 <= self.u_max:
            raise ValueError(f"need u_min <= 0 <= u_max, got [{self.u_min}, {self.u_max}]")
        station_of = {}
        for st in self.stations:
            if not 0 <= st.material < self.n:
                raise ValueError(f"station material {st.material} out of range")
            if st.span.start < 0 or st.span.stop > self.m:
                raise ValueError(f"station span {st.span.start}..{st.span.stop - 1} outside [0, {self.m})")
            if st.material in station_of:
                raise ValueError(f"material {st.material} has more than one station")
            station_of[st.material] = st
        object.__setattr__(self, "_station_of", station_of)

    @property
    def n(self) -> int:
        return len(self.materials)

    @property
    def size(self) -> int:
        return self.n * self.m + 1

    @property
    def prices(self) -> np.ndarray:
        return np.array([mat.price for mat in self.materials], dtype=float)

    def station_for(self, material: int) -> SortStation | None:
        return self._station_of.get(material)

    def station_arrays(self):
        """Per-material (span_start, span_stop, pick_cap); start = -1 when unsorted."""
        start = np.full(self.n, -1, dtype=np.int64)
        stop = np.full(self.n, -1, dtype=np.int64)
        cap = np.zeros(self.n)
        for st in self.stations:
            start[st.material] = st.span.start
            stop[st.material] = st.span.stop
            cap[st.material] = st.pick_cap
        return start, stop, cap

    def clamp_speed(self, r: float) -> float:
        return min(max(r, self.r_min), self.r_max)


@dataclass(frozen=True, eq=False)
class StateVector:
    data: np.ndarray
    n: int
    m: int

    def __post_init__(self):
        data = np.array(self.data, dtype=float)
        if data.shape != (self.n * self.m + 1,):
            raise ValueError(f"state must have length {self.n * self.m + 1}, got {data.shape}")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @classmethod
    def from_parts(cls, mass, speed: float) -> "StateVector":
        mass = np.asarray(mass, dtype=float)
        n, m = mass.shape
        return cls(np.append(mass.ravel(), speed), n, m)

    @classmethod
    def empty(cls, config: SystemConfig, speed: float | None = None) -> "StateVector":
        speed = config.r_min if speed is None else speed
        return cls.from_parts(np.zeros((config.n, config.m)), speed)

    @property
    def mass(self) -> np.ndarray:
        return self.data[:-1].reshape(self.n, self.m)

    @property
    def speed(self) -> float:
        return float(self.data[-1])

    def validate(self, config: SystemConfig, tol: float = 0.0) -> None:
        if (self.n, self.m) != (config.n, config.m):
            raise ValueError("state shape does not match config")
        if np.any(self.mass < -tol):
            raise ValueError("negative mass in state")
        if not config.r_min - tol <= self.speed <= config.r_max + tol:
            raise ValueError(f"speed {self.speed} outside [{config.r_min}, {config.r_max}]")

    def __eq__(self, other):
        if not isinstance(other, StateVector):
            return NotImplemented
        return (self.n, self.m) == (other.n, other.m) and np.array_equal(self.data, other.data)

    __hash__ = None


@dataclass(frozen=True)
class StepOutcome:
    next: StateVector
    picked: np.ndarray
    exited: np.ndarray


def _block_matrix(block: np.ndarray, n: int) -> np.ndarray:
    m = block.shape[0]
    out = np.zeros((n * m + 1, n * m + 1))
    for i in range(n):
        out[i * m:(i + 1) * m, i * m:(i + 1) * m] = block
    out[-1, -1] = 1.0
    return out


def integral_motion_matrix(speed: int, config: SystemConfig) -> np.ndarray:
    """Block shift matrix for an integer belt speed.

    Each material block is the m x m matrix with ``L[i, j] = 1`` iff
    ``i == j + speed``; mass pushed past the last volume has no destination row.
    """
    if int(speed) != speed or not 0 <= speed <= config.m:
        raise InvalidSpeedError(f"integer speed must lie in [0, {config.m}], got {speed}")
    block = np.eye(config.m, k=-int(speed))
    return _block_matrix(block, config.n)


def motion_matrix(speed: float, config: SystemConfig) -> np.ndarray:
    """Linear interpolation between the neighbouring integral motion matrices."""
    if not 0 <= speed <= config.m:
        raise InvalidSpeedError(f"speed must lie in [0, {config.m}], got {speed}")
    lo, hi = math.floor(speed), math.ceil(speed)
    if lo == hi:
        return integral_motion_matrix(lo, config)
    w_hi = (speed - lo) / (hi - lo)
    w_lo = (hi - speed) / (hi - lo)
    return w_lo * integral_motion_matrix(lo, config) + w_hi * integral_motion_matrix(hi, config)


def separation_params(state: StateVector, station: SortStation) -> tuple[float, np.ndarray]:
    """Return ``(eta, p)`` for one station.

    ``eta`` is the pick cap over the mass on the span (``inf`` for an empty
    span); ``p`` is the per-volume fraction of the station's material that
    survives sorting.
    """
    on_span = float(state.mass[station.material, station.span.start:station.span.stop].sum())
    eta = station.pick_cap / on_span if on_span > 0 else math.inf
    p = np.ones(state.m)
    p[station.span.start:station.span.stop] = max(0.0, 1.0 - eta)
    return eta, p


def _survival(state: StateVector, config: SystemConfig) -> np.ndarray:
    diag = np.ones(config.size)
    for st in config.stations:
        _, p = separation_params(state, st)
        diag[st.material * config.m:(st.material + 1) * config.m] = p
    return diag


def sort_matrix(state: StateVector, config: SystemConfig) -> np.ndarray:
    return np.diag(_survival(state, config))


def transition_matrix(state: StateVector, config: SystemConfig) -> np.ndarray:
    """Frozen-coefficient transition ``F(L X) L(r)`` around ``state``.

    The sort matrix is evaluated on the post-motion mass, matching ``step``.
    """
    moved, _ = shift_mass(state.mass, state.speed)
    survival = _survival(StateVector.from_parts(moved, state.speed), config)
    return survival[:, None] * motion_matrix(state.speed, config)


def shift_mass(mass: np.ndarray, speed: float) -> tuple[np.ndarray, np.ndarray]:
    """Advance an (n, m) mass array by ``speed`` volumes.

    Equivalent to applying ``motion_matrix`` to the mass entries. Returns the
    moved mass and the per-material mass pushed off the end of the belt.
    """
    mass = np.asarray(mass, dtype=float)
    m = mass.shape[-1]
    if not 0 <= speed <= m:
        raise InvalidSpeedError(f"speed must lie in [0, {m}], got {speed}")
    lo = math.floor(speed)
    frac = speed - lo
    moved = np.zeros_like(mass)
    exited = np.zeros(mass.shape[:-1])
    for k, w in ((lo, 1.0 - frac), (lo + 1, frac)):
        if w == 0.0:
            continue
        if k < m:
            moved[..., k:] += w * mass[..., :m - k]
        exited += w * mass[..., max(m - k, 0):].sum(axis=-1)
    return moved, exited


def apply_sorting(mass: np.ndarray, config: SystemConfig) -> tuple[np.ndarray, np.ndarray]:
    """Apply the sort matrix to an (n, m) mass array.

    Returns the surviving mass and the per-material picked mass.
    """
    out = np.array(mass, dtype=float)
    picked = np.zeros(config.n)
    for st in config.stations:
        seg = out[st.material, st.span.start:st.span.stop]
        on_span = seg.sum()
        if on_span <= 0:
            continue
        p = 0.0 if on_span <= st.pick_cap else 1.0 - st.pick_cap / on_span
        picked[st.material] = on_span * (1.0 - p)
        seg *= p
    return out, picked


def step(state: StateVector, u: float, config: SystemConfig, infeed: Sequence[float] | None = None) -> StepOutcome:
    """Advance the belt one timestep: motion, then sorting, then infeed.

    Motion uses the current speed; the speed change ``u`` takes effect on the
    next step and the resulting speed is clamped to ``[r_min, r_max]``.
    """
    if not config.u_min <= u <= config.u_max:
        raise ValueError(f"speed change u={u} outside [{config.u_min}, {config.u_max}]")
    moved, exited = shift_mass(state.mass, state.speed)
    survived, picked = apply_sorting(moved, config)
    if infeed is not None:
        survived[:, 0] += np.asarray(infeed, dtype=float)
    nxt = StateVector.from_parts(survived, config.clamp_speed(state.speed + u))
    return StepOutcome(next=nxt, picked=picked, exited=exited)


def total_material(state: StateVector, material: int) -> float:
    if not 0 <= material < state.n:
        raise IndexError(f"material index {material} out of range [0, {state.n})")
    return float(state.mass[material].sum())
