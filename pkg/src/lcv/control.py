"""Receding-horizon belt speed control.

The controller picks a sequence of speed changes over a horizon of ``T``
steps that maximises the sorted value predicted by rolling the state model
forward. Gradients come from finite differences of whole rollouts and the
search is a box-projected BFGS with Armijo backtracking.

Rollouts run in a compiled kernel that evaluates a whole batch of control
sequences at once (one row per finite-difference perturbation).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from numba import njit

from .core import StateVector, StepOutcome, SystemConfig, separation_params

__all__ = [
    "ACCOUNTING_MODES",
    "MpcConfig",
    "ControlSequence",
    "SolverReport",
    "ValueMatrices",
    "TravelForecast",
    "RolloutProblem",
    "value_matrices",
    "stage_reward",
    "rollout_objective",
    "gradient_fd",
    "bfgs_solve",
    "mpc_step",
    "draw_infeed",
]

ACCOUNTING_MODES = ("prose", "literal")
_CHUNKS = ((0, 1), (1, 5), (5, 1 << 30))


@dataclass(frozen=True)
class MpcConfig:
    horizon: int | None = None
    accounting: str = "prose"
    mixed_price: float = 0.0
    fd_epsilon: float = 1e-3
    armijo_c1: float = 1e-4
    backtrack_factor: float = 0.5
    max_iters: int = 100
    max_backtracks: int = 30
    grad_tol: float = 1e-6

    def __post_init__(self):
        if self.accounting not in ACCOUNTING_MODES:
            raise ValueError(f"accounting must be one of {ACCOUNTING_MODES}, got {self.accounting!r}")
        if self.horizon is not None and self.horizon < 2:
            raise ValueError(f"horizon must be >= 2, got {self.horizon}")
        if not 0 < self.armijo_c1 < 1:
            raise ValueError("armijo_c1 must lie in (0, 1)")
        if not 0 < self.backtrack_factor < 1:
            raise ValueError("backtrack_factor must lie in (0, 1)")
        if self.fd_epsilon <= 0:
            raise ValueError("fd_epsilon must be positive")
        if self.mixed_price < 0:
            raise ValueError("mixed_price must be >= 0")
        if self.max_iters < 0 or self.max_backtracks < 0:
            raise ValueError("iteration caps must be >= 0")

    def check(self, system: SystemConfig) -> None:
        if self.mixed_price > system.prices.min():
            raise ValueError(f"mixed_price {self.mixed_price} exceeds the cheapest material price")
        if self.horizon is None and system.r_min <= 0:
            raise ValueError("r_min must be positive when the horizon is derived from transit time")

    def resolved_horizon(self, system: SystemConfig) -> int:
        if self.horizon is not None:
            return self.horizon
        return max(2, math.ceil(system.m / system.r_min))


@dataclass(frozen=True, eq=False)
class ControlSequence:
    u: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "u", np.array(self.u, dtype=float).ravel())

    def __len__(self):
        return len(self.u)

    def shifted(self) -> "ControlSequence":
        """Drop the applied first move and repeat the last one."""
        if len(self.u) == 0:
            return self
        return ControlSequence(np.append(self.u[1:], self.u[-1]))

    def check(self, system: SystemConfig, tol: float = 1e-12) -> None:
        if np.any(self.u < system.u_min - tol) or np.any(self.u > system.u_max + tol):
            raise ValueError("control sequence leaves the [u_min, u_max] box")


@dataclass
class SolverReport:
    iterations: int = 0
    objective: float = 0.0
    grad_norm: float = 0.0
    backtracks_total: int = 0
    status: str = "grad_tol"
    history: list = field(default_factory=list)

    @property
    def converged(self) -> bool:
        return self.status == "grad_tol"


@dataclass(frozen=True, eq=False)
class ValueMatrices:
    V: np.ndarray
    O: np.ndarray


@dataclass(frozen=True, eq=False)
class TravelForecast:
    """Material waiting to be laid on the belt, indexed by belt travel.

    ``profile[q]`` is the mass per material that enters while the belt
    advances from volume-length ``q`` to ``q + 1``. Only travel up to
    ``position + lookahead`` is known to the controller.
    """

    profile: np.ndarray
    position: float = 0.0
    lookahead: float = math.inf

    @property
    def cap(self) -> float:
        return min(self.position + self.lookahead, float(len(self.profile)))


@njit(cache=True)
def draw_infeed(profile, start, length, cap, out):
    """Mass laid on the belt while it travels from ``start`` to ``start + length``.

    Travel beyond ``cap`` draws nothing. Writes the per-material totals to ``out``.
    """
    n = profile.shape[1]
    for i in range(n):
        out[i] = 0.0
    a = min(start, cap)
    b = min(start + length, cap)
    q = int(math.floor(a))
    while q < b:
        lo = max(a, float(q))
        hi = min(b, q + 1.0)
        w = hi - lo
        if w > 0.0:
            for i in range(n):
                out[i] += w * profile[q, i]
        q += 1


@njit(cache=True)
def _advance(x, y, r, pos, step_, span_start, span_stop, caps, prices, mixed, literal, timed,
             infeed_steps, profile, cap, feed, picked, exited):
    """One transition of ``x`` into ``y``; returns the stage reward and new travel."""
    n, m = x.shape
    lo = int(math.floor(r))
    f = r - lo
    w0 = 1.0 - f
    for i in range(n):
        ex = 0.0
        for j in range(m):
            src = j - lo
            v = 0.0
            if src >= 0:
                v = w0 * x[i, src]
            if src - 1 >= 0:
                v = v + f * x[i, src - 1]
            y[i, j] = v
            if j + lo >= m:
                ex += w0 * x[i, j]
            if j + lo + 1 >= m:
                ex += f * x[i, j]
        exited[i] = ex
    for i in range(n):
        picked[i] = 0.0
        a = span_start[i]
        if a < 0:
            continue
        s = 0.0
        for j in range(a, span_stop[i]):
            s += y[i, j]
        if s > 0.0:
            p = max(0.0, 1.0 - caps[i] / s)
            picked[i] = s * (1.0 - p)
            for j in range(a, span_stop[i]):
                y[i, j] *= p
    if timed:
        for i in range(n):
            y[i, 0] += infeed_steps[step_, i]
    else:
        draw_infeed(profile, pos, r, cap, feed)
        for i in range(n):
            y[i, 0] += feed[i]
        pos += r
    reward = 0.0
    if literal:
        for i in range(n):
            a = span_start[i]
            p = 1.0
            if a >= 0:
                s = 0.0
                for j in range(a, span_stop[i]):
                    s += y[i, j]
                p = 0.0
                if s > 0.0:
                    p = max(0.0, 1.0 - caps[i] / s)
            for j in range(m):
                pj = 1.0
                if a >= 0 and j >= a and j < span_stop[i]:
                    pj = p
                reward += prices[i] * (2.0 * pj - 1.0) * y[i, j]
    else:
        for i in range(n):
            reward += prices[i] * picked[i] - (prices[i] - mixed) * exited[i]
    return reward, pos


@njit(cache=True)
def _rollout_kernel(U, mass0, r0, r_min, r_max, span_start, span_stop, caps, prices, mixed,
                    literal, timed, infeed_steps, profile, pos0, cap):
    B, H = U.shape
    n, m = mass0.shape
    values = np.zeros(B)
    x = np.empty((n, m))
    y = np.empty((n, m))
    feed = np.zeros(n)
    picked = np.zeros(n)
    exited = np.zeros(n)
    for b in range(B):
        x[:, :] = mass0
        r = r0
        pos = pos0
        total = 0.0
        for k in range(H):
            reward, pos = _advance(x, y, r, pos, k, span_start, span_stop, caps, prices, mixed, literal,
                                   timed, infeed_steps, profile, cap, feed, picked, exited)
            total += reward
            x, y = y, x
            r = min(max(r + U[b, k], r_min), r_max)
        values[b] = total
    return values


@njit(cache=True)
def _coordinate_kernel(u, coords, vals, mass0, r0, r_min, r_max, span_start, span_stop, caps, prices,
                       mixed, literal, timed, infeed_steps, profile, pos0, cap):
    # objective at u with u[coords[k]] replaced by vals[k]; shares the base prefix
    H = u.shape[0]
    n, m = mass0.shape
    xs = np.empty((H + 1, n, m))
    rs = np.empty(H + 1)
    ps = np.empty(H + 1)
    prefix = np.empty(H + 1)
    y = np.empty((n, m))
    feed = np.zeros(n)
    picked = np.zeros(n)
    exited = np.zeros(n)
    xs[0] = mass0
    r = r0
    pos = pos0
    total = 0.0
    prefix[0] = 0.0
    for k in range(H):
        rs[k] = r
        reward, pos = _advance(xs[k], xs[k + 1], r, pos, k, span_start, span_stop, caps, prices, mixed,
                               literal, timed, infeed_steps, profile, cap, feed, picked, exited)
        total += reward
        prefix[k + 1] = total
        ps[k + 1] = pos
        r = min(max(r + u[k], r_min), r_max)
    out = np.empty(len(coords))
    x = np.empty((n, m))
    for c in range(len(coords)):
        l = coords[c]
        x[:, :] = xs[l + 1]
        r = min(max(rs[l] + vals[c], r_min), r_max)
        pos = ps[l + 1]
        total = prefix[l + 1]
        for k in range(l + 1, H):
            reward, pos = _advance(x, y, r, pos, k, span_start, span_stop, caps, prices, mixed, literal,
                                   timed, infeed_steps, profile, cap, feed, picked, exited)
            total += reward
            x, y = y, x
            r = min(max(r + u[k], r_min), r_max)
        out[c] = total
    return out, prefix[H]


class RolloutProblem:
    """Horizon objective from a fixed initial state and infeed forecast.

    ``forecast`` is either a ``TravelForecast`` or a per-step (T-1, n) array
    of infeed mass (missing rows are treated as zero).
    """

    def __init__(self, x0: StateVector, forecast, system: SystemConfig, mpc: MpcConfig):
        self.system = system
        self.mpc = mpc
        self.horizon = mpc.resolved_horizon(system)
        self.dim = self.horizon - 1
        self.x0 = x0
        self.lower = np.full(self.dim, system.u_min)
        self.upper = np.full(self.dim, system.u_max)
        start, stop, cap = system.station_arrays()
        n = system.n
        if isinstance(forecast, TravelForecast):
            self._timed = False
            self._steps = np.zeros((1, n))
            self._profile = np.ascontiguousarray(forecast.profile, dtype=float).reshape(-1, n)
            self._pos, self._cap = float(forecast.position), float(forecast.cap)
        else:
            self._timed = True
            steps = np.zeros((self.dim, n))
            if forecast is not None:
                given = np.asarray(forecast, dtype=float).reshape(-1, n)[:self.dim]
                steps[:len(given)] = given
            self._steps = steps
            self._profile = np.zeros((1, n))
            self._pos = self._cap = 0.0
        self.evaluations = 0
        self._args = (
            np.ascontiguousarray(x0.mass), x0.speed, system.r_min, system.r_max, start, stop, cap,
            system.prices, mpc.mixed_price, mpc.accounting == "literal",
            self._timed, self._steps, self._profile, self._pos, self._cap)

    def __call__(self, U: np.ndarray) -> np.ndarray:
        """Objective for each row of a (B, T-1) batch of control sequences."""
        U = np.asarray(U, dtype=float)
        if U.ndim == 1:
            U = U[None, :]
        if U.shape[1] != self.dim:
            raise ValueError(f"expected {self.dim} controls per row, got {U.shape[1]}")
        self.evaluations += U.shape[0]
        return _rollout_kernel(np.ascontiguousarray(U), *self._args)

    def coordinate_values(self, u: np.ndarray, coords: np.ndarray, vals: np.ndarray):
        """Objective with one coordinate of ``u`` replaced per entry, plus J(u).

        Bitwise equal to evaluating each modified sequence with ``__call__``;
        rows reuse the unmodified trajectory up to the changed coordinate.
        """
        self.evaluations += len(coords) + 1
        return _coordinate_kernel(np.ascontiguousarray(u, dtype=float), np.asarray(coords, dtype=np.int64),
                                  np.asarray(vals, dtype=float), *self._args)


def value_matrices(state: StateVector, config: SystemConfig) -> ValueMatrices:
    """Row vectors ``V`` (price times survival) and ``O`` (price times removal)."""
    V = np.zeros(config.size)
    O = np.zeros(config.size)
    m = config.m
    for mat in config.materials:
        st = config.station_for(mat.id)
        p = np.ones(m) if st is None else separation_params(state, st)[1]
        V[mat.id * m:(mat.id + 1) * m] = mat.price * p
        O[mat.id * m:(mat.id + 1) * m] = mat.price * (1.0 - p)
    return ValueMatrices(V, O)


def stage_reward(outcome: StepOutcome, config: SystemConfig, mode: str = "prose",
                 mixed_price: float = 0.0) -> float:
    """Value earned by one transition.

    ``prose``: picked mass at full price minus the price drop on mass that
    leaves the belt unsorted. ``literal``: ``(V - O) . X`` on the new state.
    """
    if mode == "prose":
        prices = config.prices
        return float(prices @ outcome.picked - (prices - mixed_price) @ outcome.exited)
    if mode == "literal":
        vm = value_matrices(outcome.next, config)
        return float((vm.V - vm.O) @ outcome.next.data)
    raise ValueError(f"unknown accounting mode {mode!r}")


def rollout_objective(x0: StateVector, u, forecast, system: SystemConfig, mpc: MpcConfig) -> float:
    u = ControlSequence(u)
    u.check(system)
    return float(RolloutProblem(x0, forecast, system, mpc)(u.u[None, :])[0])


def gradient_fd(objective: Callable[[np.ndarray], np.ndarray], u, lower, upper,
                eps: float) -> tuple[np.ndarray, float]:
    """Finite-difference gradient of a batch objective.

    Central differences where ``u +- eps`` stays inside the box, one-sided
    differences into the box otherwise. Returns ``(gradient, objective(u))``.
    """
    u = np.asarray(u, dtype=float)
    d = len(u)
    lower = np.broadcast_to(lower, (d,))
    upper = np.broadcast_to(upper, (d,))
    up_ok = u + eps <= upper
    dn_ok = u - eps >= lower
    idx = np.arange(d)
    hi_vals = np.where(up_ok, u + eps, u)
    lo_vals = np.where(dn_ok, u - eps, u)
    if hasattr(objective, "coordinate_values"):
        vals, f0 = objective.coordinate_values(u, np.concatenate([idx, idx]), np.concatenate([hi_vals, lo_vals]))
    else:
        batch = np.repeat(u[None, :], 2 * d + 1, axis=0)
        batch[1 + idx, idx] = hi_vals
        batch[1 + d + idx, idx] = lo_vals
        vals = objective(batch)
        f0, vals = vals[0], vals[1:]
    fp, fm = vals[:d], vals[d:]
    width = np.where(up_ok, eps, 0.0) + np.where(dn_ok, eps, 0.0)
    g = np.zeros(d)
    ok = width > 0
    g[ok] = (fp[ok] - fm[ok]) / width[ok]
    return g, float(f0)


def bfgs_solve(objective: Callable[[np.ndarray], np.ndarray], u_init, lower, upper,
               mpc: MpcConfig) -> tuple[ControlSequence, SolverReport]:
    """Maximise a batch objective over a box with projected BFGS.

    Minimises ``-J``: direction ``-H g`` from the inverse-Hessian estimate,
    backtracking from a unit step until the Armijo condition holds on the
    projected trial point. The inverse Hessian starts at identity and its
    update is skipped when ``s.y <= 1e-10``.
    """
    lower = np.broadcast_to(np.asarray(lower, dtype=float), np.shape(u_init))
    upper = np.broadcast_to(np.asarray(upper, dtype=float), np.shape(u_init))
    u = np.clip(np.asarray(u_init, dtype=float), lower, upper)
    d = len(u)
    gJ, J = gradient_fd(objective, u, lower, upper, mpc.fd_epsilon)
    report = SolverReport(objective=J, history=[J])
    if not (math.isfinite(J) and np.all(np.isfinite(gJ))):
        report.status = "no_progress"
        report.grad_norm = math.inf
        return ControlSequence(u), report
    f, g = -J, -gJ
    backtrack_factor = mpc.backtrack_factor
    Hinv = np.eye(d)
    status = "max_iters"
    for _ in range(mpc.max_iters):
        pg = np.clip(u - g, lower, upper) - u
        report.grad_norm = float(np.max(np.abs(pg))) if d else 0.0
        if report.grad_norm <= mpc.grad_tol:
            status = "grad_tol"
            break
        direction = -Hinv @ g
        blocked = ((u <= lower) & (direction < 0)) | ((u >= upper) & (direction > 0))
        direction[blocked] = 0.0
        if g @ direction >= 0:
            Hinv = np.eye(d)
            direction = pg
        # backtracking, evaluated in growing chunks of step lengths
        alphas = backtrack_factor ** np.arange(mpc.max_backtracks + 1)
        trials = np.clip(u + alphas[:, None] * direction, lower, upper)
        accepted = False
        for lo, hi in _CHUNKS:
            hi = min(hi, len(alphas))
            if lo >= hi:
                break
            values = -np.asarray(objective(trials[lo:hi]), dtype=float)
            for k in range(hi - lo):
                f_trial = values[k]
                if not math.isfinite(f_trial):
                    break
                trial = trials[lo + k]
                if f_trial <= f + mpc.armijo_c1 * (g @ (trial - u)) and np.any(trial != u):
                    accepted = True
                    break
                report.backtracks_total += 1
            if accepted or not math.isfinite(f_trial):
                break
        if not accepted:
            status = "no_progress"
            break
        gJ_new, J_new = gradient_fd(objective, trial, lower, upper, mpc.fd_epsilon)
        if not np.all(np.isfinite(gJ_new)):
            status = "no_progress"
            break
        s = trial - u
        y = -gJ_new - g
        sy = s @ y
        if sy > 1e-10:
            rho = 1.0 / sy
            Hy = Hinv @ y
            Hinv = Hinv + ((sy + y @ Hy) * rho * rho) * np.outer(s, s) - rho * (np.outer(Hy, s) + np.outer(s, Hy))
        u, f, g = trial, -J_new, -gJ_new
        report.iterations += 1
        report.history.append(J_new)
    else:
        pg = np.clip(u - g, lower, upper) - u
        report.grad_norm = float(np.max(np.abs(pg))) if d else 0.0
        if report.grad_norm <= mpc.grad_tol:
            status = "grad_tol"
    report.status = status
    report.objective = -f
    return ControlSequence(u), report


def mpc_step(estimate: StateVector, previous: ControlSequence | None, forecast,
             system: SystemConfig, mpc: MpcConfig) -> tuple[float, ControlSequence, SolverReport]:
    """One receding-horizon decision.

    Warm-starts from ``previous`` shifted by one step (zeros when absent),
    solves the horizon problem and returns the first move, the full plan
    (pass it back as ``previous`` next time) and the solver report.
    """
    problem = RolloutProblem(estimate, forecast, system, mpc)
    if previous is None or len(previous) != problem.dim:
        warm = np.zeros(problem.dim)
    else:
        warm = previous.shifted().u
    plan, report = bfgs_solve(problem, warm, problem.lower, problem.upper, mpc)
    return float(plan.u[0]), plan, report
