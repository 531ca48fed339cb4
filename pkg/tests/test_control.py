import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from builders import fd_instance
from lcv.control import (
    ControlSequence,
    MpcConfig,
    RolloutProblem,
    TravelForecast,
    bfgs_solve,
    draw_infeed,
    gradient_fd,
    mpc_step,
    rollout_objective,
    stage_reward,
    value_matrices,
)
from lcv.core import MaterialSpec, SortStation, StateVector, StepOutcome, SystemConfig, step


def small_system(m=5, n=1, cap=1.0, r_min=1.0, r_max=2.0, prices=None):
    prices = prices or [10.0, 3.0, 1.0][:n]
    mats = [MaterialSpec(i, f"m{i}", p) for i, p in enumerate(prices)]
    stations = [SortStation(0, range(2, 4), cap)]
    return SystemConfig(m, mats, stations, r_min, r_max, -1.0, 1.0)


class Bowl:
    """Batch objective -(u - c)' D (u - c)."""

    def __init__(self, c, scale):
        self.c = np.asarray(c, dtype=float)
        self.scale = np.asarray(scale, dtype=float)
        self.calls = 0

    def __call__(self, U):
        U = np.atleast_2d(U)
        self.calls += len(U)
        return -(((U - self.c) ** 2) * self.scale).sum(axis=1)


def oracle_rollout(x0, u, profile, system, mpc, mode):
    # independent rollout through core.step, drawing infeed from the travel profile
    x, pos, total = x0, 0.0, 0.0
    n = system.n
    for k in range(len(u)):
        r = x.speed
        a, b = pos, pos + r
        feed = np.zeros(n)
        q = math.floor(a)
        while q < b and q < len(profile):
            feed += (min(b, q + 1) - max(a, q)) * profile[q]
            q += 1
        pos = b
        out = step(x, u[k], system, feed)
        total += stage_reward(out, system, mode, mpc.mixed_price)
        x = out.next
    return total


def test_value_matrices_examples():
    system = SystemConfig(3, [MaterialSpec(0, "a", 2.0)], [SortStation(0, range(1, 2), 2.0)], 1.0, 1.0)
    vm = value_matrices(StateVector.from_parts([[0.0, 4.0, 0.0]], 1.0), system)
    assert vm.V.tolist() == [2.0, 1.0, 2.0, 0.0]
    assert vm.O.tolist() == [0.0, 1.0, 0.0, 0.0]
    vm = value_matrices(StateVector.from_parts([[0.0, 1.0, 0.0]], 1.0), system)
    assert vm.V[1] == 0.0 and vm.O[1] == 2.0


def test_stage_reward_examples():
    system = SystemConfig(1, [MaterialSpec(0, "a", 3.0)], [SortStation(0, range(0, 1), 2.0)], 0.0, 1.0)
    empty = StepOutcome(StateVector.empty(system), np.zeros(1), np.zeros(1))
    assert stage_reward(empty, system, "prose") == 0.0
    assert stage_reward(empty, system, "literal") == 0.0
    out = StepOutcome(StateVector.empty(system), np.array([2.0]), np.array([1.0]))
    assert stage_reward(out, system, "prose", 0.0) == 3.0
    lit_sys = SystemConfig(1, [MaterialSpec(0, "a", 1.0)], [SortStation(0, range(0, 1), 2.0)], 0.0, 1.0)
    out = StepOutcome(StateVector.from_parts([[4.0]], 0.0), np.zeros(1), np.zeros(1))
    assert stage_reward(out, lit_sys, "literal") == 0.0
    with pytest.raises(ValueError):
        stage_reward(out, lit_sys, "other")


@pytest.mark.parametrize("mode", ["prose", "literal"])
def test_kernel_matches_core_step(mode):
    rng = np.random.default_rng(8)
    stations = [SortStation(0, range(3, 6), 1.2), SortStation(2, range(7, 10), 0.4)]
    mats = [MaterialSpec(i, f"m{i}", p) for i, p in enumerate([9.0, 4.0, 1.5])]
    system = SystemConfig(12, mats, stations, 1.5, 4.0, -1.0, 1.0)
    mpc = MpcConfig(accounting=mode, mixed_price=0.7)
    for _ in range(10):
        x0 = StateVector.from_parts(rng.gamma(1.0, 1.0, (3, 12)), rng.uniform(1.5, 4.0))
        profile = rng.gamma(1.0, 1.0, (int(rng.integers(5, 60)), 3))
        u = rng.uniform(-1, 1, mpc.resolved_horizon(system) - 1)
        got = rollout_objective(x0, u, TravelForecast(profile), system, mpc)
        assert abs(got - oracle_rollout(x0, u, profile, system, mpc, mode)) <= 1e-9 * max(1.0, abs(got))


def test_time_indexed_forecast():
    system = small_system(r_min=1.0, r_max=2.0)
    mpc = MpcConfig(horizon=4)
    x0 = StateVector.empty(system, 1.0)
    feed = np.array([[3.0], [0.0], [1.0]])
    u = np.array([0.5, 0.0, -0.5])
    x, total = x0, 0.0
    for k in range(3):
        out = step(x, u[k], system, feed[k])
        total += stage_reward(out, system)
        x = out.next
    assert rollout_objective(x0, u, feed, system, mpc) == pytest.approx(total, abs=1e-12)
    # missing forecast rows count as no infeed
    assert rollout_objective(x0, u, feed[:1], system, mpc) == rollout_objective(
        x0, u, np.vstack([feed[:1], np.zeros((2, 1))]), system, mpc)


def test_empty_belt_objective_is_zero():
    system = small_system()
    mpc = MpcConfig()
    u = np.zeros(mpc.resolved_horizon(system) - 1)
    assert rollout_objective(StateVector.empty(system, 1.5), u, None, system, mpc) == 0.0


def test_slow_schedule_wins_on_pulse():
    # pulse mass exceeds what the station can pick during a fast transit
    system = SystemConfig(5, [MaterialSpec(0, "a", 10.0)], [SortStation(0, range(2, 4), 1.0)], 1.0, 2.0,
                          -1.0, 1.0)
    mpc = MpcConfig(horizon=6, mixed_price=1.0)
    x0 = StateVector.from_parts([[6.0, 0.0, 0.0, 0.0, 0.0]], 1.0)
    slow = rollout_objective(x0, np.zeros(5), None, system, mpc)
    fast = rollout_objective(x0, np.ones(5), None, system, mpc)
    assert slow >= fast


def test_rollout_is_deterministic_and_batch_consistent():
    problem, u = fd_instance(3)
    rng = np.random.default_rng(0)
    U = np.clip(u + rng.normal(0, 0.2, (17, problem.dim)), problem.lower, problem.upper)
    batch = problem(U)
    single = np.array([problem(row[None, :])[0] for row in U])
    assert np.array_equal(batch, single)
    assert np.array_equal(problem(U[::-1]), batch[::-1])
    assert np.array_equal(problem(U), batch)


def test_coordinate_values_match_full_rollouts():
    for seed in range(5):
        problem, u = fd_instance(seed)
        coords = np.array([0, 3, problem.dim - 1, 1, 1])
        vals = np.array([0.3, -0.2, 0.1, 0.45, -0.45])
        got, base = problem.coordinate_values(u, coords, vals)
        U = np.repeat(u[None, :], len(coords), axis=0)
        U[np.arange(len(coords)), coords] = vals
        assert np.array_equal(got, problem(U))
        assert base == problem(u[None, :])[0]


def test_rollout_rejects_out_of_box_controls():
    system = small_system()
    mpc = MpcConfig()
    with pytest.raises(ValueError):
        rollout_objective(StateVector.empty(system, 1.0), np.full(4, 1.5), None, system, mpc)


def test_draw_infeed_exact_overlap():
    profile = np.arange(10.0).reshape(5, 2)
    out = np.zeros(2)
    draw_infeed(profile, 0.5, 2.0, 5.0, out)
    np.testing.assert_allclose(out, 0.5 * profile[0] + profile[1] + 0.5 * profile[2])
    draw_infeed(profile, 4.0, 3.0, 5.0, out)
    np.testing.assert_allclose(out, profile[4])
    draw_infeed(profile, 1.0, 3.0, 2.5, out)
    np.testing.assert_allclose(out, profile[1] + 0.5 * profile[2])


def cosine(a, b):
    return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))


@pytest.mark.parametrize("seed", range(20))
def test_gradient_matches_fine_oracle(seed):
    problem, u = fd_instance(seed)
    eps = problem.mpc.fd_epsilon
    g, f0 = gradient_fd(problem, u, problem.lower, problem.upper, eps)
    g_ref, _ = gradient_fd(problem, u, problem.lower, problem.upper, eps / 16)
    assert f0 == problem(u[None, :])[0]
    assert cosine(g, g_ref) >= 0.99
    assert np.linalg.norm(g - g_ref) <= 0.1 * np.linalg.norm(g_ref)


def test_gradient_one_sided_at_bounds():
    problem, u = fd_instance(1)
    eps = 1e-3
    u = u.copy()
    u[0], u[-1] = problem.upper[0], problem.lower[-1]
    g, f0 = gradient_fd(problem, u, problem.lower, problem.upper, eps)
    down = u.copy()
    down[0] -= eps
    up = u.copy()
    up[-1] += eps
    assert g[0] == (f0 - problem(down[None, :])[0]) / eps
    assert g[-1] == (problem(up[None, :])[0] - f0) / eps


def test_gradient_without_coordinate_hook():
    bowl = Bowl([0.1, -0.2, 0.3], [1.0, 2.0, 3.0])
    u = np.array([0.5, 0.0, -0.5])
    g, f0 = gradient_fd(bowl, u, -np.ones(3), np.ones(3), 1e-4)
    np.testing.assert_allclose(g, -2 * bowl.scale * (u - bowl.c), atol=1e-8)
    assert f0 == bowl(u)[0]


def test_gradient_zero_on_empty_belt():
    system = small_system()
    mpc = MpcConfig()
    problem = RolloutProblem(StateVector.empty(system, 1.5), None, system, mpc)
    g, _ = gradient_fd(problem, np.zeros(problem.dim), problem.lower, problem.upper, 1e-3)
    assert np.all(g == 0)


def test_bfgs_quadratic_bowl():
    rng = np.random.default_rng(0)
    c = rng.uniform(-0.8, 0.8, 8)
    bowl = Bowl(c, np.geomspace(1.0, 20.0, 8))
    mpc = MpcConfig(fd_epsilon=1e-4, grad_tol=1e-12)
    plan, report = bfgs_solve(bowl, np.zeros(8), -np.ones(8), np.ones(8), mpc)
    assert np.max(np.abs(plan.u - c)) <= 1e-8
    assert report.iterations <= 50
    assert all(b >= a for a, b in zip(report.history, report.history[1:]))


def test_bfgs_bowl_outside_box_lands_on_bound():
    bowl = Bowl([2.0, -0.3], [1.0, 1.0])
    plan, report = bfgs_solve(bowl, np.zeros(2), -np.ones(2), np.ones(2), MpcConfig(grad_tol=1e-10))
    np.testing.assert_allclose(plan.u, [1.0, -0.3], atol=1e-8)
    assert report.converged


def test_bfgs_zero_gradient_returns_start():
    bowl = Bowl([0.2, 0.4], [1.0, 1.0])
    plan, report = bfgs_solve(bowl, [0.2, 0.4], -np.ones(2), np.ones(2), MpcConfig())
    assert plan.u.tolist() == [0.2, 0.4]
    assert report.iterations == 0 and report.status == "grad_tol"


def test_bfgs_flat_objective_keeps_warm_start():
    flat = lambda U: np.zeros(len(np.atleast_2d(U)))
    start = np.array([0.3, -0.1, 0.0])
    plan, report = bfgs_solve(flat, start, -np.ones(3), np.ones(3), MpcConfig())
    assert np.array_equal(plan.u, start) and report.iterations == 0


def test_bfgs_non_finite_objective_aborts():
    def bad(U):
        U = np.atleast_2d(U)
        return np.where(U[:, 0] > 0.05, np.nan, -((U - 0.5) ** 2).sum(axis=1))
    plan, report = bfgs_solve(bad, [0.0, 0.0], -np.ones(2), np.ones(2), MpcConfig())
    assert report.status == "no_progress"
    assert np.all(np.isfinite(plan.u)) and math.isfinite(report.objective)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_solver_feasible_and_monotone_on_rollouts(seed):
    problem, u = fd_instance(seed % 50, m=8)
    plan, report = bfgs_solve(problem, u, problem.lower, problem.upper, problem.mpc)
    assert np.all(plan.u >= problem.lower - 1e-12) and np.all(plan.u <= problem.upper + 1e-12)
    assert all(b >= a for a, b in zip(report.history, report.history[1:]))
    assert report.objective == problem(plan.u[None, :])[0]
    assert report.objective >= problem(u[None, :])[0]
    assert report.status in ("grad_tol", "max_iters", "no_progress")


def test_warm_start_shift():
    assert ControlSequence([1.0, 2.0, 3.0]).shifted().u.tolist() == [2.0, 3.0, 3.0]
    assert len(ControlSequence([]).shifted()) == 0


def test_mpc_step_empty_belt_keeps_warm_start():
    system = small_system()
    mpc = MpcConfig()
    u0, plan, report = mpc_step(StateVector.empty(system, 1.5), None, None, system, mpc)
    assert u0 == 0.0 and np.all(plan.u == 0) and report.iterations == 0


def test_mpc_step_static_scenario_settles():
    rng = np.random.default_rng(2)
    system = small_system(m=8, n=2, cap=1.0, r_min=1.0, r_max=3.0, prices=[10.0, 2.0])
    mpc = MpcConfig(mixed_price=1.0)
    x = StateVector.from_parts(rng.gamma(1.0, 1.0, (2, 8)), 2.0)
    plan, applied = None, []
    for _ in range(10):
        u0, plan, _ = mpc_step(x, plan, None, system, mpc)
        applied.append(u0)
    assert applied[-1] == applied[-2] == applied[-3]


def test_mpc_config_validation():
    system = small_system()
    with pytest.raises(ValueError):
        MpcConfig(accounting="swap")
    with pytest.raises(ValueError):
        MpcConfig(horizon=1)
    with pytest.raises(ValueError):
        MpcConfig(armijo_c1=1.5)
    with pytest.raises(ValueError):
        MpcConfig(mixed_price=20.0).check(system)
    assert MpcConfig().resolved_horizon(system) == 5
    zero_min = SystemConfig(5, [MaterialSpec(0, "a", 1.0)], (), 0.0, 2.0)
    with pytest.raises(ValueError):
        MpcConfig().check(zero_min)
