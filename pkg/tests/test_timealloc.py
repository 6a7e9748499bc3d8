import csv
import math

import numpy as np
import pytest
from numpy.testing import assert_allclose
from scipy.optimize import minimize

from conftest import random_path
from snapalloc.errors import BracketFailureError, DegenerateSegmentError
from snapalloc.timealloc import (
    BgdConfig,
    TvpLimits,
    constrained_gradient,
    cost_at_fractions,
    fraction_grid,
    project_capped_simplex,
    refine_bgd,
    scale_total_time,
    tvp_allocate,
    write_iteration_log,
)
from snapalloc.trajopt import TimeAllocation, WaypointPath, sample, solve_min_snap

SYMMETRIC = WaypointPath([[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]])


def _rotation(a):
    return np.array([[math.cos(a), -math.sin(a)], [math.sin(a), math.cos(a)]])


class TestTvp:
    def test_trapezoid_boundary(self):
        assert tvp_allocate(WaypointPath([[0, 0], [10, 0]])).durations[0] == pytest.approx(4.0, abs=1e-12)

    def test_triangle(self):
        assert tvp_allocate(WaypointPath([[0, 0], [0.625, 0]])).durations[0] == pytest.approx(1.0, abs=1e-12)

    def test_sqrt_law(self):
        d = np.array([0.3, 1.1, 2.0])
        pts = np.column_stack([np.concatenate([[0], np.cumsum(d)]), np.zeros(4)])
        t1 = tvp_allocate(WaypointPath(pts)).durations
        t4 = tvp_allocate(WaypointPath(4 * pts)).durations
        assert_allclose(t4, 2 * t1, rtol=1e-12)

    def test_long_segment_is_trapezoid(self):
        t = tvp_allocate(WaypointPath([[0, 0], [30, 0]])).durations[0]
        assert t == pytest.approx(30 / 5 + 5 / 2.5)

    def test_custom_limits(self):
        t = tvp_allocate(WaypointPath([[0, 0], [1, 0]]), TvpLimits(1.0, 1.0)).durations[0]
        assert t == pytest.approx(2.0)

    def test_degenerate(self):
        with pytest.raises(DegenerateSegmentError):
            tvp_allocate(WaypointPath([[0, 0], [1, 0], [1, 0]]))

    def test_bad_limits(self):
        with pytest.raises(ValueError):
            TvpLimits(0.0, 1.0)


class TestGradient:
    def test_symmetric_is_stationary(self):
        alloc = TimeAllocation([1.5, 1.5])
        J = solve_min_snap(SYMMETRIC, alloc)[1]
        g = constrained_gradient(SYMMETRIC, alloc)
        assert np.abs(g.values).max() <= 1e-4 * J / alloc.total_time
        assert g.skipped == [] and g.one_sided == []

    def test_single_segment_is_empty(self):
        g = constrained_gradient(WaypointPath([[0, 0], [1, 1]]), TimeAllocation([2.0]))
        assert g.values.shape == (0,)

    def test_sign_matches_recomputation(self, rng):
        checked = 0
        for _ in range(15):
            path = WaypointPath(random_path(rng, int(rng.integers(3, 7))))
            alloc = tvp_allocate(path)
            t = alloc.durations
            m = t.shape[0]
            J = solve_min_snap(path, alloc)[1]
            h = 1e-4 * alloc.total_time
            g = constrained_gradient(path, alloc)
            for i in range(m):
                direction = np.full(m, -1.0 / (m - 1))
                direction[i] = 1.0
                diff = solve_min_snap(path, TimeAllocation(t + h * direction))[1] - J
                if abs(g.values[i]) * h > 1e-6 * J:
                    assert np.sign(diff) == np.sign(g.values[i])
                    checked += 1
        assert checked > 20

    def test_one_sided_near_floor(self):
        path = WaypointPath([[0, 0], [1, 0], [3, 1]])
        alloc = TimeAllocation([0.01, 3.99])
        g = constrained_gradient(path, alloc, t_min=0.0095, h=0.001)
        assert g.one_sided == [0, 1] and g.skipped == []
        assert np.all(np.isfinite(g.values))

    def test_skipped_when_both_sides_infeasible(self):
        path = WaypointPath([[0, 0], [1, 0], [3, 1], [4, 0]])
        alloc = TimeAllocation([0.01, 0.01, 3.98])
        g = constrained_gradient(path, alloc, t_min=0.0099, h=0.01)
        assert g.skipped


class TestProjection:
    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_matches_optimizer(self, rng):
        for _ in range(20):
            m = int(rng.integers(2, 7))
            x = rng.normal(size=m) * 3
            total, lower = 5.0, 0.2
            p = project_capped_simplex(x, total, lower)
            res = minimize(
                lambda y: np.sum((y - x) ** 2),
                np.full(m, total / m),
                jac=lambda y: 2 * (y - x),
                bounds=[(lower, None)] * m,
                constraints=[{"type": "eq", "fun": lambda y: y.sum() - total}],
                method="SLSQP",
                options={"ftol": 1e-14, "maxiter": 500},
            )
            assert_allclose(p, res.x, atol=1e-6)
            assert p.sum() == pytest.approx(total, abs=1e-12)
            assert p.min() >= lower

    def test_feasible_point_unchanged(self):
        x = np.array([1.0, 2.0, 3.0])
        assert_allclose(project_capped_simplex(x, 6.0, 0.5), x, atol=1e-15)

    def test_infeasible(self):
        with pytest.raises(ValueError):
            project_capped_simplex(np.ones(3), 1.0, 0.5)


class TestBgd:
    def test_symmetric_converges_to_half(self):
        res = refine_bgd(SYMMETRIC, TimeAllocation.from_fractions([0.6, 0.4], 3.0))
        assert_allclose(res.allocation.fractions, [0.5, 0.5], atol=1e-3)
        assert res.converged

    def test_descent_and_invariants(self, rng):
        cfg = BgdConfig()
        for _ in range(20):
            path = WaypointPath(random_path(rng, int(rng.integers(3, 9))))
            init = tvp_allocate(path)
            res = refine_bgd(path, init, cfg)
            T = init.total_time
            assert res.cost <= res.log[0].cost
            assert res.allocation.total_time == pytest.approx(T, rel=1e-9)
            assert res.allocation.durations.min() >= cfg.t_min * T * (1 - 1e-12)
            costs = [r.cost for r in res.log]
            assert all(b <= a for a, b in zip(costs, costs[1:]))
            assert res.cost == pytest.approx(solve_min_snap(path, res.allocation)[1], rel=1e-12)

    def test_grid_oracle(self, rng):
        for _ in range(5):
            path = WaypointPath(random_path(rng, 4))
            init = tvp_allocate(path)
            res = refine_bgd(path, init)
            grid = min(cost_at_fractions(path, f, init.total_time) for f in fraction_grid(3, 0.01))
            assert res.cost <= grid * 1.01

    def test_argmin_invariant_under_transform(self, rng):
        for _ in range(5):
            pts = random_path(rng, 5)
            init = tvp_allocate(WaypointPath(pts))
            moved = 2.7 * pts @ _rotation(rng.uniform(0, 2 * np.pi)).T + rng.normal(size=2) * 5
            a = refine_bgd(WaypointPath(pts), init)
            b = refine_bgd(WaypointPath(moved), init)
            assert_allclose(a.allocation.fractions, b.allocation.fractions, atol=1e-4)

    def test_single_segment(self):
        res = refine_bgd(WaypointPath([[0, 0], [1, 0]]), TimeAllocation([2.0]))
        assert res.converged and res.allocation.durations[0] == 2.0

    def test_unpacks_as_triple(self):
        alloc, cost, log = refine_bgd(SYMMETRIC, TimeAllocation([1.0, 1.0]))
        assert alloc.total_time == pytest.approx(2.0) and cost >= 0 and log

    def test_max_iters(self):
        path = WaypointPath([[0, 0], [1, 0], [1, 3], [5, 2]])
        res = refine_bgd(path, TimeAllocation([3.0, 0.5, 0.5]), BgdConfig(max_iters=2))
        assert len(res.log) <= 3
        assert res.reason in ("max iterations", "relative tolerance", "gradient tolerance")

    def test_invalid_config(self):
        with pytest.raises(ValueError):
            BgdConfig(shrink=1.0)
        with pytest.raises(ValueError):
            BgdConfig(armijo_c=0.0)
        with pytest.raises(ValueError):
            BgdConfig(t_min=0.0)

    def test_log_export(self, tmp_path):
        res = refine_bgd(SYMMETRIC, TimeAllocation([2.0, 1.0]))
        out = write_iteration_log(res.log, tmp_path / "log.csv")
        rows = list(csv.reader(out.open()))
        assert rows[0] == ["iter", "cost", "step_size", "grad_norm"]
        assert len(rows) == len(res.log) + 1
        assert float(rows[-1][1]) == res.cost


def _sampled_limits(path, alloc):
    traj, _ = solve_min_snap(path, alloc)
    times = np.concatenate(
        [b + np.linspace(0, d, 50) for b, d in zip(traj.boundaries[:-1], alloc.durations)]
    )
    v = np.linalg.norm(sample(traj, np.minimum(times, traj.total_time), 1), axis=1).max()
    a = np.linalg.norm(sample(traj, np.minimum(times, traj.total_time), 2), axis=1).max()
    return v, a


class TestScaleTotalTime:
    def test_sweep_oracle(self, rng):
        lim = TvpLimits()
        for _ in range(3):
            path = WaypointPath(random_path(rng, 5))
            alloc = tvp_allocate(path)
            eta, scaled = scale_total_time(path, alloc, lim)
            sweep = np.geomspace(0.2, 5.0, 4000)
            feasible = [
                e for e in sweep
                if (lambda va: va[0] <= lim.v_max and va[1] <= lim.a_max)(_sampled_limits(path, alloc.scaled(e)))
            ]
            assert eta == pytest.approx(min(feasible), rel=2e-3)
            assert_allclose(scaled.durations, eta * alloc.durations)

    def test_limits_respected_and_binding(self, rng):
        lim = TvpLimits()
        for _ in range(5):
            path = WaypointPath(random_path(rng, int(rng.integers(3, 8))))
            _, scaled = scale_total_time(path, tvp_allocate(path), lim)
            v, a = _sampled_limits(path, scaled)
            assert v <= lim.v_max * (1 + 1e-9) and a <= lim.a_max * (1 + 1e-9)
            assert v >= lim.v_max / (1 + 5e-3) or a >= lim.a_max / (1 + 5e-3)

    def test_fixed_point(self, rng):
        path = WaypointPath(random_path(rng, 4))
        _, at_limit = scale_total_time(path, tvp_allocate(path))
        eta, _ = scale_total_time(path, at_limit)
        assert eta == pytest.approx(1.0, rel=1e-3)

    def test_speed_inverse_in_eta(self, rng):
        path = WaypointPath(random_path(rng, 4))
        alloc = tvp_allocate(path)
        v1, a1 = _sampled_limits(path, alloc)
        v2, a2 = _sampled_limits(path, alloc.scaled(2.0))
        assert v2 == pytest.approx(v1 / 2, rel=1e-9)
        assert a2 == pytest.approx(a1 / 4, rel=1e-9)

    def test_bracket_failure(self, rng):
        path = WaypointPath(random_path(rng, 4))
        with pytest.raises(BracketFailureError):
            scale_total_time(path, tvp_allocate(path).scaled(0.01))


def test_fraction_grid():
    g = fraction_grid(3, 0.25)
    assert g.shape == (3, 3)
    assert_allclose(g.sum(axis=1), 1.0)
    assert g.min() > 0
    assert fraction_grid(3, 0.01).shape[0] == math.comb(99, 2)
