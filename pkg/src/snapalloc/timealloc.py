"""Time allocation: trapezoidal initialisation, BGD refinement, total-time scaling."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np
from numpy.typing import NDArray

from .errors import BracketFailureError, DegenerateSegmentError, SolverSingularError
from . import kernels
from .trajopt import (
    DEFAULT_ORDER,
    PIVOT_RATIO_SAFE,
    BoundaryConfig,
    TimeAllocation,
    WaypointPath,
    max_derivative_norms,
    solve_min_snap,
)


@dataclass(frozen=True)
class TvpLimits:
    """Speed (m/s) and acceleration (m/s^2) limits."""

    v_max: float = 5.0
    a_max: float = 2.5

    def __post_init__(self):
        if not (self.v_max > 0 and self.a_max > 0):
            raise ValueError("v_max and a_max must be positive")


# the feasibility search uses the same pair of limits
FeasibilityLimits = TvpLimits


@dataclass(frozen=True)
class BgdConfig:
    """Backtracking gradient descent settings.

    ``h``, ``t_min`` and ``initial_step`` are fractions of the total time so
    the descent is invariant to time scaling.
    """

    h: float = 1e-4
    armijo_c: float = 1e-4
    shrink: float = 0.5
    max_iters: int = 100
    max_shrinks: int = 20
    rel_tol: float = 1e-6
    grad_tol: float = 1e-10
    t_min: float = 1e-3
    initial_step: float = 0.05
    max_step: float = 0.25

    def __post_init__(self):
        if not 0 < self.shrink < 1:
            raise ValueError("shrink must lie in (0, 1)")
        if not 0 < self.armijo_c < 1:
            raise ValueError("armijo_c must lie in (0, 1)")
        if self.t_min <= 0 or self.h <= 0:
            raise ValueError("t_min and h must be positive")


class DirectionalGradient(NamedTuple):
    values: NDArray[np.float64]
    skipped: list[int]
    one_sided: list[int]


@dataclass
class IterRecord:
    iter: int
    cost: float
    step_size: float
    grad_norm: float


@dataclass
class BgdResult:
    allocation: TimeAllocation
    cost: float
    log: list[IterRecord] = field(default_factory=list)
    converged: bool = False
    reason: str = ""

    def __iter__(self):
        # unpack as (allocation, cost, log)
        return iter((self.allocation, self.cost, self.log))


def tvp_allocate(path: WaypointPath, limits: TvpLimits = TvpLimits()) -> TimeAllocation:
    """Rest-to-rest trapezoidal (or triangular) velocity profile per segment."""
    if not isinstance(path, WaypointPath):
        path = WaypointPath(path)
    d = path.segment_lengths()
    if np.any(d <= 0):
        raise DegenerateSegmentError(f"zero-length segment at index {int(np.argmin(d))}")
    v, a = limits.v_max, limits.a_max
    trapezoid = d >= v * v / a
    t = np.where(trapezoid, d / v + v / a, 2.0 * np.sqrt(d / a))
    return TimeAllocation(t)


def _costs(path: WaypointPath, durations: NDArray[np.float64], bc: BoundaryConfig) -> NDArray[np.float64]:
    # one kernel call for a batch of allocations; anything the kernel flags
    # goes through the full solver with its condition check and fallback
    durations = np.ascontiguousarray(np.atleast_2d(durations), dtype=np.float64)
    if np.any(durations <= 0):
        raise ValueError("durations must be positive")
    costs, ratios, infos = kernels.batch_costs(path.points, durations, bc.continuity, bc.fix_accel, DEFAULT_ORDER)
    bad = (infos != 0) | ~(ratios >= PIVOT_RATIO_SAFE) | ~np.isfinite(costs)
    for i in np.nonzero(bad)[0]:
        costs[i] = solve_min_snap(path, TimeAllocation(durations[i]), bc)[1]
    return np.maximum(costs, 0.0)


def _cost(path, t, bc):
    return float(_costs(path, t, bc)[0])


def constrained_gradient(
    path: WaypointPath,
    alloc: TimeAllocation,
    bc: BoundaryConfig = BoundaryConfig(),
    h: float | None = None,
    t_min: float | None = None,
) -> DirectionalGradient:
    """Directional derivatives of the snap cost along sum-preserving directions.

    Direction ``i`` is ``e_i - (1/(m-1)) sum_{j != i} e_j``. Central
    differences with step ``h`` (default ``1e-4 T``); a side that would push
    a duration below ``t_min`` (default ``1e-3 T``) is replaced by a one-sided
    difference, and a direction with both sides infeasible is skipped.
    """
    m = alloc.durations.shape[0]
    if m < 2:
        return DirectionalGradient(np.zeros(0), [], [])
    t = alloc.durations
    T = alloc.total_time
    h = 1e-4 * T if h is None else h
    t_min = 1e-3 * T if t_min is None else t_min
    out = np.zeros(m)
    skipped: list[int] = []
    one_sided: list[int] = []
    rows: list[NDArray[np.float64]] = []
    plan: list[tuple[int, int, int]] = []  # (direction, index of plus row or -1, index of minus row or -1)
    for i in range(m):
        g = np.full(m, -1.0 / (m - 1))
        g[i] = 1.0
        plus, minus = t + h * g, t - h * g
        ok_p, ok_m = plus.min() >= t_min, minus.min() >= t_min
        if not (ok_p or ok_m):
            skipped.append(i)
            continue
        ip = im = -1
        if ok_p:
            ip = len(rows)
            rows.append(plus)
        if ok_m:
            im = len(rows)
            rows.append(minus)
        if not (ok_p and ok_m):
            one_sided.append(i)
        plan.append((i, ip, im))
    if one_sided:
        rows.append(t)
    costs = _costs(path, np.array(rows), bc) if rows else np.zeros(0)
    base = costs[-1] if one_sided else None
    for i, ip, im in plan:
        if ip >= 0 and im >= 0:
            out[i] = (costs[ip] - costs[im]) / (2 * h)
        elif ip >= 0:
            out[i] = (costs[ip] - base) / h
        else:
            out[i] = (base - costs[im]) / h
    return DirectionalGradient(out, skipped, one_sided)


def project_capped_simplex(x: NDArray[np.float64], total: float, lower: float) -> NDArray[np.float64]:
    """Euclidean projection onto ``{t : sum t = total, t >= lower}``."""
    m = x.shape[0]
    if total < m * lower:
        raise ValueError("infeasible projection: total below m * lower")
    # shift so the problem becomes projection onto a scaled probability simplex
    y = x - lower
    z = total - m * lower
    u = np.sort(y)[::-1]
    css = np.cumsum(u) - z
    idx = np.arange(1, m + 1)
    rho = np.nonzero(u - css / idx > 0)[0][-1]
    theta = css[rho] / (rho + 1)
    out = np.maximum(y - theta, 0.0) + lower
    # restore the exact sum lost to rounding on the free coordinates
    free = out > lower
    out[free] += (total - out.sum()) / free.sum()
    return out


def refine_bgd(
    path: WaypointPath,
    init: TimeAllocation,
    cfg: BgdConfig = BgdConfig(),
    bc: BoundaryConfig = BoundaryConfig(),
) -> BgdResult:
    """Projected backtracking gradient descent on durations with fixed total time.

    Accepted steps satisfy the Armijo condition measured along the projected
    step. Stops when the relative cost decrease falls below ``cfg.rel_tol``,
    when the tangent gradient vanishes, or after ``cfg.max_iters``. If every
    shrink of an iteration fails, the current iterate is returned with
    ``converged=False``.
    """
    if not isinstance(path, WaypointPath):
        path = WaypointPath(path)
    T = init.total_time
    m = init.durations.shape[0]
    t_min = cfg.t_min * T
    h = cfg.h * T
    t = np.array(init.durations)
    cost = _cost(path, t, bc)
    log = [IterRecord(0, cost, 0.0, float("nan"))]
    if m < 2:
        return BgdResult(TimeAllocation(t), cost, log, True, "single segment")

    step = cfg.initial_step * T
    for it in range(1, cfg.max_iters + 1):
        grad = constrained_gradient(path, TimeAllocation(t), bc, h=h, t_min=t_min)
        tangent = (m - 1) / m * grad.values  # projection of the full gradient onto sum(dt) = 0
        gnorm = float(np.linalg.norm(tangent))
        log[-1].grad_norm = gnorm
        if gnorm * T <= cfg.grad_tol * cost:
            return BgdResult(TimeAllocation(t), cost, log, True, "gradient tolerance")
        direction = -tangent
        alpha = step / np.abs(direction).max()
        accepted = False
        for _ in range(cfg.max_shrinks):
            trial = project_capped_simplex(t + alpha * direction, T, t_min)
            delta = trial - t
            if not np.any(delta):
                break
            try:
                trial_cost = _cost(path, trial, bc)
            except SolverSingularError:
                alpha *= cfg.shrink
                continue
            if trial_cost <= cost + cfg.armijo_c * float(tangent @ delta):
                accepted = True
                break
            alpha *= cfg.shrink
        if not accepted:
            return BgdResult(TimeAllocation(t), cost, log, False, "line search failed")
        moved = float(np.abs(delta).max())
        decrease = (cost - trial_cost) / cost if cost > 0 else 0.0
        t, cost = trial, trial_cost
        log.append(IterRecord(it, cost, moved, float("nan")))
        step = min(2.0 * moved, cfg.max_step * T)
        if decrease < cfg.rel_tol:
            return BgdResult(TimeAllocation(t), cost, log, True, "relative tolerance")
    return BgdResult(TimeAllocation(t), cost, log, True, "max iterations")


def write_iteration_log(log: list[IterRecord], path: str | Path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iter", "cost", "step_size", "grad_norm"])
        for r in log:
            w.writerow([r.iter, repr(r.cost), repr(r.step_size), repr(r.grad_norm)])
    return path


def _feasible(path, alloc, eta, limits, bc, samples):
    traj, _ = solve_min_snap(path, alloc.scaled(eta), bc)
    v, a = max_derivative_norms(traj, samples)
    return v <= limits.v_max and a <= limits.a_max


def scale_total_time(
    path: WaypointPath,
    alloc: TimeAllocation,
    limits: FeasibilityLimits = FeasibilityLimits(),
    bc: BoundaryConfig = BoundaryConfig(),
    samples: int = 50,
    rel_tol: float = 1e-3,
    eta_max: float = 10.0,
) -> tuple[float, TimeAllocation]:
    """Smallest time scale ``eta`` whose trajectory respects the limits.

    Feasibility is checked on ``samples`` points per segment; the bracket is
    expanded upward to ``eta_max`` (failing with
    :class:`BracketFailureError`) or downward by halving, then bisected to
    ``rel_tol``.
    """
    if not isinstance(path, WaypointPath):
        path = WaypointPath(path)
    feasible = lambda eta: _feasible(path, alloc, eta, limits, bc, samples)  # noqa: E731
    if feasible(1.0):
        hi, lo = 1.0, 0.5
        while feasible(lo):
            hi, lo = lo, lo / 2
            if lo < 1e-9:
                raise BracketFailureError("trajectory feasible at every tested scale")
    else:
        lo, hi = 1.0, 2.0
        while not feasible(hi):
            if hi >= eta_max:
                raise BracketFailureError(f"infeasible even at eta={eta_max}")
            lo, hi = hi, min(2 * hi, eta_max)
    while (hi - lo) > rel_tol * hi:
        mid = 0.5 * (lo + hi)
        if feasible(mid):
            hi = mid
        else:
            lo = mid
    return hi, alloc.scaled(hi)


def cost_at_fractions(path: WaypointPath, fractions, total_time: float, bc: BoundaryConfig = BoundaryConfig()) -> float:
    return solve_min_snap(path, TimeAllocation.from_fractions(fractions, total_time), bc)[1]


def fraction_grid(m: int, resolution: float) -> NDArray[np.float64]:
    """All fraction vectors on the simplex with entries in multiples of ``resolution``, all > 0."""
    n = int(round(1.0 / resolution))
    out = []

    def rec(prefix, remaining, slots):
        if slots == 1:
            if remaining > 0:
                out.append(prefix + [remaining])
            return
        for k in range(1, remaining - slots + 2):
            rec(prefix + [k], remaining - k, slots - 1)

    rec([], n, m)
    return np.array(out, dtype=np.float64) / n


__all__ = [
    "TvpLimits",
    "FeasibilityLimits",
    "BgdConfig",
    "BgdResult",
    "IterRecord",
    "DirectionalGradient",
    "tvp_allocate",
    "constrained_gradient",
    "project_capped_simplex",
    "refine_bgd",
    "scale_total_time",
    "write_iteration_log",
    "cost_at_fractions",
    "fraction_grid",
]

