"""Minimum-snap piecewise polynomial trajectories for a fixed time allocation.

Each segment k is a polynomial of order ``n`` in *local* time
``t in [0, tau_k]``; the trajectory is obtained per axis from the
equality-constrained QP ``min a^T Q a  s.t.  A_eq a = b_eq``.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.typing import ArrayLike, NDArray

from . import kernels
from .errors import (
    DimensionError,
    InvalidAllocationError,
    OutOfRangeError,
    SolverSingularError,
)

DEFAULT_ORDER = 7
# below this reciprocal condition estimate the factorisation is not trusted
RCOND_FLOOR = 1e-15
# pivot ratios above this skip the (costlier) condition estimate
PIVOT_RATIO_SAFE = 1e-12
RESIDUAL_TOL = 1e-6


@dataclass(frozen=True)
class WaypointPath:
    """Ordered 2D waypoints, shape ``(M, 2)`` with ``M >= 2``."""

    points: NDArray[np.float64]

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[0] < 2 or pts.shape[1] < 1:
            raise DimensionError(f"waypoints must have shape (M>=2, D), got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise DimensionError("waypoints must be finite")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    @property
    def num_segments(self) -> int:
        return self.points.shape[0] - 1

    def segment_lengths(self) -> NDArray[np.float64]:
        return np.linalg.norm(np.diff(self.points, axis=0), axis=1)


@dataclass(frozen=True)
class TimeAllocation:
    """Positive per-segment durations; ``total_time`` is their sum."""

    durations: NDArray[np.float64]

    def __post_init__(self):
        d = np.array(self.durations, dtype=np.float64).reshape(-1)
        if d.size == 0:
            raise InvalidAllocationError("allocation needs at least one segment")
        if not np.all(np.isfinite(d)) or np.any(d <= 0):
            raise InvalidAllocationError(f"durations must be finite and > 0, got {d}")
        d.setflags(write=False)
        object.__setattr__(self, "durations", d)

    @property
    def total_time(self) -> float:
        return float(self.durations.sum())

    @property
    def fractions(self) -> NDArray[np.float64]:
        return self.durations / self.durations.sum()

    @classmethod
    def from_fractions(cls, fractions: ArrayLike, total_time: float) -> "TimeAllocation":
        f = np.asarray(fractions, dtype=np.float64)
        return cls(f / f.sum() * total_time)

    def scaled(self, factor: float) -> "TimeAllocation":
        return TimeAllocation(self.durations * factor)


@dataclass(frozen=True)
class BoundaryConfig:
    """Interior continuity order and endpoint acceleration handling.

    ``continuity`` is the highest derivative matched at interior waypoints
    (2 = velocity and acceleration, 3 adds jerk). Velocity is always zero at
    both ends; ``fix_accel`` additionally pins endpoint acceleration to zero.
    """

    continuity: int = 3
    fix_accel: bool = True

    def __post_init__(self):
        if self.continuity not in (2, 3):
            raise ValueError(f"continuity must be 2 or 3, got {self.continuity}")


@dataclass(frozen=True)
class QpSystem:
    """Per-axis QP data. ``b_eq`` has one column per axis."""

    hessian: NDArray[np.float64]
    a_eq: NDArray[np.float64] | None = None
    b_eq: NDArray[np.float64] | None = None


@dataclass(frozen=True)
class PiecewiseTrajectory:
    """Local-time polynomial segments.

    ``coeffs[axis, k, j]`` multiplies ``t**j`` on segment ``k`` where ``t`` is
    measured from the segment start.
    """

    coeffs: NDArray[np.float64]
    durations: NDArray[np.float64]
    order: int = DEFAULT_ORDER
    boundaries: NDArray[np.float64] = field(init=False, repr=False)

    def __post_init__(self):
        c = np.ascontiguousarray(self.coeffs, dtype=np.float64)
        d = np.ascontiguousarray(self.durations, dtype=np.float64)
        if c.ndim != 3 or c.shape[1] != d.shape[0] or c.shape[2] != self.order + 1:
            raise DimensionError(
                f"coeffs shape {c.shape} inconsistent with {d.shape[0]} segments of order {self.order}"
            )
        c.setflags(write=False)
        d.setflags(write=False)
        object.__setattr__(self, "coeffs", c)
        object.__setattr__(self, "durations", d)
        object.__setattr__(self, "boundaries", np.concatenate([[0.0], np.cumsum(d)]))

    @property
    def num_segments(self) -> int:
        return self.durations.shape[0]

    @property
    def total_time(self) -> float:
        return float(self.boundaries[-1])

    @property
    def dim(self) -> int:
        return self.coeffs.shape[0]

    def global_coefficients(self) -> NDArray[np.float64]:
        """Coefficients in global time, ``(dim, m, n+1)``.

        Segment ``k`` is then ``sum_j g[:, k, j] * t**j`` for
        ``t`` in ``[t_k, t_{k+1}]``.
        """
        n1 = self.order + 1
        out = np.zeros_like(self.coeffs)
        for k, t0 in enumerate(self.boundaries[:-1]):
            # p(t) = sum_j a_j (t - t0)^j expanded in powers of t
            T = np.zeros((n1, n1))
            for j in range(n1):
                for i in range(j + 1):
                    T[j, i] = math.comb(j, i) * (-t0) ** (j - i)
            out[:, k, :] = self.coeffs[:, k, :] @ T
        return out


def _check_alloc(path: WaypointPath, alloc: TimeAllocation) -> None:
    if alloc.durations.shape[0] != path.num_segments:
        raise DimensionError(
            f"{path.num_segments} segments but {alloc.durations.shape[0]} durations"
        )


def _falling(j: int, d: int) -> float:
    return float(math.perm(j, d)) if j >= d else 0.0


def build_snap_hessian(alloc: TimeAllocation, order: int = DEFAULT_ORDER) -> QpSystem:
    """Block-diagonal snap Gram matrix in local segment time.

    Entry ``(j, l)`` of block ``k`` is
    ``P(j,4) P(l,4) tau_k**(j+l-7) / (j+l-7)`` for ``j, l >= 4`` where
    ``P(j,d) = j!/(j-d)!``.
    """
    if order < 4:
        raise ValueError(f"order must be >= 4 for a snap objective, got {order}")
    if not isinstance(alloc, TimeAllocation):
        alloc = TimeAllocation(alloc)
    n1 = order + 1
    m = alloc.durations.shape[0]
    Q = np.zeros((m * n1, m * n1))
    for k, tau in enumerate(alloc.durations):
        for j in range(4, n1):
            for l in range(4, n1):
                p = j + l - 7
                Q[k * n1 + j, k * n1 + l] = _falling(j, 4) * _falling(l, 4) * tau**p / p
    return QpSystem(hessian=Q)


def build_equality_constraints(
    path: WaypointPath,
    alloc: TimeAllocation,
    bc: BoundaryConfig = BoundaryConfig(),
    order: int = DEFAULT_ORDER,
) -> QpSystem:
    """Equality constraints in the local monomial basis.

    Row blocks, in order: start/end position of every segment, derivative
    continuity 1..C at each interior waypoint, zero velocity at both ends,
    and (if ``bc.fix_accel``) zero acceleration at both ends.
    """
    _check_alloc(path, alloc)
    n1 = order + 1
    m = path.num_segments
    dim = path.points.shape[1]
    taus = alloc.durations
    rows: list[NDArray[np.float64]] = []
    rhs: list[NDArray[np.float64]] = []

    def deriv_row(k: int, d: int, at_end: bool) -> NDArray[np.float64]:
        r = np.zeros(m * n1)
        t = taus[k] if at_end else 0.0
        for j in range(d, n1):
            r[k * n1 + j] = _falling(j, d) * t ** (j - d)
        return r

    for k in range(m):
        rows.append(deriv_row(k, 0, False))
        rhs.append(path.points[k])
        rows.append(deriv_row(k, 0, True))
        rhs.append(path.points[k + 1])
    zero = np.zeros(dim)
    for k in range(m - 1):
        for d in range(1, bc.continuity + 1):
            rows.append(deriv_row(k, d, True) - deriv_row(k + 1, d, False))
            rhs.append(zero)
    for d in range(1, 3 if bc.fix_accel else 2):
        rows.append(deriv_row(0, d, False))
        rhs.append(zero)
        rows.append(deriv_row(m - 1, d, True))
        rhs.append(zero)
    return QpSystem(
        hessian=build_snap_hessian(alloc, order).hessian,
        a_eq=np.array(rows),
        b_eq=np.array(rhs),
    )


def _lstsq_fallback(path, alloc, bc, order):
    qp = build_equality_constraints(path, alloc, bc, order)
    nv = qp.hessian.shape[0]
    nc = qp.a_eq.shape[0]
    K = np.block([[qp.hessian, qp.a_eq.T], [qp.a_eq, np.zeros((nc, nc))]])
    rhs = np.vstack([np.zeros((nv, qp.b_eq.shape[1])), qp.b_eq])
    sol = np.linalg.lstsq(K, rhs, rcond=None)[0][:nv]
    m = path.num_segments
    coeffs = sol.T.reshape(qp.b_eq.shape[1], m, order + 1)
    cost = float(sum(sol[:, a] @ qp.hessian @ sol[:, a] for a in range(sol.shape[1])))
    resid = np.abs(qp.a_eq @ sol - qp.b_eq).max()
    return coeffs, cost, resid


def solve_min_snap(
    path: WaypointPath,
    alloc: TimeAllocation,
    bc: BoundaryConfig = BoundaryConfig(),
    order: int = DEFAULT_ORDER,
) -> tuple[PiecewiseTrajectory, float]:
    """Solve the min-snap QP for every axis; returns ``(trajectory, cost)``.

    ``cost`` is the snap integral summed over axes. Raises
    :class:`SolverSingularError` if the KKT system is numerically singular
    and the least-squares fallback cannot satisfy the constraints.
    """
    if not isinstance(path, WaypointPath):
        path = WaypointPath(path)
    if not isinstance(alloc, TimeAllocation):
        alloc = TimeAllocation(alloc)
    _check_alloc(path, alloc)
    if order < 4:
        raise ValueError(f"order must be >= 4, got {order}")
    args = (path.points, alloc.durations, bc.continuity, bc.fix_accel, order)
    coeffs, cost, pivot_ratio, rcond, info = kernels.solve_kkt(*args)
    if info == 0 and not pivot_ratio >= PIVOT_RATIO_SAFE:
        coeffs, cost, pivot_ratio, rcond, info = kernels.solve_kkt(*args, condition=True)
    else:
        rcond = float("inf") if info == 0 else 0.0
    if info != 0 or not (rcond >= RCOND_FLOOR) or not np.all(np.isfinite(coeffs)):
        warnings.warn(
            f"KKT system near-singular (rcond={rcond:.2e}); falling back to least squares",
            RuntimeWarning,
            stacklevel=2,
        )
        coeffs, cost, resid = _lstsq_fallback(path, alloc, bc, order)
        scale = max(1.0, float(np.abs(path.points).max()))
        if not np.isfinite(cost) or resid > RESIDUAL_TOL * scale:
            raise SolverSingularError(
                f"KKT solve failed, constraint residual {resid:.3e}", rcond
            )
    return PiecewiseTrajectory(coeffs, alloc.durations, order), max(float(cost), 0.0)


def _basis(t: NDArray[np.float64], order: int, deriv: int) -> NDArray[np.float64]:
    # rows: times, cols: d^deriv/dt^deriv of t**j
    j = np.arange(order + 1)
    f = np.array([_falling(int(i), deriv) for i in j])
    p = np.maximum(j - deriv, 0)
    return np.where(j >= deriv, f * t[:, None] ** p, 0.0)


def sample(traj: PiecewiseTrajectory, times: ArrayLike, deriv: int = 0) -> NDArray[np.float64]:
    """Vectorised :func:`evaluate`; returns shape ``(len(times), dim)``."""
    t = np.atleast_1d(np.asarray(times, dtype=np.float64))
    if deriv < 0 or deriv > traj.order:
        raise ValueError(f"deriv must be in [0, {traj.order}], got {deriv}")
    T = traj.total_time
    if np.any(t < 0.0) or np.any(t > T):
        raise OutOfRangeError(f"times must lie in [0, {T}]")
    # left-closed segments; the final one is right-closed
    seg = np.clip(np.searchsorted(traj.boundaries, t, side="right") - 1, 0, traj.num_segments - 1)
    local = t - traj.boundaries[seg]
    B = _basis(local, traj.order, deriv)
    return np.einsum("nj,anj->na", B, traj.coeffs[:, seg, :])


def evaluate(traj: PiecewiseTrajectory, t: float, deriv: int = 0) -> NDArray[np.float64]:
    """Value of the ``deriv``-th derivative at global time ``t``."""
    return sample(traj, [t], deriv)[0]


def snap_cost_quadrature(traj: PiecewiseTrajectory, nodes: int | None = None) -> float:
    """Snap integral by Gauss-Legendre quadrature on each segment.

    With ``order - 3`` or more nodes the rule is exact for the squared snap
    polynomial; the default uses ``max(8, order - 3)`` nodes.
    """
    if nodes is None:
        nodes = max(8, traj.order - 3)
    x, w = np.polynomial.legendre.leggauss(nodes)
    total = 0.0
    for k, tau in enumerate(traj.durations):
        t = 0.5 * tau * (x + 1.0)
        snap = _basis(t, traj.order, 4) @ traj.coeffs[:, k, :].T  # (nodes, dim)
        total += 0.5 * tau * float(w @ np.sum(snap**2, axis=1))
    return total


def max_derivative_norms(traj: PiecewiseTrajectory, samples_per_segment: int = 50) -> NDArray[np.float64]:
    """Sampled maxima of speed and acceleration magnitude."""
    return kernels.sample_max_norms(traj.coeffs, traj.durations, samples_per_segment, 2)


def export_csv(traj: PiecewiseTrajectory, path: str | Path, rate: float) -> Path:
    """Write ``t, x, y, vx, vy, ax, ay`` sampled at ``rate`` Hz (endpoint included)."""
    if rate <= 0:
        raise ValueError("rate must be positive")
    if traj.dim != 2:
        raise DimensionError("CSV export is defined for 2D trajectories")
    T = traj.total_time
    n = int(math.floor(T * rate + 1e-9)) + 1
    times = np.arange(n) / rate
    if times[-1] < T:
        times = np.append(times, T)
    times = np.minimum(times, T)
    pos, vel, acc = (sample(traj, times, d) for d in range(3))
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "x", "y", "vx", "vy", "ax", "ay"])
        for i, t in enumerate(times):
            w.writerow([repr(float(v)) for v in (t, *pos[i], *vel[i], *acc[i])])
    return path
