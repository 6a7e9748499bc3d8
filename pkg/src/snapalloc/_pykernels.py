"""Pure-numpy implementations of the compiled kernels in ``_kernels.pyx``."""

from __future__ import annotations

from functools import lru_cache

import numpy as np
from scipy.linalg import lapack


def falling(j: int, d: int) -> float:
    """j! / (j - d)!, zero when j < d."""
    if j < d:
        return 0.0
    out = 1.0
    for i in range(j - d + 1, j + 1):
        out *= i
    return out


@lru_cache(maxsize=None)
def _falling_table(order: int) -> np.ndarray:
    # table[d, j] = j! / (j - d)!
    nc1 = order + 1
    return np.array([[falling(j, d) for j in range(nc1)] for d in range(nc1)])


@lru_cache(maxsize=None)
def normalised_hessian(order: int) -> np.ndarray:
    """Snap Gram matrix of monomials s**j on [0, 1]."""
    nc1 = order + 1
    H = np.zeros((nc1, nc1))
    for j in range(4, nc1):
        for l in range(4, nc1):
            H[j, l] = falling(j, 4) * falling(l, 4) / (j + l - 7)
    H.setflags(write=False)
    return H


def kkt_layout(m: int, continuity: int, fix_accel: bool, order: int):
    """Row/column indices of the interleaved KKT ordering.

    Returns ``(n, varbase, bw)``: system size, index of the first
    coefficient of each segment, and the half-bandwidth.
    """
    nc1 = order + 1
    nb = 2 if fix_accel else 1
    n = m * nc1 + 2 * m + continuity * (m - 1) + 2 * nb
    varbase = np.empty(m, dtype=int)
    r = nb
    for k in range(m):
        varbase[k] = r + 2
        r += 2 + nc1 + (continuity if k < m - 1 else 0)
    bw = max(order + 1, continuity + 3, nb + 3)
    return n, varbase, bw


def solve_kkt(waypoints, durations, continuity, fix_accel, order, condition=False):
    waypoints = np.ascontiguousarray(waypoints, dtype=np.float64)
    durations = np.ascontiguousarray(durations, dtype=np.float64)
    m = durations.shape[0]
    dim = waypoints.shape[1]
    nc1 = order + 1
    nb = 2 if fix_accel else 1
    n, varbase, bw = kkt_layout(m, continuity, fix_accel, order)
    H = normalised_hessian(order)
    F = _falling_table(order)
    # unknowns chat with c_k = tau_k**3.5 chat_k make every hessian block equal to H
    vs = durations**3.5

    rows: list[int] = []
    cols: list[int] = []
    vals: list[float] = []
    B = np.zeros((n, dim))

    def constraint(row, entries, rhs=None):
        # entries: list of (column, value); the row is scaled to unit max
        js = [j for j, _ in entries]
        v = np.array([x for _, x in entries])
        sc = 1.0 / np.abs(v).max()
        rows.extend([row] * len(js) + js)
        cols.extend(js + [row] * len(js))
        vals.extend(list(v * sc) * 2)
        if rhs is not None:
            B[row] = rhs * sc

    jj, ll = np.meshgrid(np.arange(4, nc1), np.arange(4, nc1), indexing="ij")
    Hs = (H[4:, 4:] / H.max()).ravel()
    for k in range(m):
        rows.extend((varbase[k] + jj).ravel())
        cols.extend((varbase[k] + ll).ravel())
        vals.extend(Hs)

    for d in range(1, nb + 1):
        constraint(d - 1, [(varbase[0] + d, F[d, d] * durations[0] ** -d * vs[0])])
        last = varbase[m - 1]
        constraint(
            n - nb + d - 1,
            [(last + j, F[d, j] * durations[m - 1] ** -d * vs[m - 1]) for j in range(d, nc1)],
        )

    for k in range(m):
        base = varbase[k]
        constraint(base - 2, [(base, vs[k])], waypoints[k])
        constraint(base - 1, [(base + j, vs[k]) for j in range(nc1)], waypoints[k + 1])
        if k < m - 1:
            for d in range(1, continuity + 1):
                entries = [(base + j, F[d, j] * durations[k] ** -d * vs[k]) for j in range(d, nc1)]
                entries.append((varbase[k + 1] + d, -F[d, d] * durations[k + 1] ** -d * vs[k + 1]))
                constraint(base + nc1 + d - 1, entries)

    rows_a = np.asarray(rows)
    cols_a = np.asarray(cols)
    vals_a = np.asarray(vals, dtype=np.float64)
    AB = np.zeros((3 * bw + 1, n), order="F")
    np.add.at(AB, (2 * bw + rows_a - cols_a, cols_a), vals_a)
    colsum = np.zeros(n)
    np.add.at(colsum, cols_a, np.abs(vals_a))
    anorm = colsum.max()

    lu, ipiv, info = lapack.dgbtrf(AB, bw, bw)
    if info != 0:
        return None, float("nan"), 0.0, 0.0, int(info)
    x, info = lapack.dgbtrs(lu, bw, bw, B, ipiv)
    udiag = np.abs(lu[2 * bw])
    pivot_ratio = float(udiag.min() / udiag.max())
    rcond = _rcond_estimate(lu, ipiv, bw, n, anorm) if condition else float("nan")

    chat = np.stack([x[varbase[k]:varbase[k] + nc1] for k in range(m)], axis=1).T  # (dim, m, nc1)
    cs = chat[:, :, 4:]
    cost = float(np.sum(np.einsum("akj,jl,akl->ak", cs, H[4:, 4:], cs)))
    coeffs = chat * vs[None, :, None] * durations[None, :, None] ** -np.arange(nc1)
    return np.ascontiguousarray(coeffs), cost, pivot_ratio, rcond, int(info)


def _rcond_estimate(lu, ipiv, bw, n, anorm):
    # Hager/Higham 1-norm estimate of the inverse through the LU factors
    from scipy.sparse.linalg import LinearOperator, onenormest

    def solve(v, trans):
        out, _ = lapack.dgbtrs(lu, bw, bw, np.asarray(v, dtype=np.float64).reshape(n, -1), ipiv, trans=trans)
        return out

    op = LinearOperator(
        (n, n),
        matvec=lambda v: solve(v, 0),
        rmatvec=lambda v: solve(v, 1),
        matmat=lambda V: solve(V, 0),
        rmatmat=lambda V: solve(V, 1),
        dtype=np.float64,
    )
    inv_norm = onenormest(op) if n > 1 else abs(solve(np.ones(1), 0)[0, 0])
    return float(1.0 / (anorm * inv_norm)) if inv_norm > 0 else 0.0


def sample_max_norms(coeffs, durations, samples, max_deriv):
    coeffs = np.asarray(coeffs, dtype=np.float64)
    durations = np.asarray(durations, dtype=np.float64)
    nc1 = coeffs.shape[2]
    F = _falling_table(nc1 - 1)
    u = np.linspace(0.0, 1.0, samples) if samples > 1 else np.zeros(1)
    t = durations[:, None] * u[None, :]  # (m, S)
    out = np.zeros(max_deriv)
    for d in range(1, max_deriv + 1):
        powers = np.arange(nc1) - d
        basis = np.where(
            powers[None, None, :] >= 0,
            t[:, :, None] ** np.maximum(powers, 0)[None, None, :],
            0.0,
        )  # (m, S, nc1)
        vals = np.einsum("mSj,amj->amS", basis * F[d][None, None, :], coeffs)
        out[d - 1] = np.sqrt((vals**2).sum(axis=0)).max()
    return out


def batch_costs(waypoints, durations, continuity, fix_accel, order):
    durations = np.atleast_2d(np.asarray(durations, dtype=np.float64))
    costs = np.empty(durations.shape[0])
    ratios = np.empty(durations.shape[0])
    infos = np.empty(durations.shape[0], dtype=np.intc)
    for i, d in enumerate(durations):
        _, costs[i], ratios[i], _, infos[i] = solve_kkt(waypoints, d, continuity, fix_accel, order)
    return costs, ratios, infos
