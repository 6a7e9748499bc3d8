# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels for the minimum-snap QP and trajectory sampling.

The pure-numpy twin lives in ``_pykernels.py``; both expose the same
functions with the same signatures and must agree to rounding.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport fabs, sqrt, pow
from scipy.linalg.cython_lapack cimport dgbtrf, dgbtrs, dgbcon

cnp.import_array()


cdef inline double _falling(int j, int d) noexcept nogil:
    # j! / (j - d)!
    cdef double out = 1.0
    cdef int i
    if j < d:
        return 0.0
    for i in range(j - d + 1, j + 1):
        out *= i
    return out


cdef inline void _put(double* AB, double* colsum, int ldab, int bw, int i, int j,
                      double v) noexcept nogil:
    # LAPACK band storage (column-major) with room for the LU fill-in
    AB[j * ldab + 2 * bw + i - j] += v
    colsum[j] += fabs(v)


cdef void _constraint(double* AB, double* colsum, int ldab, int bw, int row,
                      int* cols, double* vals, int count,
                      double* B, int n, int dim, const double[:, ::1] waypoints,
                      int wp) noexcept:
    # symmetric constraint row scaled to unit max; wp < 0 means zero rhs
    cdef int i, ax
    cdef double mx = 0.0
    for i in range(count):
        if fabs(vals[i]) > mx:
            mx = fabs(vals[i])
    for i in range(count):
        _put(AB, colsum, ldab, bw, row, cols[i], vals[i] / mx)
        _put(AB, colsum, ldab, bw, cols[i], row, vals[i] / mx)
    if wp >= 0:
        for ax in range(dim):
            B[ax * n + row] = waypoints[wp, ax] / mx


cdef double _hessian(double* H, int nc1) noexcept:
    # normalised snap Gram matrix of s**j on [0, 1]; returns its max entry
    cdef int j, l
    cdef double hmax = 0.0
    for j in range(nc1 * nc1):
        H[j] = 0.0
    for j in range(4, nc1):
        for l in range(4, nc1):
            H[j * nc1 + l] = _falling(j, 4) * _falling(l, 4) / (j + l - 7)
            if H[j * nc1 + l] > hmax:
                hmax = H[j * nc1 + l]
    return hmax


cdef int _factor_solve(const double[:, ::1] waypoints, const double* durations, int m,
                       int continuity, bint fix_accel, int order, double* AB, double* B,
                       double* colsum, int* varbase, double* vs, int* ipiv, int* rc,
                       double* rv, const double* H, double hmax, double* anorm,
                       double* pivot_ratio) noexcept:
    # assemble the KKT system in band storage, factor it and solve in place
    # (B holds the solution on return). Returns the LAPACK info code.
    cdef int dim = waypoints.shape[1]
    cdef int nc1 = order + 1
    cdef int nb = 2 if fix_accel else 1
    cdef int n = m * nc1 + 2 * m + continuity * (m - 1) + 2 * nb
    cdef int bw = max(order + 1, max(continuity + 3, nb + 3))
    cdef int ldab = 3 * bw + 1
    cdef int k, j, l, d, r, base, cnt, info = 0
    cdef double u, umin, umax
    cdef char trans = b"N"

    for j in range(ldab * n):
        AB[j] = 0.0
    for j in range(n * dim):
        B[j] = 0.0
    for j in range(n):
        colsum[j] = 0.0
    for k in range(m):
        vs[k] = pow(durations[k], 3.5)

    # layout: start bc rows | per segment: 2 position rows, coeffs, continuity rows | end bc rows
    r = nb
    for k in range(m):
        varbase[k] = r + 2
        r += 2 + nc1 + (continuity if k < m - 1 else 0)

    for k in range(m):
        base = varbase[k]
        for j in range(4, nc1):
            for l in range(4, nc1):
                _put(AB, colsum, ldab, bw, base + j, base + l, H[j * nc1 + l] / hmax)

    for d in range(1, nb + 1):
        rc[0] = varbase[0] + d
        rv[0] = _falling(d, d) * pow(durations[0], -d) * vs[0]
        _constraint(AB, colsum, ldab, bw, d - 1, rc, rv, 1, B, n, dim, waypoints, -1)
        cnt = 0
        for j in range(d, nc1):
            rc[cnt] = varbase[m - 1] + j
            rv[cnt] = _falling(j, d) * pow(durations[m - 1], -d) * vs[m - 1]
            cnt += 1
        _constraint(AB, colsum, ldab, bw, n - nb + d - 1, rc, rv, cnt, B, n, dim, waypoints, -1)

    for k in range(m):
        base = varbase[k]
        rc[0] = base
        rv[0] = vs[k]
        _constraint(AB, colsum, ldab, bw, base - 2, rc, rv, 1, B, n, dim, waypoints, k)
        for j in range(nc1):
            rc[j] = base + j
            rv[j] = vs[k]
        _constraint(AB, colsum, ldab, bw, base - 1, rc, rv, nc1, B, n, dim, waypoints, k + 1)
        if k < m - 1:
            for d in range(1, continuity + 1):
                cnt = 0
                for j in range(d, nc1):
                    rc[cnt] = base + j
                    rv[cnt] = _falling(j, d) * pow(durations[k], -d) * vs[k]
                    cnt += 1
                rc[cnt] = varbase[k + 1] + d
                rv[cnt] = -_falling(d, d) * pow(durations[k + 1], -d) * vs[k + 1]
                cnt += 1
                _constraint(AB, colsum, ldab, bw, base + nc1 + d - 1, rc, rv, cnt, B, n, dim, waypoints, -1)

    anorm[0] = 0.0
    for j in range(n):
        if colsum[j] > anorm[0]:
            anorm[0] = colsum[j]

    dgbtrf(&n, &n, &bw, &bw, AB, &ldab, ipiv, &info)
    if info != 0:
        pivot_ratio[0] = 0.0
        return info
    umin = fabs(AB[2 * bw])
    umax = umin
    for j in range(n):
        u = fabs(AB[j * ldab + 2 * bw])
        if u < umin:
            umin = u
        if u > umax:
            umax = u
    pivot_ratio[0] = umin / umax
    dgbtrs(&trans, &n, &bw, &bw, &dim, AB, &ldab, ipiv, B, &n, &info)
    return info


cdef double _cost(const double* B, int n, int dim, int m, int nc1, const int* varbase,
                  const double* H) noexcept:
    cdef double cost = 0.0, ci
    cdef int ax, k, j, l, base
    for ax in range(dim):
        for k in range(m):
            base = varbase[k]
            for j in range(4, nc1):
                ci = B[ax * n + base + j]
                for l in range(4, nc1):
                    cost += H[j * nc1 + l] * ci * B[ax * n + base + l]
    return cost


def _sizes(int m, int continuity, bint fix_accel, int order):
    nb = 2 if fix_accel else 1
    n = m * (order + 1) + 2 * m + continuity * (m - 1) + 2 * nb
    bw = max(order + 1, continuity + 3, nb + 3)
    return n, bw


def solve_kkt(const double[:, ::1] waypoints, const double[::1] durations, int continuity,
              bint fix_accel, int order, bint condition=False):
    """Assemble and solve the KKT system of the min-snap QP for every axis.

    Each segment is parametrised in normalised time s = t / tau_k with its
    unknowns scaled by tau_k**3.5, which makes every hessian block the same
    constant matrix; constraint rows are scaled to unit max. Unknowns and
    constraint rows are interleaved segment by segment so the KKT matrix is
    banded, and it is factored with banded LU.

    Returns ``(coeffs, cost, pivot_ratio, rcond, info)``. ``coeffs`` has
    shape ``(dim, m, order + 1)`` in local monomials; ``pivot_ratio`` is
    min/max of the U diagonal magnitudes (cheap singularity indicator) and
    ``rcond`` the LAPACK 1-norm reciprocal condition estimate, computed only
    when ``condition`` is true (NaN otherwise).
    """
    cdef int m = durations.shape[0]
    cdef int dim = waypoints.shape[1]
    cdef int nc1 = order + 1
    n_, bw_ = _sizes(m, continuity, fix_accel, order)
    cdef int n = n_, bw = bw_
    cdef int ldab = 3 * bw + 1
    cdef int k, j, info
    cdef double anorm, pivot_ratio, rcond = float("nan")

    AB_arr = np.empty((ldab, n), dtype=np.float64, order="F")
    B_arr = np.empty((n, dim), dtype=np.float64, order="F")
    cdef double[::1, :] AB = AB_arr
    cdef double[::1, :] B = B_arr
    cdef double[::1] colsum = np.empty(n, dtype=np.float64)
    cdef int[::1] varbase = np.empty(m, dtype=np.intc)
    cdef double[::1] vs = np.empty(m, dtype=np.float64)
    cdef int[::1] ipiv = np.empty(n, dtype=np.intc)
    cdef int[::1] rc = np.empty(2 * nc1, dtype=np.intc)
    cdef double[::1] rv = np.empty(2 * nc1, dtype=np.float64)
    cdef double[::1] H = np.empty(nc1 * nc1, dtype=np.float64)
    cdef double hmax = _hessian(&H[0], nc1)

    info = _factor_solve(waypoints, &durations[0], m, continuity, fix_accel, order, &AB[0, 0],
                         &B[0, 0], &colsum[0], &varbase[0], &vs[0], &ipiv[0], &rc[0], &rv[0],
                         &H[0], hmax, &anorm, &pivot_ratio)
    if info != 0:
        return None, float("nan"), 0.0, 0.0, info
    if condition:
        # AB still holds the LU factors: dgbtrs does not overwrite them
        iwork_arr = np.zeros(n, dtype=np.intc)
        work_arr = np.zeros(3 * n, dtype=np.float64)
        _gbcon(n, bw, AB, ldab, ipiv, anorm, &rcond, work_arr, iwork_arr)

    coeffs_arr = np.empty((dim, m, nc1), dtype=np.float64)
    cdef double[:, :, ::1] coeffs = coeffs_arr
    cdef int ax, base
    for ax in range(dim):
        for k in range(m):
            base = varbase[k]
            for j in range(nc1):
                coeffs[ax, k, j] = B[base + j, ax] * vs[k] * pow(durations[k], -j)
    cost = _cost(&B[0, 0], n, dim, m, nc1, &varbase[0], &H[0])
    return coeffs_arr, cost, pivot_ratio, rcond, info


def batch_costs(const double[:, ::1] waypoints, const double[:, ::1] durations, int continuity,
                bint fix_accel, int order):
    """Snap costs for many allocations of one path, reusing work buffers.

    ``durations`` has shape ``(batch, m)``. Returns ``(costs, pivot_ratios,
    infos)``; a nonzero info gives a NaN cost.
    """
    cdef int batch = durations.shape[0]
    cdef int m = durations.shape[1]
    cdef int dim = waypoints.shape[1]
    cdef int nc1 = order + 1
    n_, bw_ = _sizes(m, continuity, fix_accel, order)
    cdef int n = n_, bw = bw_
    cdef int ldab = 3 * bw + 1
    cdef int i, info
    cdef double anorm, pr

    cdef double[::1, :] AB = np.empty((ldab, n), dtype=np.float64, order="F")
    cdef double[::1, :] B = np.empty((n, dim), dtype=np.float64, order="F")
    cdef double[::1] colsum = np.empty(n, dtype=np.float64)
    cdef int[::1] varbase = np.empty(m, dtype=np.intc)
    cdef double[::1] vs = np.empty(m, dtype=np.float64)
    cdef int[::1] ipiv = np.empty(n, dtype=np.intc)
    cdef int[::1] rc = np.empty(2 * nc1, dtype=np.intc)
    cdef double[::1] rv = np.empty(2 * nc1, dtype=np.float64)
    cdef double[::1] H = np.empty(nc1 * nc1, dtype=np.float64)
    cdef double hmax = _hessian(&H[0], nc1)

    costs_arr = np.empty(batch, dtype=np.float64)
    ratios_arr = np.empty(batch, dtype=np.float64)
    infos_arr = np.empty(batch, dtype=np.intc)
    cdef double[::1] costs = costs_arr
    cdef double[::1] ratios = ratios_arr
    cdef int[::1] infos = infos_arr
    for i in range(batch):
        info = _factor_solve(waypoints, &durations[i, 0], m, continuity, fix_accel, order,
                             &AB[0, 0], &B[0, 0], &colsum[0], &varbase[0], &vs[0], &ipiv[0],
                             &rc[0], &rv[0], &H[0], hmax, &anorm, &pr)
        infos[i] = info
        ratios[i] = pr
        costs[i] = _cost(&B[0, 0], n, dim, m, nc1, &varbase[0], &H[0]) if info == 0 else float("nan")
    return costs_arr, ratios_arr, infos_arr


cdef void _gbcon(int n, int bw, double[::1, :] AB, int ldab, int[::1] ipiv, double anorm,
                 double* rcond, double[::1] work, int[::1] iwork):
    cdef char norm = b"1"
    cdef int info = 0
    dgbcon(&norm, &n, &bw, &bw, &AB[0, 0], &ldab, &ipiv[0], &anorm, rcond,
           &work[0], &iwork[0], &info)


def sample_max_norms(const double[:, :, ::1] coeffs, const double[::1] durations, int samples,
                     int max_deriv):
    """Maximum Euclidean norm of derivatives 1..max_deriv over sampled times.

    Each segment is sampled at ``samples`` evenly spaced local times
    including both ends. Returns an array of length ``max_deriv``.
    """
    cdef int dim = coeffs.shape[0]
    cdef int m = coeffs.shape[1]
    cdef int nc1 = coeffs.shape[2]
    cdef int k, i, j, d, ax
    cdef double tau, t, val, sq, tp
    out_arr = np.zeros(max_deriv, dtype=np.float64)
    cdef double[::1] out = out_arr
    for k in range(m):
        tau = durations[k]
        for i in range(samples):
            t = tau * i / (samples - 1) if samples > 1 else 0.0
            for d in range(1, max_deriv + 1):
                sq = 0.0
                for ax in range(dim):
                    val = 0.0
                    tp = 1.0
                    for j in range(d, nc1):
                        val += _falling(j, d) * coeffs[ax, k, j] * tp
                        tp *= t
                    sq += val * val
                sq = sqrt(sq)
                if sq > out[d - 1]:
                    out[d - 1] = sq
    return out_arr
