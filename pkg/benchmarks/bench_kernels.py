"""Compare the compiled and pure-Python kernel backends.

Run:  python benchmarks/bench_kernels.py [--repeat 5] [--json out.json]

Both backends are imported directly, so the environment variable that forces
the fallback is not needed here. Each row reports the best-of-``repeat`` mean
time per call and the speed-up of the compiled backend.
"""

from __future__ import annotations

import argparse
import json
import platform
import sys
import timeit

import numpy as np

from snapalloc import _pykernels

try:
    from snapalloc import _kernels
except ImportError:  # pragma: no cover
    _kernels = None

ORDER, CONTINUITY, FIX_ACCEL = 7, 4, True


def _instance(rng, m):
    pts = np.cumsum(rng.normal(size=(m + 1, 2)), axis=0)
    t = rng.uniform(0.5, 2.0, m)
    return np.ascontiguousarray(pts), np.ascontiguousarray(t)


def _cases(rng):
    for m in (2, 5, 11, 29):
        pts, t = _instance(rng, m)
        yield f"solve_kkt m={m}", lambda k, p=pts, t=t: k.solve_kkt(p, t, CONTINUITY, FIX_ACCEL, ORDER)
    for m, rows in ((5, 11), (11, 23)):
        pts, t = _instance(rng, m)
        batch = np.ascontiguousarray(t * rng.uniform(0.9, 1.1, (rows, m)))
        yield f"batch_costs m={m} x{rows}", lambda k, p=pts, b=batch: k.batch_costs(p, b, CONTINUITY, FIX_ACCEL, ORDER)
    pts, t = _instance(rng, 11)
    coeffs, *_ = _pykernels.solve_kkt(pts, t, CONTINUITY, FIX_ACCEL, ORDER)
    coeffs = np.ascontiguousarray(coeffs)
    yield "sample_max_norms m=11", lambda k, c=coeffs, t=t: k.sample_max_norms(c, t, 50, 2)


def _time(fn, repeat):
    number = 1
    while timeit.timeit(fn, number=number) < 0.05:
        number *= 2
    return min(timeit.repeat(fn, number=number, repeat=repeat)) / number


def run(repeat: int = 5, seed: int = 0) -> list[dict]:
    rng = np.random.default_rng(seed)
    rows = []
    for name, call in _cases(rng):
        py = _time(lambda: call(_pykernels), repeat)
        row = {"case": name, "python_us": py * 1e6}
        if _kernels is not None:
            cy = _time(lambda: call(_kernels), repeat)
            row.update(cython_us=cy * 1e6, speedup=py / cy)
        rows.append(row)
    return rows


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--json", help="also write results to this file")
    args = ap.parse_args(argv)
    rows = run(args.repeat, args.seed)
    print(f"python {platform.python_version()}, numpy {np.__version__}, compiled backend: {'yes' if _kernels else 'no'}")
    print(f"{'case':<26}{'python (us)':>14}{'cython (us)':>14}{'speed-up':>10}")
    for r in rows:
        cy = f"{r['cython_us']:14.1f}{r['speedup']:9.1f}x" if "cython_us" in r else f"{'-':>14}{'-':>10}"
        print(f"{r['case']:<26}{r['python_us']:14.1f}{cy}")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump({"machine": platform.machine(), "rows": rows}, fh, indent=2)
    return 0


if __name__ == "__main__":
    sys.exit(main())
