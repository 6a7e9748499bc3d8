"""Backend selection for the hot numerical kernels.

The compiled extension is used when it imports; otherwise the numpy
implementation takes over. Set ``SNAPALLOC_PURE_PYTHON=1`` to force the
fallback (used by the benchmark and the backend-agreement tests).
"""

from __future__ import annotations

import os

from . import _pykernels

BACKEND = "python"
_impl = _pykernels

if os.environ.get("SNAPALLOC_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _compiled
    except ImportError:  # extension not built
        pass
    else:
        _impl = _compiled
        BACKEND = "cython"

solve_kkt = _impl.solve_kkt
sample_max_norms = _impl.sample_max_norms
batch_costs = _impl.batch_costs

__all__ = ["BACKEND", "solve_kkt", "sample_max_norms", "batch_costs"]
