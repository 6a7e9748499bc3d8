"""Minimum-snap trajectory generation with learned time allocation.

The QP core lives in :mod:`snapalloc.trajopt`, allocation heuristics and the
descent refinement in :mod:`snapalloc.timealloc`, datasets in
:mod:`snapalloc.dataprep`, the learned models in :mod:`snapalloc.seqmodel`
and evaluation in :mod:`snapalloc.evalkit`.
"""

__version__ = "0.1.0"

from .kernels import BACKEND
from .trajopt import BoundaryConfig, PiecewiseTrajectory, TimeAllocation, WaypointPath, solve_min_snap
from .timealloc import BgdConfig, TvpLimits, refine_bgd, scale_total_time, tvp_allocate

__all__ = [
    "__version__",
    "BACKEND",
    "BoundaryConfig",
    "PiecewiseTrajectory",
    "TimeAllocation",
    "WaypointPath",
    "solve_min_snap",
    "BgdConfig",
    "TvpLimits",
    "refine_bgd",
    "scale_total_time",
    "tvp_allocate",
]
