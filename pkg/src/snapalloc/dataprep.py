"""Range-angle encoding, curve collocation, synthetic curves and dataset labelling."""

from __future__ import annotations

import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.interpolate import CubicSpline

from .errors import DegenerateSegmentError, DimensionError, DuplicateOutputError, SnapAllocError
from .timealloc import BgdConfig, TvpLimits, refine_bgd, tvp_allocate
from .trajopt import BoundaryConfig, WaypointPath


@dataclass(frozen=True)
class RangeAngleSequence:
    """Transform-invariant encoding of a waypoint path.

    ``ranges`` are segment lengths divided by ``scale`` (the longest segment),
    ``angles[i]`` is the signed turn from segment ``i-1`` to segment ``i`` with
    ``angles[0] = 0``.
    """

    ranges: NDArray[np.float64]
    angles: NDArray[np.float64]
    scale: float = 1.0

    def __post_init__(self):
        r = np.array(self.ranges, dtype=np.float64).reshape(-1)
        a = np.array(self.angles, dtype=np.float64).reshape(-1)
        if r.shape != a.shape or r.size == 0:
            raise DimensionError("ranges and angles must be non-empty and of equal length")
        if np.any(r <= 0) or np.any(r > 1.0):
            raise ValueError("ranges must lie in (0, 1]")
        if a[0] != 0.0 or np.any(a <= -math.pi) or np.any(a > math.pi):
            raise ValueError("angles must start at 0 and lie in (-pi, pi]")
        if not self.scale > 0:
            raise ValueError("scale must be positive")
        r.setflags(write=False)
        a.setflags(write=False)
        object.__setattr__(self, "ranges", r)
        object.__setattr__(self, "angles", a)

    def __len__(self) -> int:
        return self.ranges.shape[0]

    def features(self) -> NDArray[np.float64]:
        """``(m, 2)`` array of ``(range, angle)`` rows."""
        return np.column_stack([self.ranges, self.angles])


def _segment_vectors(points: NDArray[np.float64]) -> NDArray[np.float64]:
    v = np.diff(points, axis=0)
    if np.any(np.linalg.norm(v, axis=1) == 0):
        raise DegenerateSegmentError("zero-length segment")
    return v


def to_range_angle(path: WaypointPath | ArrayLike) -> RangeAngleSequence:
    pts = path.points if isinstance(path, WaypointPath) else np.asarray(path, dtype=np.float64)
    v = _segment_vectors(pts)
    d = np.linalg.norm(v, axis=1)
    s = float(d.max())
    cross = v[:-1, 0] * v[1:, 1] - v[:-1, 1] * v[1:, 0]
    dot = np.einsum("ij,ij->i", v[:-1], v[1:])
    theta = np.arctan2(cross, dot)
    theta[theta <= -math.pi] = math.pi  # atan2(-0.0, negative) gives -pi
    return RangeAngleSequence(d / s, np.concatenate([[0.0], theta]), s)


def initial_pose(path: WaypointPath | ArrayLike) -> tuple[NDArray[np.float64], float]:
    """Start point and heading of the first segment: what the encoding drops."""
    pts = path.points if isinstance(path, WaypointPath) else np.asarray(path, dtype=np.float64)
    v = pts[1] - pts[0]
    return pts[0].copy(), float(math.atan2(v[1], v[0]))


def from_range_angle(seq: RangeAngleSequence, start: ArrayLike = (0.0, 0.0), heading: float = 0.0) -> WaypointPath:
    phi = heading + np.cumsum(seq.angles)
    d = seq.ranges * seq.scale
    steps = np.column_stack([d * np.cos(phi), d * np.sin(phi)])
    pts = np.vstack([np.asarray(start, dtype=np.float64), steps])
    return WaypointPath(np.cumsum(pts, axis=0))


# ---------------------------------------------------------------- curves

@dataclass(frozen=True)
class Curve:
    id: str
    points: NDArray[np.float64]

    def __post_init__(self):
        p = np.array(self.points, dtype=np.float64)
        if p.ndim != 2 or p.shape[1] != 2:
            raise DimensionError(f"curve {self.id!r}: points must have shape (k, 2)")
        if p.shape[0] < 2 or not np.any(np.abs(np.diff(p, axis=0)) > 0):
            raise DegenerateSegmentError(f"curve {self.id!r} needs at least 2 distinct points")
        p.setflags(write=False)
        object.__setattr__(self, "points", p)


def read_curves_jsonl(path: str | Path) -> list[Curve]:
    """One curve per line: ``{"id": str, "points": [[x, y], ...]}``."""
    out = []
    with Path(path).open() as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                out.append(Curve(str(rec["id"]), rec["points"]))
            except (KeyError, TypeError, json.JSONDecodeError) as exc:
                raise ValueError(f"{path}:{lineno}: malformed curve record ({exc})") from exc
    return out


def write_curves_jsonl(curves: Iterable[Curve], path: str | Path) -> Path:
    path = Path(path)
    with path.open("w") as fh:
        for c in curves:
            fh.write(json.dumps({"id": c.id, "points": c.points.tolist()}, separators=(",", ":")) + "\n")
    return path


def collocate(curve: Curve | ArrayLike, n: int) -> WaypointPath:
    """Resample a polyline to ``n`` points equally spaced in arc length.

    Endpoints are kept exactly. Consecutive duplicate input points are
    merged first.
    """
    pts = curve.points if isinstance(curve, Curve) else np.asarray(curve, dtype=np.float64)
    if n < 2:
        raise ValueError(f"n must be >= 2, got {n}")
    keep = np.concatenate([[True], np.any(np.diff(pts, axis=0) != 0, axis=1)])
    pts = pts[keep]
    seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    L = s[-1]
    if not L > 0:
        raise DegenerateSegmentError("curve has zero arc length")
    targets = np.linspace(0.0, L, n)
    out = np.column_stack([np.interp(targets, s, pts[:, 0]), np.interp(targets, s, pts[:, 1])])
    out[0], out[-1] = pts[0], pts[-1]
    chords = np.linalg.norm(np.diff(out, axis=0), axis=1)
    if np.any(chords <= 1e-9 * L):
        raise DuplicateOutputError(f"collocation to n={n} produced coincident consecutive points")
    return WaypointPath(out)


@dataclass(frozen=True)
class SynthConfig:
    """Seeded synthetic curve family.

    Curves are either cubic splines through random knots or open Lissajous
    arcs, sized to roughly ``extent`` meters so that trapezoidal and
    triangular velocity profiles both occur.
    """

    seed: int = 0
    extent: float = 20.0
    min_knots: int = 4
    max_knots: int = 8
    lissajous_share: float = 0.3
    resolution: int = 400
    check_n: int = 30


def _spline_curve(rng: np.random.Generator, cfg: SynthConfig) -> NDArray[np.float64]:
    k = int(rng.integers(cfg.min_knots, cfg.max_knots + 1))
    # a random walk keeps consecutive knots apart and the curve mostly forward-moving
    heading = rng.uniform(-math.pi, math.pi)
    turns = np.concatenate([[heading], rng.normal(0.0, 1.0, size=k - 2)])
    steps = rng.uniform(0.4, 1.0, size=k - 1)
    phi = np.cumsum(turns)
    knots = np.vstack([[0.0, 0.0], np.cumsum(np.column_stack([steps * np.cos(phi), steps * np.sin(phi)]), axis=0)])
    u = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(knots, axis=0), axis=1))])
    spline = CubicSpline(u, knots, axis=0)
    return spline(np.linspace(0.0, u[-1], cfg.resolution))


def _lissajous_curve(rng: np.random.Generator, cfg: SynthConfig) -> NDArray[np.float64]:
    a, b = rng.integers(1, 4, size=2)
    delta = rng.uniform(0, math.pi)
    span = rng.uniform(0.4, 0.9) * 2 * math.pi  # open arc: never closes on itself
    t = rng.uniform(0, 2 * math.pi) + np.linspace(0.0, span, cfg.resolution)
    aspect = rng.uniform(0.5, 1.5)
    return np.column_stack([np.sin(a * t + delta), aspect * np.sin(b * t)])


def _acceptable(points: NDArray[np.float64], check_n: int) -> bool:
    extent = points.max(axis=0) - points.min(axis=0)
    if np.any(extent <= 1e-3 * extent.max()):
        return False
    try:
        for n in (2, 3, check_n):
            to_range_angle(collocate(points, n))
    except SnapAllocError:
        return False
    return True


def synth_curves(config: SynthConfig, count: int) -> list[Curve]:
    """``count`` curves; curve ``i`` depends only on ``(config, i)``."""
    out = []
    for i in range(count):
        rng = np.random.default_rng([config.seed, i])
        while True:
            lissajous = rng.random() < config.lissajous_share
            pts = _lissajous_curve(rng, config) if lissajous else _spline_curve(rng, config)
            span = np.ptp(pts, axis=0).max()
            pts = (pts - pts.mean(axis=0)) * (config.extent * rng.uniform(0.5, 1.5) / span)
            if _acceptable(pts, config.check_n):
                break
        out.append(Curve(f"syn{config.seed}-{i:06d}", pts))
    return out


# ---------------------------------------------------------------- dataset

@dataclass(frozen=True)
class LabeledSample:
    id: str
    n: int
    range_angle: RangeAngleSequence
    fractions: NDArray[np.float64]
    converged: bool = True

    def __post_init__(self):
        f = np.array(self.fractions, dtype=np.float64)
        if f.shape != (len(self.range_angle),) or self.n != f.shape[0] + 1:
            raise DimensionError("fractions must have one entry per segment and n = segments + 1")
        f.setflags(write=False)
        object.__setattr__(self, "fractions", f)

    def to_json(self) -> str:
        rec = {
            "id": self.id,
            "n": self.n,
            "d": self.range_angle.ranges.tolist(),
            "theta": self.range_angle.angles.tolist(),
            "fractions": self.fractions.tolist(),
            "converged": bool(self.converged),
            "scale": self.range_angle.scale,
        }
        return json.dumps(rec, separators=(",", ":"))

    @classmethod
    def from_json(cls, line: str) -> "LabeledSample":
        rec = json.loads(line)
        ra = RangeAngleSequence(rec["d"], rec["theta"], float(rec.get("scale", 1.0)))
        return cls(str(rec["id"]), int(rec["n"]), ra, rec["fractions"], bool(rec["converged"]))


@dataclass
class DatasetResult:
    samples: list[LabeledSample]
    rejected: list[tuple[str, int, str]] = field(default_factory=list)


def label_path(
    path: WaypointPath,
    limits: TvpLimits = TvpLimits(),
    cfg: BgdConfig = BgdConfig(),
    bc: BoundaryConfig = BoundaryConfig(),
):
    """TVP initialisation refined by BGD; returns the :class:`BgdResult`."""
    return refine_bgd(path, tvp_allocate(path, limits), cfg, bc)


def _label_job(job):
    curve_id, points, n, limits, cfg, bc = job
    try:
        path = collocate(points, n)
        seq = to_range_angle(path)
        res = label_path(path, limits, cfg, bc)
    except SnapAllocError as exc:
        return None, (curve_id, n, f"{type(exc).__name__}: {exc}")
    return LabeledSample(curve_id, n, seq, res.allocation.fractions, res.converged), None


def build_dataset(
    curves: Sequence[Curve],
    n_range: Iterable[int],
    limits: TvpLimits = TvpLimits(),
    cfg: BgdConfig = BgdConfig(),
    bc: BoundaryConfig = BoundaryConfig(),
    workers: int = 1,
) -> DatasetResult:
    """Label every (curve, n) pair. Output order is (curve order, n) regardless of ``workers``."""
    ns = sorted(set(int(n) for n in n_range))
    if not ns or ns[0] < 2:
        raise ValueError("n_range must contain values >= 2")
    jobs = [(c.id, c.points, n, limits, cfg, bc) for c in curves for n in ns]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(_label_job, jobs, chunksize=max(1, len(jobs) // (8 * workers))))
    else:
        results = [_label_job(j) for j in jobs]
    out = DatasetResult([])
    for sample, reject in results:
        if sample is not None:
            out.samples.append(sample)
        else:
            out.rejected.append(reject)
    return out


def write_dataset_jsonl(samples: Iterable[LabeledSample], path: str | Path) -> Path:
    path = Path(path)
    with path.open("w") as fh:
        for s in samples:
            fh.write(s.to_json() + "\n")
    return path


def read_dataset_jsonl(path: str | Path, converged_only: bool = False) -> list[LabeledSample]:
    out = []
    with Path(path).open() as fh:
        for line in fh:
            if line.strip():
                s = LabeledSample.from_json(line)
                if s.converged or not converged_only:
                    out.append(s)
    return out


def split_by_curve(
    samples: Sequence[LabeledSample], ratio: int = 5, seed: int = 0
) -> tuple[list[LabeledSample], list[LabeledSample]]:
    """Train/validation split at ``ratio``:1 over curve ids."""
    ids = sorted({s.id for s in samples})
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(ids))
    n_val = int(round(len(ids) / (ratio + 1)))
    if len(ids) >= 2:
        n_val = min(max(n_val, 1), len(ids) - 1)
    val_ids = {ids[i] for i in order[:n_val]}
    train = [s for s in samples if s.id not in val_ids]
    val = [s for s in samples if s.id in val_ids]
    return train, val


def subset_by_curve(samples: Sequence[LabeledSample], fraction: float, seed: int = 0) -> list[LabeledSample]:
    """Samples of a random ``fraction`` of the curves (at least one curve)."""
    if not 0 < fraction <= 1:
        raise ValueError("fraction must lie in (0, 1]")
    ids = sorted({s.id for s in samples})
    if fraction == 1:
        return list(samples)
    k = max(1, int(round(fraction * len(ids))))
    chosen = {ids[i] for i in np.random.default_rng(seed).permutation(len(ids))[:k]}
    return [s for s in samples if s.id in chosen]


__all__ = [
    "RangeAngleSequence",
    "to_range_angle",
    "from_range_angle",
    "initial_pose",
    "Curve",
    "read_curves_jsonl",
    "write_curves_jsonl",
    "collocate",
    "SynthConfig",
    "synth_curves",
    "LabeledSample",
    "DatasetResult",
    "label_path",
    "build_dataset",
    "write_dataset_jsonl",
    "read_dataset_jsonl",
    "split_by_curve",
    "subset_by_curve",
]
