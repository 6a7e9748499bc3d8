"""Evaluation: normalised costs, relative errors against the descent baseline,
histograms, sample-efficiency sweeps, out-of-distribution runs and attention
summaries.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .dataprep import LabeledSample, from_range_angle, subset_by_curve
from .errors import DimensionError
from .seqmodel.mlp import MLPBank
from .seqmodel.model import AllocationModel, AttentionRecord, ModelConfig, decode_batch
from .seqmodel.train import TrainConfig, train
from .timealloc import BgdConfig, TvpLimits, refine_bgd, tvp_allocate
from .trajopt import BoundaryConfig, TimeAllocation, WaypointPath, solve_min_snap

METHODS = ("T", "MLP", "TVP")

# Full-scale figures reported for the original gesture datasets. They are
# stored alongside reports for comparison and are never asserted.
REFERENCE_RESULTS = {
    "E_T_mean": 15.7,
    "E_T_std": 14.6,
    "E_MLP_mean": 21.4,
    "E_MLP_std": 13.7,
    "E_TVP_mean": 50.7,
    "E_T_negative_percent": 10.7,
    "E_MLP_negative_percent": 3.1,
    "E_T_mean_ood_40": 42.7,
    "E_T_mean_10pct_data": 22.6,
}


def normalized_cost(J: float) -> float:
    """Seventh root of a snap cost."""
    if not J >= 0:
        raise ValueError(f"cost must be non-negative, got {J}")
    return float(J) ** (1.0 / 7.0)


def relative_error(J_method: float, J_baseline: float) -> float:
    """Percentage gap between normalised costs; negative when the method beats the baseline."""
    b = normalized_cost(J_baseline)
    if b == 0.0:
        raise ZeroDivisionError("baseline cost is zero")
    return 100.0 * (normalized_cost(J_method) - b) / b


# ---------------------------------------------------------------- reports

COLUMNS = ["sample_id", "N", "J_BGD", "J_T", "J_MLP", "J_TVP", "E_T", "E_MLP", "E_TVP"]


@dataclass
class CostRecord:
    sample_id: str
    N: int
    T: float
    J_BGD: float
    J_TVP: float
    J_T: float | None = None
    J_MLP: float | None = None

    def error(self, method: str) -> float | None:
        J = getattr(self, "J_" + method)
        return None if J is None else relative_error(J, self.J_BGD)

    def row(self) -> list:
        vals = [self.sample_id, self.N, self.J_BGD, self.J_T, self.J_MLP, self.J_TVP]
        vals += [self.error(m) for m in METHODS]
        return ["" if v is None else (repr(v) if isinstance(v, float) else v) for v in vals]


@dataclass
class CostReport:
    records: list[CostRecord]
    metadata: dict[str, Any] = field(default_factory=dict)

    def errors(self, method: str) -> NDArray[np.float64]:
        """Relative errors of one method over the samples where it is present."""
        vals = [r.error(method) for r in self.records]
        return np.array([v for v in vals if v is not None], dtype=np.float64)

    def aggregate(self) -> dict[str, dict[str, float] | None]:
        out: dict[str, dict[str, float] | None] = {}
        for m in METHODS:
            e = self.errors(m)
            if e.size == 0:
                out[m] = None
                continue
            out[m] = {
                "count": int(e.size),
                "mean": float(math.fsum(e) / e.size),
                "std": float(np.std(e)),
                "fraction_negative": float(np.count_nonzero(e < 0) / e.size),
            }
        return out

    def mean(self, method: str) -> float:
        agg = self.aggregate()[method]
        return float("nan") if agg is None else agg["mean"]

    def write_csv(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(COLUMNS)
            for r in self.records:
                w.writerow(r.row())
        return path

    def write_summary(self, path: str | Path) -> Path:
        path = Path(path)
        doc = {"aggregate": self.aggregate(), "metadata": self.metadata, "reference": REFERENCE_RESULTS}
        path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
        return path


def read_report_csv(path: str | Path) -> CostReport:
    records = []
    with Path(path).open(newline="") as fh:
        for row in csv.DictReader(fh):
            opt = lambda k: float(row[k]) if row[k] != "" else None  # noqa: E731
            records.append(
                CostRecord(row["sample_id"], int(row["N"]), float("nan"), float(row["J_BGD"]), float(row["J_TVP"]), opt("J_T"), opt("J_MLP"))
            )
    return CostReport(records)


# ---------------------------------------------------------------- evaluation protocol

@dataclass
class Baseline:
    """Per-sample quantities shared by every method: path, total time and reference costs."""

    sample: LabeledSample
    path: WaypointPath
    T: float
    bgd_fractions: NDArray[np.float64]
    J_BGD: float
    J_TVP: float


def sample_path(sample: LabeledSample) -> WaypointPath:
    """Waypoints rebuilt from a sample's encoding (start at the origin, heading along x)."""
    return from_range_angle(sample.range_angle)


def prepare_baselines(
    samples: Sequence[LabeledSample],
    limits: TvpLimits = TvpLimits(),
    cfg: BgdConfig = BgdConfig(),
    bc: BoundaryConfig = BoundaryConfig(),
    recompute: bool = False,
) -> list[Baseline]:
    """Total time from the trapezoidal profile and the descent baseline for each sample.

    The stored label is the descent result from the same start, so it is used
    directly unless ``recompute`` is set.
    """
    out = []
    for s in samples:
        path = sample_path(s)
        tvp = tvp_allocate(path, limits)
        T = tvp.total_time
        if recompute:
            fr = refine_bgd(path, tvp, cfg, bc).allocation.fractions
        else:
            fr = s.fractions
        J_BGD = _cost(path, fr, T, bc)
        J_TVP = _cost(path, tvp.fractions, T, bc)
        out.append(Baseline(s, path, T, np.asarray(fr), J_BGD, J_TVP))
    return out


def _cost(path: WaypointPath, fractions: ArrayLike, T: float, bc: BoundaryConfig) -> float:
    return solve_min_snap(path, TimeAllocation.from_fractions(fractions, T), bc)[1]


def predict_grouped(predict: Callable[[list[LabeledSample]], NDArray], samples: Sequence[LabeledSample]) -> list[NDArray]:
    """Run a batch predictor over equal-length groups and restore sample order."""
    out: list[NDArray | None] = [None] * len(samples)
    groups: dict[int, list[int]] = {}
    for i, s in enumerate(samples):
        groups.setdefault(len(s.range_angle), []).append(i)
    for m in sorted(groups):
        idx = groups[m]
        fr = predict([samples[i] for i in idx])
        for i, f in zip(idx, fr):
            out[i] = f
    return out  # type: ignore[return-value]


def model_fractions(model: AllocationModel, samples: Sequence[LabeledSample], batch_size: int = 256) -> list[NDArray]:
    def run(group):
        parts = []
        for i in range(0, len(group), batch_size):
            feats = np.stack([s.range_angle.features() for s in group[i:i + batch_size]])
            parts.append(decode_batch(model, feats))
        return np.concatenate(parts)

    return predict_grouped(run, samples)


def evaluate_methods(
    test: Sequence[LabeledSample] | Sequence[Baseline],
    model: AllocationModel | None = None,
    bank: MLPBank | None = None,
    limits: TvpLimits = TvpLimits(),
    cfg: BgdConfig = BgdConfig(),
    bc: BoundaryConfig = BoundaryConfig(),
    recompute_baseline: bool = False,
) -> CostReport:
    """Costs of every method at the same total time, with errors against the descent baseline.

    Methods without a predictor for a sample (no model, or no MLP for that
    waypoint count) are left absent rather than zero.
    """
    if test and isinstance(test[0], Baseline):
        base = list(test)  # type: ignore[arg-type]
    else:
        base = prepare_baselines(test, limits, cfg, bc, recompute_baseline)  # type: ignore[arg-type]
    samples = [b.sample for b in base]
    fr_T = model_fractions(model, samples) if model is not None else [None] * len(base)
    records = []
    for b, ft in zip(base, fr_T):
        rec = CostRecord(b.sample.id, b.sample.n, b.T, b.J_BGD, b.J_TVP)
        if ft is not None:
            rec.J_T = _cost(b.path, ft, b.T, bc)
        if bank is not None and bank.has(b.sample.n):
            rec.J_MLP = _cost(b.path, bank[b.sample.n].predict(b.sample.range_angle), b.T, bc)
        records.append(rec)
    return CostReport(records, {"samples": len(records)})


def ood_eval(
    model: AllocationModel,
    test: Sequence[LabeledSample] | Sequence[Baseline],
    trained_max_n: int,
    **kwargs,
) -> CostReport:
    """:func:`evaluate_methods` on waypoint counts beyond those seen in training."""
    samples = [t.sample if isinstance(t, Baseline) else t for t in test]
    small = [s.n for s in samples if s.n <= trained_max_n]
    if small:
        raise ValueError(f"out-of-distribution test set contains n={min(small)} <= trained maximum {trained_max_n}")
    too_long = [s.n for s in samples if s.n - 1 > model.config.max_seq_len]
    if too_long:
        raise DimensionError(f"n={max(too_long)} exceeds the model's maximum sequence length")
    report = evaluate_methods(test, model, **kwargs)
    report.metadata.update({"trained_max_n": trained_max_n, "test_n": sorted({s.n for s in samples})})
    return report


# ---------------------------------------------------------------- histograms

@dataclass
class Histogram:
    edges: NDArray[np.float64]
    counts: dict[str, NDArray[np.int64]]


def histogram(report: CostReport, bins: int = 30, methods: Sequence[str] = METHODS) -> Histogram:
    """Fixed-width bins spanning the smallest to largest error over ``methods``."""
    if not report.records:
        raise ValueError("empty report")
    data = {m: report.errors(m) for m in methods}
    data = {m: e for m, e in data.items() if e.size}
    allv = np.concatenate(list(data.values()))
    lo, hi = float(allv.min()), float(allv.max())
    if lo == hi:
        lo, hi = lo - 0.5, hi + 0.5
    edges = np.linspace(lo, hi, bins + 1)
    return Histogram(edges, {m: np.histogram(e, bins=edges)[0] for m, e in data.items()})


def histogram_export(report: CostReport, outdir: str | Path, bins: int = 30, stem: str = "error_histogram") -> tuple[Path, Path]:
    """Write bin counts as CSV and a bar chart as SVG."""
    h = histogram(report, bins)
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    csv_path = outdir / f"{stem}.csv"
    methods = list(h.counts)
    with csv_path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bin_lo", "bin_hi"] + [f"E_{m}" for m in methods])
        for i in range(len(h.edges) - 1):
            w.writerow([repr(float(h.edges[i])), repr(float(h.edges[i + 1]))] + [int(h.counts[m][i]) for m in methods])

    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(7, 4))
    width = np.diff(h.edges)
    for m in methods:
        ax.bar(h.edges[:-1], h.counts[m], width=width, align="edge", alpha=0.5, label=f"E_{m}")
    ax.axvline(0.0, color="k", lw=0.8)
    ax.set_xlabel("relative error in normalised cost (%)")
    ax.set_ylabel("samples")
    ax.legend()
    svg_path = outdir / f"{stem}.svg"
    _save(fig, svg_path)
    return csv_path, svg_path


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "snapalloc"
    return plt


def _save(fig, path: Path) -> None:
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    fig.clf()
    import matplotlib.pyplot as plt

    plt.close(fig)


# ---------------------------------------------------------------- sample efficiency

@dataclass
class SweepReport:
    points: list[tuple[float, float]]
    seeds: dict[str, int]
    histories: dict[float, list] = field(default_factory=dict)

    def write_csv(self, path: str | Path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["fraction", "mean_E_T", "train_samples"])
            for f, e in self.points:
                w.writerow([repr(f), repr(e), len(self.histories.get(f, []))])
        return path


def sample_efficiency_sweep(
    train_samples: Sequence[LabeledSample],
    val_samples: Sequence[LabeledSample],
    fractions: Sequence[float],
    model_config: ModelConfig,
    train_cfg: TrainConfig,
    test: Sequence[LabeledSample] | Sequence[Baseline],
    seed: int = 0,
    model_seed: int = 0,
) -> SweepReport:
    """Train one model per data fraction (subset drawn by curve) and record its mean error."""
    fractions = [float(f) for f in fractions]
    if len(fractions) < 3:
        raise ValueError("a sweep needs at least 3 fractions")
    if fractions != sorted(fractions) or not all(0 < f <= 1 for f in fractions):
        raise ValueError("fractions must be ascending and lie in (0, 1]")
    base = test if test and isinstance(test[0], Baseline) else prepare_baselines(test)  # type: ignore[arg-type]
    points = []
    histories = {}
    for f in fractions:
        sub = subset_by_curve(train_samples, f, seed)
        model = AllocationModel(model_config, model_seed)
        res = train(model, sub, val_samples, train_cfg)
        points.append((f, evaluate_methods(base, model).mean("T")))
        histories[f] = res.history
    return SweepReport(points, {"subset": seed, "model": model_seed, "train": train_cfg.seed}, histories)


# ---------------------------------------------------------------- attention

BAND_WIDTHS = (1, 2, 3)


def band_mask(rows: int, cols: int, k: int) -> NDArray[np.bool_]:
    i, j = np.indices((rows, cols))
    return np.abs(i - j) <= k


def band_mass(maps: NDArray, k: int) -> float:
    """Share of attention mass within ``|i - j| <= k`` for maps of shape ``(..., rows, cols)``."""
    maps = np.asarray(maps, dtype=np.float64)
    mask = band_mask(maps.shape[-2], maps.shape[-1], k)
    return float(maps[..., mask].sum() / maps.sum())


def uniform_band_mass(rows: int, cols: int, k: int) -> float:
    return float(band_mask(rows, cols, k).mean())


@dataclass
class AttentionSummary:
    # layer -> sequence length -> head- and sample-averaged cross-attention map
    mean_maps: dict[int, dict[int, NDArray[np.float64]]]
    # k -> (model band mass, uniform band mass), pooled over layers, rows and samples
    band: dict[int, tuple[float, float]]
    max_row_error: float


def attention_summary(records: Sequence[AttentionRecord]) -> AttentionSummary:
    """Average decoder-to-encoder attention and measure how much of it sits near the diagonal.

    Band masses are pooled by rows, so the uniform reference uses the same
    row weights as the model.
    """
    if not records:
        raise ValueError("need at least one attention record")
    sums: dict[int, dict[int, NDArray]] = {}
    counts: dict[int, dict[int, int]] = {}
    mass = {k: 0.0 for k in BAND_WIDTHS}
    uni = {k: 0.0 for k in BAND_WIDTHS}
    rows_total = 0.0
    row_err = 0.0
    for rec in records:
        row_err = max(row_err, rec.max_row_error())
        for layer, p in enumerate(rec.cross):
            p = np.asarray(p, dtype=np.float64)  # (B, H, rows, cols)
            B, _, r, c = p.shape
            avg = p.mean(axis=1)
            sums.setdefault(layer, {}).setdefault(r, np.zeros((r, c)))
            sums[layer][r] += avg.sum(axis=0)
            counts.setdefault(layer, {}).setdefault(r, 0)
            counts[layer][r] += B
            for k in BAND_WIDTHS:
                mask = band_mask(r, c, k)
                mass[k] += float(avg[:, mask].sum())
                uni[k] += B * mask.sum() / c
            rows_total += B * r
    means = {l: {r: s / counts[l][r] for r, s in d.items()} for l, d in sums.items()}
    band = {k: (mass[k] / rows_total, uni[k] / rows_total) for k in BAND_WIDTHS}
    return AttentionSummary(means, band, row_err)


def collect_attention(model: AllocationModel, samples: Sequence[LabeledSample], batch_size: int = 256) -> list[AttentionRecord]:
    """Attention records from autoregressive decoding, one per equal-length batch."""
    groups: dict[int, list[LabeledSample]] = {}
    for s in samples:
        groups.setdefault(len(s.range_angle), []).append(s)
    out = []
    for m in sorted(groups):
        g = groups[m]
        for i in range(0, len(g), batch_size):
            feats = np.stack([s.range_angle.features() for s in g[i:i + batch_size]])
            out.append(decode_batch(model, feats, return_attention=True)[1])
    return out


def attention_export(summary: AttentionSummary, outdir: str | Path, length: int | None = None) -> list[Path]:
    """Band statistics CSV plus a CSV and heat map per layer at one sequence length."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    written = []
    band_path = outdir / "attention_band.csv"
    with band_path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["k", "band_mass", "uniform_band_mass"])
        for k, (a, b) in sorted(summary.band.items()):
            w.writerow([k, repr(a), repr(b)])
    written.append(band_path)
    layers = sorted(summary.mean_maps)
    if length is None:
        length = max(summary.mean_maps[layers[0]])
    plt = _pyplot()
    for layer in layers:
        a = summary.mean_maps[layer].get(length)
        if a is None:
            continue
        p = outdir / f"attention_layer{layer}_m{length}.csv"
        with p.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step"] + [f"enc{j}" for j in range(a.shape[1])])
            for i, row in enumerate(a):
                w.writerow([i] + [repr(float(v)) for v in row])
        written.append(p)
        fig, ax = plt.subplots(figsize=(4.5, 4))
        im = ax.imshow(a, cmap="viridis", vmin=0.0, origin="upper")
        ax.set_xlabel("encoder position")
        ax.set_ylabel("decoder step")
        ax.set_title(f"layer {layer}, m = {length}")
        fig.colorbar(im, ax=ax)
        svg = outdir / f"attention_layer{layer}_m{length}.svg"
        _save(fig, svg)
        written.append(svg)
    return written


# ---------------------------------------------------------------- manifests

def file_sha256(path: str | Path) -> str:
    h = hashlib.sha256()
    with Path(path).open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_run_manifest(path: str | Path, seeds: dict[str, int], files: dict[str, str | Path], extra: dict | None = None) -> Path:
    """JSON record of seeds and the hashes of every input and output file."""
    path = Path(path)
    doc = {
        "seeds": seeds,
        "files": {k: {"path": str(v), "sha256": file_sha256(v)} for k, v in sorted(files.items()) if Path(v).is_file()},
        "reference": REFERENCE_RESULTS,
        **(extra or {}),
    }
    path.write_text(json.dumps(doc, indent=2, sort_keys=True, default=str) + "\n")
    return path


__all__ = [
    "REFERENCE_RESULTS",
    "normalized_cost",
    "relative_error",
    "CostRecord",
    "CostReport",
    "read_report_csv",
    "Baseline",
    "sample_path",
    "prepare_baselines",
    "model_fractions",
    "evaluate_methods",
    "ood_eval",
    "Histogram",
    "histogram",
    "histogram_export",
    "SweepReport",
    "sample_efficiency_sweep",
    "band_mass",
    "uniform_band_mass",
    "AttentionSummary",
    "attention_summary",
    "collect_attention",
    "attention_export",
    "file_sha256",
    "write_run_manifest",
]
