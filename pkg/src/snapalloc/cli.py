"""``snapalloc`` command line: gen-data, train, solve, eval and plot.

Exit codes: 0 on success, 1 for usage errors (bad flags, missing or
malformed inputs), 2 for failures while running.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from contextlib import nullcontext
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import __version__
from .errors import SnapAllocError

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit with status 2
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------- argument definitions

def _common(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("run options")
    g.add_argument("--config", type=Path, help="JSON file of option values; flags override it")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--threads", type=int, default=None, help="BLAS thread limit (1 for full determinism)")
    g.add_argument("--precision", choices=["float32", "float64"], default="float32")


def _limits(p: argparse.ArgumentParser) -> None:
    p.add_argument("--v-max", type=float, default=5.0)
    p.add_argument("--a-max", type=float, default=2.5)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="snapalloc", description="Minimum-snap trajectories with learned time allocation.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("gen-data", help="collocate curves and label them with descent allocations")
    _common(p)
    _limits(p)
    src = p.add_mutually_exclusive_group()
    src.add_argument("--synthetic", action="store_true", help="generate random curves")
    src.add_argument("--input", type=Path, help="curves JSONL ({id, points} per line)")
    p.add_argument("--curves", type=int, default=100, help="number of synthetic curves")
    p.add_argument("--n-min", type=int, default=3)
    p.add_argument("--n-max", type=int, default=12)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", type=Path, default=Path("dataset.jsonl"))

    p = sub.add_parser("train", help="train the transformer (and optionally the MLP bank)")
    _common(p)
    p.add_argument("--data", type=Path, required=False)
    p.add_argument("--out", type=Path, default=Path("model"), help="checkpoint stem")
    p.add_argument("--resume", type=Path, help="resumable checkpoint to continue")
    p.add_argument("--embed-dim", type=int, default=32)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--enc-layers", type=int, default=2)
    p.add_argument("--dec-layers", type=int, default=2)
    p.add_argument("--ffn-dim", type=int, default=128)
    p.add_argument("--max-seq-len", type=int, default=64)
    p.add_argument("--dropout", type=float, default=0.0)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--loss-variant", choices=["step", "cumsum"], default="step")
    p.add_argument("--grad-clip", type=float, default=1.0)
    p.add_argument("--max-steps", type=int, default=None)
    p.add_argument("--stop-after-epoch", type=int, default=None, help="checkpoint and stop early; continue with --resume")
    p.add_argument("--val-ratio", type=int, default=5, help="train:validation ratio over curves")
    p.add_argument("--mlp", action="store_true", help="also train one MLP per waypoint count")
    p.add_argument("--mlp-hidden", type=int, nargs="+", default=[64, 64])

    p = sub.add_parser("solve", help="allocate time and solve the trajectory for one path")
    _common(p)
    _limits(p)
    p.add_argument("--waypoints", type=Path, help="CSV of x,y rows or JSON {\"points\": [[x, y], ...]}")
    p.add_argument("--points", help="inline waypoints 'x,y;x,y;...'")
    p.add_argument("--method", choices=["tvp", "bgd", "model"], default="bgd")
    p.add_argument("--checkpoint", type=Path, help="model checkpoint (method=model)")
    p.add_argument("--total-time", type=float, help="total time; default is the trapezoidal-profile total")
    p.add_argument("--rate", type=float, default=50.0, help="trajectory sample rate in Hz")
    p.add_argument("--out", type=Path, default=Path("trajectory.csv"))
    p.add_argument("--plot", type=Path, help="SVG of the path and waypoints")

    p = sub.add_parser("eval", help="compare allocation methods on a test set")
    _common(p)
    _limits(p)
    p.add_argument("--test", type=Path, required=False, help="labelled test dataset JSONL")
    p.add_argument("--checkpoint", type=Path, required=False)
    p.add_argument("--mlp-checkpoint", type=Path)
    p.add_argument("--outdir", type=Path, default=Path("eval"))
    p.add_argument("--bins", type=int, default=30)
    p.add_argument("--recompute-baseline", action="store_true")
    p.add_argument("--ood-n", type=int, help="also evaluate at this waypoint count on the test curves")
    p.add_argument("--curves", type=Path, help="curves for --ood-n (default: the test set's curve file)")
    p.add_argument("--no-attention", action="store_true")

    p = sub.add_parser("plot", help="render an SVG from a report, history or trajectory CSV")
    _common(p)
    p.add_argument("input", type=Path)
    p.add_argument("--kind", choices=["histogram", "history", "trajectory"], required=True)
    p.add_argument("--bins", type=int, default=30)
    p.add_argument("--out", type=Path, required=True)
    return parser


def _subparser(parser: argparse.ArgumentParser, name: str) -> argparse.ArgumentParser:
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[name]
    raise KeyError(name)


def parse_args(argv: Sequence[str]) -> argparse.Namespace:
    """Parse flags on top of the optional ``--config`` JSON file."""
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config is None:
        return args
    if not args.config.is_file():
        raise UsageError(f"config file not found: {args.config}")
    try:
        values = json.loads(args.config.read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"{args.config}: invalid JSON ({exc})") from None
    if not isinstance(values, dict):
        raise UsageError(f"{args.config}: expected a JSON object")
    sub = _subparser(parser, args.command)
    known = {a.dest for a in sub._actions}
    values = {k.replace("-", "_"): v for k, v in values.items()}
    unknown = sorted(set(values) - known)
    if unknown:
        raise UsageError(f"{args.config}: unknown option(s) for {args.command}: {', '.join(unknown)}")
    for a in sub._actions:
        if a.dest in values and a.type is Path and values[a.dest] is not None:
            values[a.dest] = Path(values[a.dest])
        if a.dest in values:
            a.required = False
    sub.set_defaults(**values)
    return parser.parse_args(argv)


# ---------------------------------------------------------------- helpers

def _resolved(args: argparse.Namespace) -> dict[str, Any]:
    return {k: (str(v) if isinstance(v, Path) else v) for k, v in sorted(vars(args).items())}


def _write_manifest(path: Path, args: argparse.Namespace, outputs: dict[str, Path], extra: dict | None = None) -> Path:
    from .evalkit import file_sha256

    doc = {
        "snapalloc_version": __version__,
        "command": args.command,
        "config": _resolved(args),
        "outputs": {k: {"path": str(v), "sha256": file_sha256(v)} for k, v in sorted(outputs.items()) if Path(v).is_file()},
        **(extra or {}),
    }
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


def _manifest_path(out: Path) -> Path:
    return out.with_name(out.name + ".manifest.json")


def _need_file(path: Path | None, what: str) -> Path:
    if path is None:
        raise UsageError(f"{what} is required")
    if not Path(path).is_file():
        raise UsageError(f"{what} not found: {path}")
    return Path(path)


def _need_checkpoint(path: Path | None, what: str) -> Path:
    if path is None:
        raise UsageError(f"{what} is required")
    from .seqmodel.checkpoint import _paths

    mpath, bpath = _paths(path)
    if not mpath.is_file() or not bpath.is_file():
        raise UsageError(f"{what} not found: {mpath} / {bpath}")
    return mpath


def _thread_limit(n: int | None):
    if n is None:
        return nullcontext()
    if n < 1:
        raise UsageError("--threads must be >= 1")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def _tvp_limits(args):
    from .timealloc import TvpLimits

    return TvpLimits(args.v_max, args.a_max)


def _info(msg: str) -> None:
    print(msg, file=sys.stderr)


# ---------------------------------------------------------------- commands

def cmd_gen_data(args) -> int:
    from .dataprep import SynthConfig, build_dataset, read_curves_jsonl, synth_curves, write_curves_jsonl, write_dataset_jsonl

    if args.n_min < 2 or args.n_max < args.n_min:
        raise UsageError("need 2 <= --n-min <= --n-max")
    if args.input is not None:
        curves = read_curves_jsonl(_need_file(args.input, "input curves"))
    elif args.synthetic:
        if args.curves < 1:
            raise UsageError("--curves must be >= 1")
        curves = synth_curves(SynthConfig(seed=args.seed), args.curves)
    else:
        raise UsageError("give --synthetic or --input PATH")
    args.out.parent.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    res = build_dataset(curves, range(args.n_min, args.n_max + 1), _tvp_limits(args), workers=args.workers)
    write_dataset_jsonl(res.samples, args.out)
    curves_out = args.out.with_name(args.out.stem + ".curves.jsonl")
    write_curves_jsonl(curves, curves_out)
    stats = {
        "samples": len(res.samples),
        "converged": sum(s.converged for s in res.samples),
        "rejected": [list(r) for r in res.rejected],
        "curves": len(curves),
    }
    _write_manifest(_manifest_path(args.out), args, {"dataset": args.out, "curves": curves_out}, {"stats": stats})
    _info(f"wrote {len(res.samples)} samples ({len(res.rejected)} rejected) to {args.out} in {time.perf_counter() - t0:.1f}s")
    return EXIT_OK


def cmd_train(args) -> int:
    from .dataprep import read_dataset_jsonl, split_by_curve
    from .seqmodel.checkpoint import load_model, load_train_state, save_bank, save_model
    from .seqmodel.mlp import train_bank
    from .seqmodel.model import AllocationModel, ModelConfig
    from .seqmodel.train import TrainConfig, train, write_history_csv

    data_path = _need_file(args.data, "--data")
    samples = read_dataset_jsonl(data_path)
    if not samples:
        raise UsageError(f"{data_path}: dataset is empty")
    train_s, val_s = split_by_curve(samples, args.val_ratio, args.seed)
    mcfg = ModelConfig(
        embed_dim=args.embed_dim,
        num_heads=args.heads,
        enc_layers=args.enc_layers,
        dec_layers=args.dec_layers,
        ffn_dim=args.ffn_dim,
        max_seq_len=args.max_seq_len,
        dropout=args.dropout,
        precision=args.precision,
    )
    tcfg = TrainConfig(
        lr=args.lr,
        epochs=args.epochs,
        batch_size=args.batch_size,
        seed=args.seed,
        loss_variant=args.loss_variant,
        grad_clip=args.grad_clip if args.grad_clip and args.grad_clip > 0 else None,
        max_steps=args.max_steps,
    )
    if args.resume is not None:
        ck = _need_checkpoint(args.resume, "--resume checkpoint")
        state = load_train_state(ck, mcfg, tcfg)
        model, _ = load_model(ck)
    else:
        state = None
        model = AllocationModel(mcfg, seed=args.seed)
    t0 = time.perf_counter()
    res = train(model, train_s, val_s, tcfg, resume=state, stop_after_epoch=args.stop_after_epoch)
    elapsed = time.perf_counter() - t0
    meta = {
        "dataset": str(data_path),
        "train_samples": len(train_s),
        "train_n_range": [min(x.n for x in train_s), max(x.n for x in train_s)],
        "val_samples": len(val_s),
        "best_epoch": res.best_epoch,
        "best_val": res.best_val,
        "diverged": res.diverged,
        "seconds": elapsed,
    }
    ck_path = save_model(args.out, model, tcfg, res.state, meta)
    hist = write_history_csv(res.history, args.out.with_name(args.out.name + ".history.csv"))
    outputs = {"checkpoint": ck_path, "blob": ck_path.with_suffix(".bin"), "history": hist}
    if args.mlp:
        bank, _ = train_bank(train_s, val_s, tcfg, tuple(args.mlp_hidden), precision=args.precision)
        bank_path = save_bank(args.out.with_name(args.out.name + "_mlp"), bank, {"hidden": args.mlp_hidden})
        outputs["mlp_checkpoint"] = bank_path
    _write_manifest(_manifest_path(ck_path), args, outputs, {"training": meta})
    _info(f"trained {model.n_params()} parameters, best epoch {res.best_epoch} (val {res.best_val:.5g}) in {elapsed:.1f}s")
    if res.diverged:
        _info("training diverged; the checkpoint holds the best parameters before divergence")
        return EXIT_RUNTIME
    return EXIT_OK


def _read_waypoints(args) -> np.ndarray:
    if args.points is not None:
        try:
            return np.array([[float(v) for v in p.split(",")] for p in args.points.split(";") if p.strip()])
        except ValueError:
            raise UsageError("--points must look like 'x,y;x,y;...'") from None
    path = _need_file(args.waypoints, "--waypoints or --points")
    try:
        if path.suffix == ".json":
            doc = json.loads(path.read_text())
            return np.array(doc["points"] if isinstance(doc, dict) else doc, dtype=float)
        rows = [r for r in csv.reader(path.open()) if r and not r[0].lstrip().startswith("#")]
        try:
            float(rows[0][0])
        except ValueError:
            rows = rows[1:]  # header
        return np.array([[float(v) for v in r[:2]] for r in rows])
    except (ValueError, KeyError, IndexError, json.JSONDecodeError) as exc:
        raise UsageError(f"{path}: cannot read waypoints ({exc})") from None


def _plot_path(traj, points: np.ndarray, out: Path, title: str) -> Path:
    from .evalkit import _pyplot, _save
    from .trajopt import sample

    plt = _pyplot()
    t = np.linspace(0.0, traj.total_time, 400 * traj.num_segments)
    xy = sample(traj, t)
    fig, ax = plt.subplots(figsize=(5, 5))
    ax.plot(xy[:, 0], xy[:, 1], lw=1.5, label="trajectory")
    ax.plot(points[:, 0], points[:, 1], "o", ms=4, label="waypoints")
    ax.set_aspect("equal", adjustable="datalim")
    ax.set_title(title)
    ax.legend()
    out.parent.mkdir(parents=True, exist_ok=True)
    _save(fig, out)
    return out


def cmd_solve(args) -> int:
    from .dataprep import to_range_angle
    from .timealloc import refine_bgd, tvp_allocate
    from .trajopt import TimeAllocation, WaypointPath, export_csv, solve_min_snap

    pts = _read_waypoints(args)
    if pts.ndim != 2 or pts.shape[0] < 2 or pts.shape[1] != 2:
        raise UsageError(f"need at least two 2D waypoints, got shape {pts.shape}")
    if args.method == "model":
        ck = _need_checkpoint(args.checkpoint, "--checkpoint")
    path = WaypointPath(pts)
    tvp = tvp_allocate(path, _tvp_limits(args))
    T = args.total_time if args.total_time is not None else tvp.total_time
    if not T > 0:
        raise UsageError("--total-time must be positive")
    init = TimeAllocation.from_fractions(tvp.fractions, T)
    if args.method == "tvp":
        alloc = init
    elif args.method == "bgd":
        alloc = refine_bgd(path, init).allocation
    else:
        from .seqmodel.checkpoint import load_model
        from .seqmodel.model import decode_autoregressive

        model, _ = load_model(ck)
        alloc = TimeAllocation.from_fractions(decode_autoregressive(model, to_range_angle(path)), T)
    traj, cost = solve_min_snap(path, alloc)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    export_csv(traj, args.out, args.rate)
    outputs = {"trajectory": args.out}
    if args.plot is not None:
        outputs["plot"] = _plot_path(traj, pts, args.plot, f"{args.method}: J = {cost:.4g}")
    summary = {"method": args.method, "total_time": T, "durations": alloc.durations.tolist(), "cost": cost}
    _write_manifest(_manifest_path(args.out), args, outputs, {"result": summary})
    print(json.dumps(summary))
    return EXIT_OK


def cmd_eval(args) -> int:
    from .dataprep import build_dataset, read_curves_jsonl, read_dataset_jsonl
    from .evalkit import (
        attention_export,
        attention_summary,
        collect_attention,
        evaluate_methods,
        histogram_export,
        ood_eval,
        prepare_baselines,
    )
    from .seqmodel.checkpoint import load_bank, load_model

    test_path = _need_file(args.test, "--test")
    ck = _need_checkpoint(args.checkpoint, "--checkpoint")
    mlp_ck = _need_checkpoint(args.mlp_checkpoint, "--mlp-checkpoint") if args.mlp_checkpoint else None
    curves_path = None
    if args.ood_n is not None:
        curves_path = args.curves or test_path.with_name(test_path.stem + ".curves.jsonl")
        curves_path = _need_file(curves_path, "curves for --ood-n")
    samples = read_dataset_jsonl(test_path)
    if not samples:
        raise UsageError(f"{test_path}: test set is empty")
    model, manifest = load_model(ck)
    bank = load_bank(mlp_ck)[0] if mlp_ck else None
    limits = _tvp_limits(args)
    out = args.outdir
    out.mkdir(parents=True, exist_ok=True)

    base = prepare_baselines(samples, limits, recompute=args.recompute_baseline)
    report = evaluate_methods(base, model, bank, limits)
    report.metadata.update({"test": str(test_path), "checkpoint": str(ck)})
    outputs = {
        "report": report.write_csv(out / "cost_report.csv"),
        "summary": report.write_summary(out / "summary.json"),
    }
    hc, hs = histogram_export(report, out, args.bins)
    outputs.update(histogram_csv=hc, histogram_svg=hs)
    if not args.no_attention:
        summary = attention_summary(collect_attention(model, samples))
        for i, p in enumerate(attention_export(summary, out / "attention")):
            outputs[f"attention_{i}"] = p
    if args.ood_n is not None:
        n_range = manifest.get("training", {}).get("train_n_range")
        trained_max = n_range[1] if n_range else max(s.n for s in samples)
        if args.ood_n <= trained_max:
            raise UsageError(f"--ood-n must exceed the largest trained waypoint count ({trained_max})")
        curves = read_curves_jsonl(curves_path)
        ood_samples = build_dataset(curves, [args.ood_n], limits).samples
        ood = ood_eval(model, ood_samples, trained_max, limits=limits)
        ood.metadata["in_distribution_mean_E_T"] = report.mean("T")
        outputs["ood_report"] = ood.write_csv(out / f"cost_report_n{args.ood_n}.csv")
        outputs["ood_summary"] = ood.write_summary(out / f"summary_n{args.ood_n}.json")
        oc, os_ = histogram_export(ood, out, args.bins, stem=f"error_histogram_n{args.ood_n}")
        outputs.update(ood_histogram_csv=oc, ood_histogram_svg=os_)
    _write_manifest(out / "manifest.json", args, outputs, {"inputs": {"test": str(test_path), "checkpoint": str(ck)}})
    agg = report.aggregate()
    print(json.dumps({m: (None if a is None else round(a["mean"], 4)) for m, a in agg.items()}))
    return EXIT_OK


def cmd_plot(args) -> int:
    from .evalkit import _pyplot, _save, histogram_export, read_report_csv

    src = _need_file(args.input, "input")
    args.out.parent.mkdir(parents=True, exist_ok=True)
    if args.kind == "histogram":
        report = read_report_csv(src)
        if not report.records:
            raise UsageError(f"{src}: report is empty")
        _, svg = histogram_export(report, args.out.parent, args.bins, stem=args.out.stem)
        return EXIT_OK
    try:
        with src.open(newline="") as fh:
            rows = list(csv.DictReader(fh))
        cols = {k: np.array([float(r[k]) for r in rows]) for k in rows[0]}
    except (ValueError, KeyError, IndexError) as exc:
        raise UsageError(f"{src}: cannot read CSV ({exc})") from None
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(6, 4))
    if args.kind == "history":
        if "train_loss" not in cols:
            raise UsageError(f"{src}: not a loss history")
        ax.plot(cols["epoch"], cols["train_loss"], label="train")
        if np.any(np.isfinite(cols["val_loss"])):
            ax.plot(cols["epoch"], cols["val_loss"], label="validation")
        ax.set_xlabel("epoch")
        ax.set_ylabel("loss")
        ax.set_yscale("log")
    else:
        if "x" not in cols:
            raise UsageError(f"{src}: not a trajectory CSV")
        ax.plot(cols["x"], cols["y"])
        ax.set_aspect("equal", adjustable="datalim")
    ax.legend() if args.kind == "history" else None
    _save(fig, args.out)
    return EXIT_OK


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "solve": cmd_solve, "eval": cmd_eval, "plot": cmd_plot}


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parse_args(argv)
        with _thread_limit(args.threads):
            return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    except (SnapAllocError, RuntimeError, FloatingPointError, ValueError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
