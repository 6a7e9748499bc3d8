"""Shared artifacts for the desk-scale acceptance experiments.

Datasets and the trained model are expensive (minutes), so they are cached
under ``$SNAPALLOC_ACCEPTANCE_CACHE`` (default ``<repo>/.acceptance_cache``)
with the experiment settings in the file names. Delete the directory to
rebuild from scratch.
"""

from __future__ import annotations

import hashlib
import json
import os
import time
from pathlib import Path

from snapalloc.dataprep import SynthConfig, build_dataset, read_dataset_jsonl, split_by_curve, synth_curves, write_dataset_jsonl
from snapalloc.seqmodel.checkpoint import load_model, save_model
from snapalloc.seqmodel.model import AllocationModel, ModelConfig
from snapalloc.seqmodel.train import TrainConfig, train, write_history_csv

ROOT = Path(__file__).resolve().parents[1]

TRAIN_SEED, TRAIN_CURVES = 2024, 540
TEST_SEED, TEST_CURVES = 2025, 60
N_RANGE = range(3, 13)
OOD_N = 16
MODEL_CONFIG = ModelConfig(embed_dim=32, num_heads=4, enc_layers=2, dec_layers=2, ffn_dim=128, max_seq_len=64)
TRAIN_CONFIG = TrainConfig(lr=1e-3, epochs=60, batch_size=32, seed=0, grad_clip=1.0)
MODEL_SEED = 0
TRAIN_BUDGET_S = 30 * 60


def cache_dir() -> Path:
    d = Path(os.environ.get("SNAPALLOC_ACCEPTANCE_CACHE", ROOT / ".acceptance_cache"))
    d.mkdir(parents=True, exist_ok=True)
    return d


def _tag(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:10]


def dataset(seed: int, curves: int, n_values) -> tuple[list, dict]:
    """Labelled samples for ``curves`` synthetic curves; returns (samples, build info)."""
    ns = sorted(n_values)
    key = _tag({"seed": seed, "curves": curves, "n": ns})
    path = cache_dir() / f"data_s{seed}_c{curves}_n{ns[0]}-{ns[-1]}_{key}.jsonl"
    info_path = path.with_suffix(".info.json")
    if not path.exists():
        t0 = time.perf_counter()
        res = build_dataset(synth_curves(SynthConfig(seed=seed), curves), ns)
        write_dataset_jsonl(res.samples, path)
        info_path.write_text(json.dumps({"seconds": time.perf_counter() - t0, "rejected": len(res.rejected)}))
    return read_dataset_jsonl(path), json.loads(info_path.read_text())


def train_set():
    return dataset(TRAIN_SEED, TRAIN_CURVES, N_RANGE)


def test_set():
    return dataset(TEST_SEED, TEST_CURVES, N_RANGE)


def ood_set():
    return dataset(TEST_SEED, TEST_CURVES, [OOD_N])


def trained_model(train_cfg: TrainConfig = TRAIN_CONFIG, fraction: float = 1.0, subset_seed: int = 0):
    """Transformer trained on the acceptance training set; returns (model, metadata)."""
    from snapalloc.dataprep import subset_by_curve

    samples, _ = train_set()
    key = _tag({"model": MODEL_CONFIG.to_dict(), "train": train_cfg.to_dict(), "seed": MODEL_SEED, "fraction": fraction, "subset": subset_seed, "data": len(samples)})
    stem = cache_dir() / f"model_p{round(fraction * 100):03d}_{key}"
    meta_path = stem.with_suffix(".meta.json")
    if not meta_path.exists():
        tr, va = split_by_curve(subset_by_curve(samples, fraction, subset_seed), 5, 0)
        model = AllocationModel(MODEL_CONFIG, MODEL_SEED)
        t0 = time.perf_counter()
        res = train(model, tr, va, train_cfg)
        seconds = time.perf_counter() - t0
        save_model(stem, model, train_cfg, None, {"seconds": seconds})
        write_history_csv(res.history, stem.with_suffix(".history.csv"))
        meta = {
            "seconds": seconds,
            "train_samples": len(tr),
            "val_samples": len(va),
            "best_epoch": res.best_epoch,
            "best_val": res.best_val,
            "diverged": res.diverged,
        }
        meta_path.write_text(json.dumps(meta, indent=2))
    model, _ = load_model(stem.with_suffix(".json"))
    return model, json.loads(meta_path.read_text())
