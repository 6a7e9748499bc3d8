"""Checkpoints: a JSON manifest plus a little-endian binary blob.

The manifest lists every array (model parameters, then optional training
state) with name, shape, dtype and byte offset; the blob holds the arrays
back to back in that order. ``<stem>.json`` and ``<stem>.bin`` sit side by
side.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any

import numpy as np
from numpy.typing import NDArray

from ..errors import ConfigMismatchError
from .mlp import FixedSizeMLP, MLPBank, MLPConfig
from .model import AllocationModel, ModelConfig
from .train import EpochRecord, TrainConfig, TrainState, config_hash

FORMAT = "snapalloc-checkpoint"
VERSION = 1


def _paths(path: str | Path) -> tuple[Path, Path]:
    p = Path(path)
    stem = p.with_suffix("") if p.suffix in (".json", ".bin") else p
    return stem.with_suffix(".json"), stem.with_suffix(".bin")


def _write(path, manifest: dict, arrays: list[tuple[str, NDArray]]) -> Path:
    mpath, bpath = _paths(path)
    mpath.parent.mkdir(parents=True, exist_ok=True)
    entries = []
    offset = 0
    with bpath.open("wb") as fh:
        for name, a in arrays:
            le = np.ascontiguousarray(a, dtype=a.dtype.newbyteorder("<"))
            fh.write(le.tobytes())
            entries.append({"name": name, "shape": list(a.shape), "dtype": a.dtype.name, "offset": offset})
            offset += le.nbytes
    manifest = {"format": FORMAT, "version": VERSION, **manifest, "arrays": entries, "blob": bpath.name, "blob_bytes": offset}
    mpath.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return mpath


def _read(path) -> tuple[dict, dict[str, NDArray]]:
    mpath, _ = _paths(path)
    manifest = json.loads(mpath.read_text())
    if manifest.get("format") != FORMAT:
        raise ValueError(f"{mpath}: not a checkpoint manifest")
    if "version" not in manifest:
        raise ValueError(f"{mpath}: manifest has no version field")
    if manifest["version"] > VERSION:
        raise ValueError(f"{mpath}: checkpoint version {manifest['version']} is newer than supported {VERSION}")
    raw = (mpath.parent / manifest["blob"]).read_bytes()
    if len(raw) != manifest["blob_bytes"]:
        raise ValueError(f"{mpath}: blob size {len(raw)} does not match manifest {manifest['blob_bytes']}")
    arrays = {}
    for e in manifest["arrays"]:
        dt = np.dtype(e["dtype"]).newbyteorder("<")
        count = int(np.prod(e["shape"], dtype=np.int64))
        a = np.frombuffer(raw, dtype=dt, count=count, offset=e["offset"]).reshape(e["shape"])
        arrays[e["name"]] = a.astype(dt.newbyteorder("="))
    return manifest, arrays


def _state_arrays(state: TrainState) -> list[tuple[str, NDArray]]:
    out = [(f"state.params.{k}", v) for k, v in state.params.items()]
    out += [(f"state.moments.{k}", v) for k, v in state.moments.items()]
    return out


def _state_meta(state: TrainState) -> dict:
    return {
        "epoch": state.epoch,
        "step": state.step,
        "best_epoch": state.best_epoch,
        "best_val": state.best_val,
        "history": [[r.epoch, r.train_loss, r.val_loss, r.lr] for r in state.history],
    }


def save_model(
    path: str | Path,
    model: AllocationModel,
    train_cfg: TrainConfig | None = None,
    state: TrainState | None = None,
    metadata: dict[str, Any] | None = None,
) -> Path:
    """Write a transformer checkpoint; ``state`` makes it resumable."""
    manifest: dict[str, Any] = {
        "kind": "transformer",
        "config": model.config.to_dict(),
        "precision": model.config.precision,
        "seed": model.seed,
        "parameter_names": list(model.params),
        "training": dict(metadata or {}),
    }
    if train_cfg is not None:
        manifest["train_config"] = train_cfg.to_dict()
        manifest["config_hash"] = config_hash(model.config.to_dict(), train_cfg)
    arrays = list(model.params.items())
    if state is not None:
        manifest["state"] = _state_meta(state)
        arrays += _state_arrays(state)
    return _write(path, manifest, arrays)


def load_model(path: str | Path) -> tuple[AllocationModel, dict]:
    manifest, arrays = _read(path)
    if manifest.get("kind") != "transformer":
        raise ValueError(f"expected a transformer checkpoint, got {manifest.get('kind')!r}")
    cfg = ModelConfig.from_dict(manifest["config"])
    params = {n: arrays[n] for n in manifest["parameter_names"]}
    return AllocationModel(cfg, manifest.get("seed", 0), params), manifest


def load_train_state(path: str | Path, model_config: ModelConfig, train_cfg: TrainConfig) -> TrainState:
    """Training state of a resumable checkpoint, refused unless the config hash matches."""
    manifest, arrays = _read(path)
    want = config_hash(model_config.to_dict(), train_cfg)
    have = manifest.get("config_hash")
    if have != want:
        raise ConfigMismatchError(
            f"checkpoint config hash {str(have)[:12]} does not match requested run {want[:12]}; "
            "model and training settings (other than epochs) must be identical to resume"
        )
    if "state" not in manifest:
        raise ValueError(f"{path}: checkpoint holds no training state")
    meta = manifest["state"]
    names = manifest["parameter_names"]
    return TrainState(
        epoch=meta["epoch"],
        step=meta["step"],
        params={n: arrays[f"state.params.{n}"] for n in names},
        moments={k[len("state.moments."):]: v for k, v in arrays.items() if k.startswith("state.moments.")},
        best_params={n: arrays[n] for n in names},
        best_epoch=meta["best_epoch"],
        best_val=meta["best_val"],
        history=[EpochRecord(int(e), float(a), float(b), float(c)) for e, a, b, c in meta["history"]],
    )


def save_bank(path: str | Path, bank: MLPBank, metadata: dict[str, Any] | None = None) -> Path:
    configs = {str(n): bank.models[n].config.to_dict() for n in bank.sizes()}
    arrays = [(f"n{n}.{k}", v) for n in bank.sizes() for k, v in bank.models[n].params.items()]
    manifest = {
        "kind": "mlp_bank",
        "config": configs,
        "precision": next(iter(configs.values()))["precision"] if configs else "float32",
        "parameter_names": [a for a, _ in arrays],
        "training": dict(metadata or {}),
    }
    return _write(path, manifest, arrays)


def load_bank(path: str | Path) -> tuple[MLPBank, dict]:
    manifest, arrays = _read(path)
    if manifest.get("kind") != "mlp_bank":
        raise ValueError(f"expected an MLP bank checkpoint, got {manifest.get('kind')!r}")
    bank = MLPBank()
    for key, cd in manifest["config"].items():
        cfg = MLPConfig.from_dict(cd)
        params = {name: arrays[f"n{key}.{name}"] for name, _ in cfg.shapes()}
        bank.models[int(key)] = FixedSizeMLP(cfg, params=params)
    return bank, manifest


__all__ = ["save_model", "load_model", "load_train_state", "save_bank", "load_bank", "FORMAT", "VERSION"]
