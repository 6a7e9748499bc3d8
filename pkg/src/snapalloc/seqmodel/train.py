"""Gradient training loop shared by the transformer and the fixed-size MLPs."""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np
from numpy.typing import NDArray

from ..dataprep import LabeledSample


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    schedule: str = "cosine"
    min_lr_ratio: float = 0.0
    warmup_steps: int = 0
    batch_size: int = 32
    epochs: int = 20
    seed: int = 0
    optimizer: str = "adam"
    loss_variant: str = "step"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip: float | None = 1.0
    converged_only: bool = True
    max_steps: int | None = None

    def __post_init__(self):
        if self.lr <= 0 or self.batch_size < 1 or self.epochs < 0:
            raise ValueError("lr and batch_size must be positive, epochs non-negative")
        if self.schedule not in ("cosine", "constant"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.loss_variant not in ("step", "cumsum"):
            raise ValueError(f"unknown loss variant {self.loss_variant!r}")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ValueError("grad_clip must be positive or None")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


class Trainable(Protocol):
    params: dict[str, NDArray]

    def batch_loss(self, feats, fractions, variant="step", grad=False, rng=None): ...


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float


@dataclass
class TrainState:
    """Everything needed to continue an interrupted run bit-identically."""

    epoch: int
    step: int
    params: dict[str, NDArray]
    moments: dict[str, NDArray]
    best_params: dict[str, NDArray]
    best_epoch: int
    best_val: float
    history: list[EpochRecord] = field(default_factory=list)


@dataclass
class TrainResult:
    history: list[EpochRecord]
    best_epoch: int
    best_val: float
    diverged: bool
    state: TrainState


def config_hash(model_config: dict, cfg: TrainConfig) -> str:
    """Digest of everything that must match for a resumed run (epochs excluded)."""
    t = cfg.to_dict()
    t.pop("epochs")
    blob = json.dumps({"model": model_config, "train": t}, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def learning_rate(cfg: TrainConfig, step: int, total_steps: int) -> float:
    if cfg.warmup_steps and step < cfg.warmup_steps:
        return cfg.lr * (step + 1) / cfg.warmup_steps
    if cfg.schedule == "constant" or total_steps <= 1:
        return cfg.lr
    frac = min(1.0, (step - cfg.warmup_steps) / max(1, total_steps - cfg.warmup_steps))
    lo = cfg.lr * cfg.min_lr_ratio
    return lo + 0.5 * (cfg.lr - lo) * (1.0 + math.cos(math.pi * frac))


def _stack(samples: Sequence[LabeledSample]):
    feats = np.stack([s.range_angle.features() for s in samples])
    fr = np.stack([s.fractions for s in samples])
    return feats, fr


def length_batches(samples: Sequence[LabeledSample], batch_size: int, rng: np.random.Generator | None):
    """Index batches of equal sequence length; shuffled when ``rng`` is given."""
    buckets: dict[int, list[int]] = {}
    for i, s in enumerate(samples):
        buckets.setdefault(len(s.range_angle), []).append(i)
    batches = []
    for m in sorted(buckets):
        idx = np.array(buckets[m])
        if rng is not None:
            idx = idx[rng.permutation(idx.size)]
        batches += [idx[i:i + batch_size] for i in range(0, idx.size, batch_size)]
    if rng is not None:
        batches = [batches[i] for i in rng.permutation(len(batches))]
    return batches


def evaluate_loss(model: Trainable, samples: Sequence[LabeledSample], variant: str = "step", batch_size: int = 256) -> float:
    """Mean per-sequence teacher-forced loss."""
    if not samples:
        return float("nan")
    total = 0.0
    for idx in length_batches(samples, batch_size, None):
        feats, fr = _stack([samples[i] for i in idx])
        total += model.batch_loss(feats, fr, variant)[0] * len(idx)
    return total / len(samples)


def _clone(d: dict[str, NDArray]) -> dict[str, NDArray]:
    return {k: v.copy() for k, v in d.items()}


def train(
    model: Trainable,
    train_samples: Sequence[LabeledSample],
    val_samples: Sequence[LabeledSample] = (),
    cfg: TrainConfig = TrainConfig(),
    resume: TrainState | None = None,
    stop_after_epoch: int | None = None,
) -> TrainResult:
    """Minimise the teacher-forced loss with mini-batch gradients.

    Epoch 0 records the untrained losses. The parameters with the lowest
    validation loss (training loss when there is no validation set) are
    loaded into ``model`` at the end; the last iterate stays in
    ``result.state`` for resuming. A non-finite loss or gradient stops
    training with ``diverged=True`` and the best parameters so far.
    """
    if cfg.converged_only:
        train_samples = [s for s in train_samples if s.converged]
        val_samples = [s for s in val_samples if s.converged]
    if not train_samples:
        raise ValueError("empty training set")
    monitor = val_samples if val_samples else train_samples
    per_epoch = len(length_batches(train_samples, cfg.batch_size, None))
    total_steps = per_epoch * cfg.epochs
    if cfg.max_steps is not None:
        total_steps = min(total_steps, cfg.max_steps)

    if resume is None:
        tr0 = evaluate_loss(model, train_samples, cfg.loss_variant)
        va0 = evaluate_loss(model, monitor, cfg.loss_variant)
        state = TrainState(
            epoch=0,
            step=0,
            params=model.params,
            moments={},
            best_params=_clone(model.params),
            best_epoch=0,
            best_val=va0,
            history=[EpochRecord(0, tr0, va0 if val_samples else float("nan"), 0.0)],
        )
        for k, v in model.params.items():
            state.moments["m." + k] = np.zeros_like(v)
            state.moments["v." + k] = np.zeros_like(v)
    else:
        state = resume
        model.params = state.params

    diverged = False
    names = list(model.params)
    last_epoch = cfg.epochs if stop_after_epoch is None else min(cfg.epochs, stop_after_epoch)
    for epoch in range(state.epoch + 1, last_epoch + 1):
        if state.step >= total_steps:
            break
        rng = np.random.default_rng([cfg.seed, epoch])
        running, count = 0.0, 0
        lr = 0.0
        for idx in length_batches(train_samples, cfg.batch_size, rng):
            if state.step >= total_steps:
                break
            feats, fr = _stack([train_samples[i] for i in idx])
            value, grads = model.batch_loss(feats, fr, cfg.loss_variant, grad=True, rng=rng)
            if not math.isfinite(value) or not all(np.all(np.isfinite(grads[n])) for n in names):
                diverged = True
                break
            if cfg.grad_clip is not None:
                norm = math.sqrt(sum(float(np.vdot(grads[n], grads[n])) for n in names))
                if norm > cfg.grad_clip:
                    f = cfg.grad_clip / norm
                    grads = {n: g * f for n, g in grads.items()}
            lr = learning_rate(cfg, state.step, total_steps)
            _apply_update(model.params, grads, state, cfg, lr)
            state.step += 1
            running += value * len(idx)
            count += len(idx)
        if diverged:
            break
        va = evaluate_loss(model, monitor, cfg.loss_variant)
        if not math.isfinite(va):
            diverged = True
            break
        state.history.append(EpochRecord(epoch, running / max(count, 1), va if val_samples else float("nan"), lr))
        state.epoch = epoch
        if va < state.best_val:
            state.best_val, state.best_epoch = va, epoch
            state.best_params = _clone(model.params)

    state.params = model.params
    model.params = _clone(state.best_params)
    return TrainResult(state.history, state.best_epoch, state.best_val, diverged, state)


def _apply_update(params, grads, state: TrainState, cfg: TrainConfig, lr: float) -> None:
    if cfg.optimizer == "sgd":
        for n, g in grads.items():
            params[n] -= (lr * g).astype(params[n].dtype)
        return
    t = state.step + 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for n, g in grads.items():
        m = state.moments["m." + n]
        v = state.moments["v." + n]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        params[n] -= (lr / c1) * m / (np.sqrt(v / c2) + cfg.adam_eps)


def write_history_csv(history: Sequence[EpochRecord], path: str | Path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train_loss", "val_loss", "lr"])
        for r in history:
            w.writerow([r.epoch, repr(r.train_loss), repr(r.val_loss), repr(r.lr)])
    return path


__all__ = [
    "TrainConfig",
    "TrainState",
    "TrainResult",
    "EpochRecord",
    "train",
    "evaluate_loss",
    "length_batches",
    "learning_rate",
    "config_hash",
    "write_history_csv",
]
