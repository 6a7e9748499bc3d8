"""Fixed-size feedforward baseline: one network per waypoint count."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
from numpy.typing import NDArray

from ..dataprep import LabeledSample, RangeAngleSequence
from ..errors import DimensionError, FixedSizeError
from . import autodiff as ad
from .autodiff import Tensor
from .model import _features, loss_tensor, normalize_output
from .train import TrainConfig, TrainResult, train


@dataclass(frozen=True)
class MLPConfig:
    n: int
    hidden: tuple[int, ...] = (64, 64)
    precision: str = "float32"
    target_scale: str = "length"

    def __post_init__(self):
        if self.n < 2:
            raise ValueError("n must be >= 2")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if any(h < 1 for h in self.hidden):
            raise ValueError("hidden sizes must be >= 1")
        if self.precision not in ("float32", "float64"):
            raise ValueError("precision must be float32 or float64")

    @property
    def m(self) -> int:
        return self.n - 1

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MLPConfig":
        return cls(**d)

    def shapes(self) -> list[tuple[str, tuple]]:
        sizes = [2 * self.m, *self.hidden, self.m]
        out = []
        for i, (a, b) in enumerate(zip(sizes, sizes[1:])):
            out += [(f"l{i}.W", (a, b)), (f"l{i}.b", (b,))]
        return out


class FixedSizeMLP:
    """ReLU network from the flattened ``(range, angle)`` rows of an ``n``-waypoint path."""

    def __init__(self, config: MLPConfig, seed: int = 0, params: dict[str, NDArray] | None = None):
        self.config = config
        dt = np.dtype(config.precision)
        if params is None:
            rng = np.random.default_rng([seed, config.n])
            params = {}
            for name, shape in config.shapes():
                if name.endswith(".W"):
                    lim = math.sqrt(6.0 / (shape[0] + shape[1]))
                    params[name] = rng.uniform(-lim, lim, size=shape).astype(dt)
                else:
                    params[name] = np.zeros(shape, dtype=dt)
        elif [n for n, _ in config.shapes()] != list(params):
            raise DimensionError("parameter names do not match the configuration")
        self.params = {k: np.ascontiguousarray(v, dtype=dt) for k, v in params.items()}

    def n_params(self) -> int:
        return sum(a.size for a in self.params.values())

    def _inputs(self, feats) -> NDArray:
        feats = np.asarray(feats)
        if feats.ndim != 3 or feats.shape[1] != self.config.m:
            got = feats.shape[1] + 1 if feats.ndim == 3 else None
            raise FixedSizeError(f"this network takes n={self.config.n} waypoints, got n={got}")
        return _features(feats).reshape(feats.shape[0], -1).astype(self.config.precision)

    def _scale(self) -> float:
        return float(self.config.m) if self.config.target_scale == "length" else 1.0

    def _forward(self, P, x) -> Tensor:
        h = Tensor(x)
        layers = len(self.config.hidden) + 1
        for i in range(layers):
            h = ad.linear(h, P[f"l{i}.W"], P[f"l{i}.b"])
            if i < layers - 1:
                h = ad.relu(h)
        return h

    def batch_loss(self, feats, fractions, variant: str = "step", grad: bool = False, rng=None):
        x = self._inputs(feats)
        t = (np.asarray(fractions, dtype=np.float64) * self._scale()).astype(self.config.precision)
        if not grad:
            with ad.no_grad():
                P = {n: Tensor(a) for n, a in self.params.items()}
                return float(loss_tensor(self._forward(P, x), t, variant).data), None
        P = {n: Tensor(a, True) for n, a in self.params.items()}
        L = loss_tensor(self._forward(P, x), t, variant)
        ad.backward(L)
        return float(L.data), {n: P[n].grad for n in P}

    def predict_batch(self, feats) -> NDArray[np.float64]:
        x = self._inputs(feats)
        with ad.no_grad():
            raw = self._forward({n: Tensor(a) for n, a in self.params.items()}, x).data
        return np.stack([normalize_output(r) for r in raw.astype(np.float64)])

    def predict(self, seq: RangeAngleSequence) -> NDArray[np.float64]:
        return self.predict_batch(seq.features()[None])[0]


class MLPBank:
    """One :class:`FixedSizeMLP` per waypoint count."""

    def __init__(self, models: dict[int, FixedSizeMLP] | None = None):
        self.models = dict(models or {})

    def sizes(self) -> list[int]:
        return sorted(self.models)

    def has(self, n: int) -> bool:
        return n in self.models

    def __getitem__(self, n: int) -> FixedSizeMLP:
        if n not in self.models:
            raise FixedSizeError(f"no network trained for n={n} (have {self.sizes()})")
        return self.models[n]

    def predict(self, seq: RangeAngleSequence) -> NDArray[np.float64]:
        return self[len(seq) + 1].predict(seq)

    def n_params(self) -> int:
        return sum(m.n_params() for m in self.models.values())


def train_bank(
    train_samples: Sequence[LabeledSample],
    val_samples: Sequence[LabeledSample] = (),
    cfg: TrainConfig = TrainConfig(),
    hidden: tuple[int, ...] = (64, 64),
    sizes: Sequence[int] | None = None,
    precision: str = "float32",
) -> tuple[MLPBank, dict[int, TrainResult]]:
    """Train one network per waypoint count present in the training data."""
    if sizes is None:
        sizes = sorted({s.n for s in train_samples})
    bank = MLPBank()
    results = {}
    for n in sizes:
        tr = [s for s in train_samples if s.n == n]
        va = [s for s in val_samples if s.n == n]
        if not tr:
            continue
        model = FixedSizeMLP(MLPConfig(n, hidden, precision), seed=cfg.seed)
        results[n] = train(model, tr, va, cfg)
        bank.models[n] = model
    return bank, results


__all__ = ["MLPConfig", "FixedSizeMLP", "MLPBank", "train_bank"]
