"""Encoder-decoder transformer that maps range-angle sequences to time fractions."""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray

from ..dataprep import RangeAngleSequence
from ..errors import DegenerateOutputError, DimensionError, NumericFailureError, SequenceLengthError
from . import autodiff as ad
from .autodiff import Tensor

OUTPUT_FLOOR = 1e-4
FEATURE_DECIMALS = 9


@dataclass(frozen=True)
class ModelConfig:
    embed_dim: int = 32
    num_heads: int = 16
    enc_layers: int = 3
    dec_layers: int = 3
    ffn_dim: int = 256
    max_seq_len: int = 64
    dropout: float = 0.0
    precision: str = "float32"
    # decoder works on fractions times the sequence length, so targets average 1
    target_scale: str = "length"

    def __post_init__(self):
        if min(self.embed_dim, self.num_heads, self.ffn_dim, self.max_seq_len) < 1:
            raise ValueError("dimensions must be >= 1")
        if self.enc_layers < 0 or self.dec_layers < 0:
            raise ValueError("layer counts must be >= 0")
        if self.embed_dim % self.num_heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.precision not in ("float32", "float64"):
            raise ValueError("precision must be float32 or float64")
        if self.target_scale not in ("length", "none"):
            raise ValueError("target_scale must be 'length' or 'none'")

    @property
    def dtype(self):
        return np.dtype(self.precision)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


# ---------------------------------------------------------------- positional encoding

def positional_encoding(pos: int, dim: int) -> NDArray[np.float64]:
    """Sinusoidal encoding: sin at even indices, cos at odd, frequency 10000**(-2i/dim)."""
    if pos < 0:
        raise ValueError("pos must be >= 0")
    i = np.arange(dim) // 2
    angle = pos / np.power(10000.0, 2.0 * i / dim)
    return np.where(np.arange(dim) % 2 == 0, np.sin(angle), np.cos(angle))


@lru_cache(maxsize=32)
def _pe_table(length: int, dim: int, dtype: str) -> NDArray:
    t = np.stack([positional_encoding(p, dim) for p in range(length)]).astype(dtype)
    t.setflags(write=False)
    return t


# ---------------------------------------------------------------- parameter store

def _mha_shapes(prefix: str, d: int) -> list[tuple[str, tuple]]:
    out = []
    for p in ("q", "k", "v", "o"):
        out += [(f"{prefix}.{p}.W", (d, d)), (f"{prefix}.{p}.b", (d,))]
    return out


def _ln_shapes(prefix: str, d: int) -> list[tuple[str, tuple]]:
    return [(f"{prefix}.g", (d,)), (f"{prefix}.b", (d,))]


def _ffn_shapes(prefix: str, d: int, f: int) -> list[tuple[str, tuple]]:
    return [(f"{prefix}.1.W", (d, f)), (f"{prefix}.1.b", (f,)), (f"{prefix}.2.W", (f, d)), (f"{prefix}.2.b", (d,))]


def parameter_shapes(cfg: ModelConfig) -> list[tuple[str, tuple]]:
    """Names and shapes of every trainable array, in storage order."""
    d, f = cfg.embed_dim, cfg.ffn_dim
    out = [("enc_embed.W", (2, d)), ("enc_embed.b", (d,)), ("dec_embed.W", (1, d)), ("dec_embed.b", (d,))]
    for i in range(cfg.enc_layers):
        out += _mha_shapes(f"enc.{i}.self", d) + _ln_shapes(f"enc.{i}.ln1", d)
        out += _ffn_shapes(f"enc.{i}.ffn", d, f) + _ln_shapes(f"enc.{i}.ln2", d)
    out += _ln_shapes("enc_norm", d)
    for i in range(cfg.dec_layers):
        out += _mha_shapes(f"dec.{i}.self", d) + _ln_shapes(f"dec.{i}.ln1", d)
        out += _mha_shapes(f"dec.{i}.cross", d) + _ln_shapes(f"dec.{i}.ln2", d)
        out += _ffn_shapes(f"dec.{i}.ffn", d, f) + _ln_shapes(f"dec.{i}.ln3", d)
    out += _ln_shapes("dec_norm", d)
    out += [("head.W", (d, 1)), ("head.b", (1,))]
    return out


def param_count(cfg: ModelConfig) -> int:
    """Closed-form count of trainable scalars.

    Attention: four d x d projections with biases. FFN: two affine maps.
    Layer norms carry a gain and a bias. Both stacks end in a layer norm.
    Embeddings are affine maps from 2 (encoder) and 1 (decoder) inputs; the
    head is an affine map to one output.
    """
    d, f = cfg.embed_dim, cfg.ffn_dim
    mha = 4 * d * d + 4 * d
    ffn = 2 * d * f + f + d
    ln = 2 * d
    enc = cfg.enc_layers * (mha + ffn + 2 * ln) + ln
    dec = cfg.dec_layers * (2 * mha + ffn + 3 * ln) + ln
    return (2 * d + d) + (d + d) + enc + dec + (d + 1)


def init_params(cfg: ModelConfig, seed: int = 0) -> dict[str, NDArray]:
    """Xavier-uniform weights, zero biases, unit layer-norm gains."""
    rng = np.random.default_rng(seed)
    out: dict[str, NDArray] = {}
    for name, shape in parameter_shapes(cfg):
        if name.endswith(".W"):
            lim = math.sqrt(6.0 / (shape[0] + shape[1]))
            out[name] = rng.uniform(-lim, lim, size=shape).astype(cfg.dtype)
        elif name.endswith(".g"):
            out[name] = np.ones(shape, dtype=cfg.dtype)
        else:
            out[name] = np.zeros(shape, dtype=cfg.dtype)
    return out


# ---------------------------------------------------------------- attention capture

@dataclass
class AttentionRecord:
    """Attention probabilities per layer, each of shape ``(batch, heads, L_q, L_k)``."""

    enc_self: list[NDArray] = field(default_factory=list)
    dec_self: list[NDArray] = field(default_factory=list)
    cross: list[NDArray] = field(default_factory=list)

    def all_maps(self) -> list[NDArray]:
        return self.enc_self + self.dec_self + self.cross

    def max_row_error(self) -> float:
        """Largest deviation of an attention row sum from 1."""
        maps = self.all_maps()
        return max((float(np.abs(p.sum(axis=-1) - 1.0).max()) for p in maps), default=0.0)

    def head_average(self, kind: str = "cross", layer: int = -1) -> NDArray:
        return getattr(self, kind)[layer].mean(axis=1)


def dump_attention(record: AttentionRecord, outdir: str | Path, sample: int = 0, kind: str = "cross") -> list[Path]:
    """One CSV per (layer, head) plus the head-averaged map per layer.

    Rows are decoder steps and columns encoder positions for cross attention.
    """
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    written = []
    for li, p in enumerate(getattr(record, kind)):
        maps = p[sample]
        for h in range(maps.shape[0]):
            written.append(_write_matrix(outdir / f"{kind}_layer{li}_head{h}.csv", maps[h]))
        written.append(_write_matrix(outdir / f"{kind}_layer{li}_mean.csv", maps.mean(axis=0)))
    return written


def _write_matrix(path: Path, a: NDArray) -> Path:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step"] + [f"pos{j}" for j in range(a.shape[1])])
        for i, row in enumerate(a):
            w.writerow([i] + [repr(float(x)) for x in row])
    return path


# ---------------------------------------------------------------- model

def _causal_mask(length: int, dtype) -> NDArray:
    m = np.triu(np.full((length, length), -np.inf, dtype=dtype), k=1)
    return m


def _features(seq) -> NDArray[np.float64]:
    # inputs are rounded so that transformed copies of a path give identical bits
    f = seq.features() if isinstance(seq, RangeAngleSequence) else np.asarray(seq, dtype=np.float64)
    return np.round(f, FEATURE_DECIMALS)


class AllocationModel:
    """Post-norm encoder-decoder transformer with an affine scalar head."""

    def __init__(self, config: ModelConfig = ModelConfig(), seed: int = 0, params: dict[str, NDArray] | None = None):
        self.config = config
        self.seed = seed
        if params is None:
            params = init_params(config, seed)
        else:
            expected = parameter_shapes(config)
            if [n for n, _ in expected] != list(params):
                raise DimensionError("parameter names do not match the configuration")
            for n, s in expected:
                if params[n].shape != s:
                    raise DimensionError(f"parameter {n} has shape {params[n].shape}, expected {s}")
            params = {n: np.ascontiguousarray(a, dtype=config.dtype) for n, a in params.items()}
        self.params = params

    # -- plumbing

    def n_params(self) -> int:
        return sum(a.size for a in self.params.values())

    def _check_len(self, m: int) -> None:
        if m < 1:
            raise DimensionError("empty input sequence")
        if m > self.config.max_seq_len:
            raise SequenceLengthError(f"sequence length {m} exceeds max_seq_len {self.config.max_seq_len}")

    def _scale(self, m: int) -> float:
        return float(m) if self.config.target_scale == "length" else 1.0

    @staticmethod
    def _finite(x: Tensor, where: str) -> Tensor:
        if not np.all(np.isfinite(x.data)):
            raise NumericFailureError("non-finite activations", layer=where)
        return x

    def _dropout(self, x: Tensor, rng: np.random.Generator | None) -> Tensor:
        p = self.config.dropout
        if rng is None or p == 0.0:
            return x
        keep = (rng.random(x.data.shape) >= p).astype(x.data.dtype) / (1.0 - p)
        return ad._make(x.data * keep, (x,), lambda g: (g * keep,))

    def _mha(self, P, prefix, xq, xkv, mask, store):
        H = self.config.num_heads
        q = ad.split_heads(ad.linear(xq, P[prefix + ".q.W"], P[prefix + ".q.b"]), H)
        k = ad.split_heads(ad.linear(xkv, P[prefix + ".k.W"], P[prefix + ".k.b"]), H)
        v = ad.split_heads(ad.linear(xkv, P[prefix + ".v.W"], P[prefix + ".v.b"]), H)
        o, probs = ad.attention(q, k, v, mask)
        store.append(probs)
        return ad.linear(ad.merge_heads(o), P[prefix + ".o.W"], P[prefix + ".o.b"])

    def _ffn(self, P, prefix, x):
        h = ad.relu(ad.linear(x, P[prefix + ".1.W"], P[prefix + ".1.b"]))
        return ad.linear(h, P[prefix + ".2.W"], P[prefix + ".2.b"])

    def _ln(self, P, prefix, x):
        return ad.layer_norm(x, P[prefix + ".g"], P[prefix + ".b"])

    def _embed(self, P, which: str, x: NDArray) -> Tensor:
        L = x.shape[1]
        pe = Tensor(_pe_table(self.config.max_seq_len, self.config.embed_dim, self.config.precision)[:L])
        return ad.add(ad.linear(Tensor(x), P[which + ".W"], P[which + ".b"]), pe)

    def encode(self, P, feats: NDArray, rec: AttentionRecord, rng=None) -> Tensor:
        x = self._embed(P, "enc_embed", feats)
        for i in range(self.config.enc_layers):
            pre = f"enc.{i}"
            a = self._dropout(self._mha(P, pre + ".self", x, x, None, rec.enc_self), rng)
            x = self._ln(P, pre + ".ln1", ad.add(x, a))
            x = self._ln(P, pre + ".ln2", ad.add(x, self._dropout(self._ffn(P, pre + ".ffn", x), rng)))
            self._finite(x, pre)
        return self._finite(self._ln(P, "enc_norm", x), "enc_norm")

    def decode(self, P, memory: Tensor, dec_in: NDArray, rec: AttentionRecord, rng=None) -> Tensor:
        L = dec_in.shape[1]
        mask = _causal_mask(L, self.config.dtype)
        y = self._embed(P, "dec_embed", dec_in[..., None])
        for i in range(self.config.dec_layers):
            pre = f"dec.{i}"
            a = self._dropout(self._mha(P, pre + ".self", y, y, mask, rec.dec_self), rng)
            y = self._ln(P, pre + ".ln1", ad.add(y, a))
            c = self._dropout(self._mha(P, pre + ".cross", y, memory, None, rec.cross), rng)
            y = self._ln(P, pre + ".ln2", ad.add(y, c))
            y = self._ln(P, pre + ".ln3", ad.add(y, self._dropout(self._ffn(P, pre + ".ffn", y), rng)))
            self._finite(y, pre)
        y = self._ln(P, "dec_norm", y)
        out = ad.linear(y, P["head.W"], P["head.b"])
        return self._finite(ad.reshape(out, out.data.shape[:2]), "head")

    def leaves(self, requires_grad: bool = False) -> dict[str, Tensor]:
        return {n: Tensor(a, requires_grad) for n, a in self.params.items()}

    def batch_arrays(self, feats: NDArray, fractions: NDArray | None = None):
        """Cast a ``(B, m, 2)`` feature batch and optional fractions to model units."""
        feats = np.asarray(feats)
        if feats.ndim != 3 or feats.shape[2] != 2:
            raise DimensionError("features must have shape (batch, m, 2)")
        self._check_len(feats.shape[1])
        x = _features(feats).astype(self.config.dtype)
        if fractions is None:
            return x, None
        fr = np.asarray(fractions, dtype=np.float64)
        if fr.shape != feats.shape[:2]:
            raise DimensionError("fractions must have shape (batch, m)")
        return x, (fr * self._scale(feats.shape[1])).astype(self.config.dtype)

    def teacher_forced(self, P, x: NDArray, targets: NDArray, rng=None) -> tuple[Tensor, AttentionRecord]:
        """Raw outputs in model units for targets already in model units."""
        rec = AttentionRecord()
        memory = self.encode(P, x, rec, rng)
        dec_in = np.concatenate([np.zeros((x.shape[0], 1), dtype=x.dtype), targets[:, :-1]], axis=1)
        return self.decode(P, memory, dec_in, rec, rng), rec

    def greedy(self, x: NDArray) -> tuple[NDArray, AttentionRecord]:
        """Raw outputs in model units from autoregressive decoding."""
        B, m = x.shape[:2]
        with ad.no_grad():
            P = self.leaves()
            rec = AttentionRecord()
            memory = self.encode(P, x, rec)
            dec_in = np.zeros((B, 1), dtype=x.dtype)
            out = None
            for k in range(m):
                step = AttentionRecord()
                out = self.decode(P, memory, dec_in, step).data
                if k < m - 1:
                    dec_in = np.concatenate([dec_in, out[:, -1:]], axis=1)
            # attention of the final pass covers every decoding step
            rec.dec_self, rec.cross = step.dec_self, step.cross
        return out, rec

    def batch_loss(self, feats, fractions, variant: str = "step", grad: bool = False, rng=None):
        """Teacher-forced loss in model units; with ``grad`` also returns parameter gradients."""
        x, t = self.batch_arrays(feats, fractions)
        if not grad:
            with ad.no_grad():
                out, _ = self.teacher_forced(self.leaves(), x, t)
                return float(loss_tensor(out, t, variant).data), None
        P = self.leaves(True)
        out, _ = self.teacher_forced(P, x, t, rng)
        L = loss_tensor(out, t, variant)
        ad.backward(L)
        grads = {n: (P[n].grad if P[n].grad is not None else np.zeros_like(P[n].data)) for n in P}
        return float(L.data), grads

    def predict(self, seqs: RangeAngleSequence | Sequence[RangeAngleSequence]) -> NDArray:
        """Fractions for one sequence or a list of equal-length sequences."""
        single = isinstance(seqs, RangeAngleSequence)
        batch = [seqs] if single else list(seqs)
        feats = np.stack([s.features() for s in batch])
        fr = decode_batch(self, feats)
        return fr[0] if single else fr


# ---------------------------------------------------------------- public operations

def embed_inputs(model: AllocationModel, seq: RangeAngleSequence | ArrayLike) -> NDArray:
    """Affine embedding of ``(range, angle)`` rows plus positional encoding, shape ``(m, D)``."""
    f = _features(seq)
    model._check_len(f.shape[0])
    x = f[None].astype(model.config.dtype)
    with ad.no_grad():
        return model._embed(model.leaves(), "enc_embed", x).data[0]


def _as_batch(seq, targets=None):
    if isinstance(seq, RangeAngleSequence):
        feats = seq.features()[None]
        if targets is not None:
            targets = np.asarray(targets, dtype=np.float64)[None]
        return feats, targets, True
    feats = np.asarray(seq, dtype=np.float64)
    if feats.ndim == 2:
        return feats[None], None if targets is None else np.asarray(targets)[None], True
    return feats, targets, False


def forward_teacher_forced(model: AllocationModel, seq, target_fractions) -> tuple[NDArray, AttentionRecord]:
    """Raw per-step outputs (model units) with the decoder fed ``[0, t_1 .. t_{m-1}]``."""
    feats, targets, single = _as_batch(seq, target_fractions)
    x, t = model.batch_arrays(feats, targets)
    with ad.no_grad():
        out, rec = model.teacher_forced(model.leaves(), x, t)
    return (out.data[0] if single else out.data), rec


def decode_batch(model: AllocationModel, feats: NDArray, return_attention: bool = False):
    x, _ = model.batch_arrays(feats)
    raw, rec = model.greedy(x)
    fr = np.stack([normalize_output(r) for r in raw.astype(np.float64)])
    return (fr, rec) if return_attention else fr


def decode_autoregressive(model: AllocationModel, seq) -> NDArray[np.float64]:
    """Greedy decoding from the zero start token, normalised onto the simplex."""
    feats, _, single = _as_batch(seq)
    fr = decode_batch(model, feats)
    return fr[0] if single else fr


def normalize_output(raw: ArrayLike, eps: float = OUTPUT_FLOOR) -> NDArray[np.float64]:
    """Clamp entries to at least ``eps`` and divide by the L1 norm."""
    r = np.asarray(raw, dtype=np.float64).reshape(-1)
    if r.size == 0:
        raise DimensionError("empty output")
    if not np.all(np.isfinite(r)) or not np.any(r):
        raise DegenerateOutputError("raw output is all zero or non-finite")
    c = np.maximum(r, eps)
    return c / c.sum()


def loss(pred: ArrayLike, target: ArrayLike, variant: str = "step") -> float:
    """Summed absolute error per step, or between cumulative sums."""
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if p.shape != t.shape:
        raise DimensionError(f"length mismatch: {p.shape} vs {t.shape}")
    if variant == "cumsum":
        p, t = np.cumsum(p, axis=-1), np.cumsum(t, axis=-1)
    elif variant != "step":
        raise ValueError(f"unknown loss variant {variant!r}")
    return float(np.abs(p - t).sum())


def loss_tensor(pred: Tensor, target: NDArray, variant: str = "step") -> Tensor:
    if variant == "cumsum":
        return ad.l1_loss(ad.cumsum(pred, -1), np.cumsum(target, axis=-1))
    if variant != "step":
        raise ValueError(f"unknown loss variant {variant!r}")
    return ad.l1_loss(pred, target)


__all__ = [
    "ModelConfig",
    "AllocationModel",
    "AttentionRecord",
    "positional_encoding",
    "parameter_shapes",
    "param_count",
    "init_params",
    "embed_inputs",
    "forward_teacher_forced",
    "decode_autoregressive",
    "decode_batch",
    "normalize_output",
    "loss",
    "loss_tensor",
    "dump_attention",
    "OUTPUT_FLOOR",
]
