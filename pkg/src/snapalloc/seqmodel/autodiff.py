"""Minimal tape-free reverse-mode differentiation over numpy arrays.

Each :class:`Tensor` keeps its parents and a closure mapping the output
gradient to parent gradients; :func:`backward` walks the graph in reverse
topological order. Broadcasting in elementwise ops is undone when gradients
flow back. Ops that are hot in the transformer (affine maps, layer norm,
attention, L1 loss) are fused with hand-written backward passes.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Sequence

import numpy as np

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Build no graph inside the block (inference)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "grad", "parents", "backward_fn", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, parents: Sequence["Tensor"] = (), backward_fn=None):
        self.data = data
        self.grad = None
        self.requires_grad = requires_grad
        self.parents = parents
        self.backward_fn = backward_fn

    @property
    def shape(self):
        return self.data.shape

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, scale(other, -1.0))

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def _make(data, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        return Tensor(data, True, tuple(parents), backward_fn)
    return Tensor(data)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every leaf needing it."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    root.grad = np.ones_like(root.data)
    for node in reversed(order):
        if node.backward_fn is None or node.grad is None:
            continue
        grads = node.backward_fn(node.grad)
        for p, g in zip(node.parents, grads):
            if g is None or not p.requires_grad:
                continue
            p.grad = g if p.grad is None else p.grad + g
        if node.parents:
            node.grad = None  # free intermediate buffers


# ---------------------------------------------------------------- elementwise

def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data

    def bw(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _make(out, (a, b), bw)


def scale(a: Tensor, c: float) -> Tensor:
    return _make(a.data * c, (a,), lambda g: (g * c,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(x.data * mask, (x,), lambda g: (g * mask,))


def reshape(x: Tensor, shape) -> Tensor:
    old = x.data.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def cumsum(x: Tensor, axis: int = -1) -> Tensor:
    def bw(g):
        return (np.flip(np.cumsum(np.flip(g, axis), axis), axis),)

    return _make(np.cumsum(x.data, axis=axis), (x,), bw)


# ---------------------------------------------------------------- fused layers

def linear(x: Tensor, W: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ W + b`` over the last axis of ``x``."""
    out = x.data @ W.data
    if b is not None:
        out = out + b.data

    def bw(g):
        n_in, n_out = W.data.shape
        g2 = g.reshape(-1, n_out)
        gx = g @ W.data.T if x.requires_grad else None
        gW = x.data.reshape(-1, n_in).T @ g2 if W.requires_grad else None
        gb = g2.sum(axis=0) if b is not None and b.requires_grad else None
        return gx, gW, gb

    parents = (x, W) if b is None else (x, W, b)
    return _make(out, parents, bw)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def bw(g):
        d = x.data.shape[-1]
        gxhat = g * gamma.data
        gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True) - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        flat = g.reshape(-1, d)
        return gx, (flat * xhat.reshape(-1, d)).sum(axis=0), flat.sum(axis=0)

    return _make(out, (x, gamma, beta), bw)


def split_heads(x: Tensor, heads: int) -> Tensor:
    B, L, D = x.data.shape
    out = x.data.reshape(B, L, heads, D // heads).transpose(0, 2, 1, 3)
    return _make(out, (x,), lambda g: (g.transpose(0, 2, 1, 3).reshape(B, L, D),))


def merge_heads(x: Tensor) -> Tensor:
    B, H, L, dh = x.data.shape
    out = x.data.transpose(0, 2, 1, 3).reshape(B, L, H * dh)
    return _make(out, (x,), lambda g: (g.reshape(B, L, H, dh).transpose(0, 2, 1, 3),))


def attention(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray | None = None) -> tuple[Tensor, np.ndarray]:
    """Scaled dot-product attention over ``(B, H, L, dh)`` inputs.

    ``mask`` is additive (0 or -inf), broadcast against the score matrix.
    Returns the output tensor and the attention probabilities.
    """
    sc = 1.0 / math.sqrt(q.data.shape[-1])
    s = (q.data @ k.data.swapaxes(-1, -2)) * sc
    if mask is not None:
        s = s + mask
    s = s - s.max(axis=-1, keepdims=True)
    p = np.exp(s)
    p /= p.sum(axis=-1, keepdims=True)
    out = p @ v.data

    def bw(g):
        gv = p.swapaxes(-1, -2) @ g
        gp = g @ v.data.swapaxes(-1, -2)
        gs = p * (gp - (gp * p).sum(axis=-1, keepdims=True))
        gq = (gs @ k.data) * sc
        gk = (gs.swapaxes(-1, -2) @ q.data) * sc
        return gq, gk, gv

    return _make(out, (q, k, v), bw), p


def l1_loss(pred: Tensor, target: np.ndarray) -> Tensor:
    """Mean over the batch of the summed absolute error over the last axis."""
    diff = pred.data - target
    n = diff.shape[0] if diff.ndim > 1 else 1
    out = np.asarray(np.abs(diff).sum() / n, dtype=pred.data.dtype)
    sign = np.sign(diff) / n
    return _make(out, (pred,), lambda g: (g * sign,))


__all__ = [
    "Tensor",
    "no_grad",
    "backward",
    "add",
    "scale",
    "relu",
    "reshape",
    "cumsum",
    "linear",
    "layer_norm",
    "split_heads",
    "merge_heads",
    "attention",
    "l1_loss",
]
