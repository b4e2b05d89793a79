"""Sliding-window multi-head attention over per-frame token sequences.

Token ``i`` attends to keys ``j`` with ``|i - j| <= w // 2``, clamped at the
sequence ends (no phantom padding tokens). Indices here are 0-based.
"""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Module, Tensor, counters
from .autodiff import tensor as T
from .autodiff.nn import Linear


def window_bounds(i: int, seq_len: int, w: int) -> tuple[int, int]:
    """Inclusive ``(lo, hi)`` of the neighbourhood of token ``i``."""
    if w < 1:
        raise ValueError(f"window size must be >= 1, got {w}")
    r = w // 2
    return max(0, i - r), min(seq_len - 1, i + r)


def window_indices(i: int, seq_len: int, w: int) -> list[int]:
    lo, hi = window_bounds(i, seq_len, w)
    return list(range(lo, hi + 1))


def window_mask(seq_len: int, w: int) -> np.ndarray:
    """Boolean (seq_len, seq_len) mask, ``mask[i, j]`` iff j is in i's window."""
    idx = np.arange(seq_len)
    return np.abs(idx[:, None] - idx[None, :]) <= w // 2


def _gather_plan(seq_len: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    r = min(w // 2, seq_len - 1)
    offsets = np.arange(-r, r + 1)
    idx = np.arange(seq_len)[:, None] + offsets[None, :]
    valid = (idx >= 0) & (idx < seq_len)
    return np.clip(idx, 0, seq_len - 1), valid


class LocalAttention(Module):
    def __init__(self, d: int, heads: int, window: int = 8, dropout: float = 0.1,
                 rng: np.random.Generator | None = None, zero_out: bool = False, dtype=np.float32):
        if d % heads:
            raise ValueError(f"embedding dim {d} is not divisible by {heads} heads")
        if window < 1:
            raise ValueError(f"window size must be >= 1, got {window}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.d, self.heads, self.window, self.dropout = d, heads, window, dropout
        self.q = Linear(d, d, rng, dtype=dtype)
        self.k = Linear(d, d, rng, dtype=dtype)
        self.v = Linear(d, d, rng, dtype=dtype)
        self.o = Linear(d, d, rng, zero=zero_out, dtype=dtype)
        self.last_weights: np.ndarray | None = None

    def _heads(self, x: Tensor) -> Tensor:
        bf, l, _ = x.shape
        return T.transpose(T.reshape(x, (bf, l, self.heads, self.d // self.heads)), (0, 2, 1, 3))

    def forward(self, x, rng: np.random.Generator | None = None) -> Tensor:
        """``x``: (bf, l, d) -> (bf, l, d). ``rng`` drives dropout in training mode."""
        x = T.as_tensor(x)
        bf, l, d = x.shape
        if d != self.d:
            raise ValueError(f"expected embedding dim {self.d}, got {d}")
        dk = d // self.heads
        q, k, v = self._heads(self.q(x)), self._heads(self.k(x)), self._heads(self.v(x))
        idx, valid = _gather_plan(l, self.window)
        with counters.category("attention"):
            kg = T.take(k, idx, axis=2)                  # (bf, h, l, win, dk)
            vg = T.take(v, idx, axis=2)
            q1 = T.reshape(q, (bf, self.heads, l, 1, dk))
            scores = (q1 @ T.swapaxes(kg, -1, -2)) * (1.0 / np.sqrt(dk))   # (bf, h, l, 1, win)
            scores = T.where(valid[:, None, :], scores, -np.inf)
            attn = ad.softmax(scores, axis=-1)
            self.last_weights = attn.data[..., 0, :]
            attn = ad.dropout(attn, self.dropout, rng, self.training)
            out = T.reshape(attn @ vg, (bf, self.heads, l, dk))
        out = T.reshape(T.transpose(out, (0, 2, 1, 3)), (bf, l, d))
        return self.o(out)


def full_attention_oracle(x: np.ndarray, layer: LocalAttention, mask: np.ndarray) -> np.ndarray:
    """Dense masked multi-head attention written directly in numpy."""
    x = np.asarray(x, dtype=np.float64)
    bf, l, d = x.shape
    h, dk = layer.heads, d // layer.heads

    def proj(lin):
        return (x @ lin.weight.data + lin.bias.data).reshape(bf, l, h, dk).transpose(0, 2, 1, 3)

    q, k, v = proj(layer.q), proj(layer.k), proj(layer.v)
    s = q @ k.transpose(0, 1, 3, 2) / np.sqrt(dk)
    s = np.where(mask, s, -np.inf)
    s = s - s.max(axis=-1, keepdims=True)
    p = np.exp(s)
    p /= p.sum(axis=-1, keepdims=True)
    out = (p @ v).transpose(0, 2, 1, 3).reshape(bf, l, d)
    return out @ layer.o.weight.data + layer.o.bias.data
