"""Scalar-decay state-space scans.

Three evaluations of the same map y = M x, where
M[i, j] = C_i . B_j * A_{j+1} ... A_i for i >= j:

* :func:`ssd_recurrence`: the left-to-right state update (numpy oracle).
* :func:`ssd_materialize`: the dense lower-triangular matrix (numpy oracle).
* :func:`ssd_chunked`: blocked evaluation on :class:`Tensor` so it is
  differentiable. Inside a chunk the matrix form is used, and between
  chunks the state is carried forward by the recurrence.

All three share a layout: ``A`` is (..., T), ``B`` and ``C`` are (..., T, N),
``x`` is (..., T, P), and leading dims broadcast.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Module, Parameter, Tensor
from .autodiff import tensor as T
from .autodiff.nn import Linear, init_ones, init_zeros

MATERIALIZE_CAP = 512


@dataclass
class SSDParams:
    A: object
    B: object
    C: object
    dt: object = None


def _np(a) -> np.ndarray:
    return a.data if isinstance(a, Tensor) else np.asarray(a)


def ssd_recurrence(A, B, C, x) -> np.ndarray:
    A, B, C, x = _np(A), _np(B), _np(C), _np(x)
    n_steps = x.shape[-2]
    lead = np.broadcast_shapes(A.shape[:-1], B.shape[:-2], C.shape[:-2], x.shape[:-2])
    dtype = np.result_type(A, B, C, x)
    y = np.zeros(lead + x.shape[-2:], dtype=dtype)
    if n_steps == 0:
        return y
    h = np.zeros(lead + (B.shape[-1], x.shape[-1]), dtype=dtype)
    for t in range(n_steps):
        h = A[..., t, None, None] * h + B[..., t, :, None] * x[..., t, None, :]
        y[..., t, :] = np.einsum("...n,...np->...p", C[..., t, :], h)
    return y


def ssd_materialize(A, B, C) -> np.ndarray:
    """Dense (..., T, T) semiseparable matrix. Oracle only, so T is capped."""
    A, B, C = _np(A), _np(B), _np(C)
    n_steps = A.shape[-1]
    if n_steps > MATERIALIZE_CAP:
        raise ValueError(f"ssd_materialize is an O(T^2) oracle; T={n_steps} exceeds {MATERIALIZE_CAP}")
    # decay[..., i, j] = A_{j+1} * ... * A_i for j <= i, built row by row so A_t = 0 is exact
    decay = np.zeros(A.shape[:-1] + (n_steps, n_steps), dtype=A.dtype)
    row = np.zeros(A.shape[:-1] + (n_steps,), dtype=A.dtype)
    for i in range(n_steps):
        row = row * A[..., i, None]
        row[..., i] = 1.0
        decay[..., i, :] = row
    cb = np.einsum("...in,...jn->...ij", C, B)
    return cb * decay


def _segment_decay(log_a: Tensor) -> Tensor:
    """exp of segment sums: out[..., i, j] = prod_{k=j+1..i} a_k, zero above the diagonal.

    Built from a masked cumsum rather than differences of cumsums so that
    a_k = 0 (log = -inf) stays exact.
    """
    q = log_a.shape[-1]
    strict = np.tril(np.ones((q, q), dtype=bool), -1)
    lower = np.tril(np.ones((q, q), dtype=bool), 0)
    rows = T.broadcast_to(T.reshape(log_a, log_a.shape + (1,)), log_a.shape + (q,))
    rows = T.where(strict, rows, 0.0)
    seg = T.cumsum(rows, axis=-2)
    seg = T.where(lower, seg, -np.inf)
    return T.exp(seg)


def ssd_chunked(A, B, C, x, chunk_size: int = 256) -> Tensor:
    if chunk_size < 1:
        raise ValueError(f"chunk_size must be >= 1, got {chunk_size}")
    A, B, C, x = (T.as_tensor(a) for a in (A, B, C, x))
    n_steps = x.shape[-2]
    if n_steps == 0:
        lead = np.broadcast_shapes(A.shape[:-1], B.shape[:-2], C.shape[:-2], x.shape[:-2])
        return Tensor(np.zeros(lead + x.shape[-2:], dtype=x.dtype))
    q = min(chunk_size, n_steps)
    n_chunks = -(-n_steps // q)
    pad = n_chunks * q - n_steps
    log_a = T.log(A)
    if pad:
        # padded steps carry the state unchanged and contribute nothing
        log_a = T.pad(log_a, [(0, 0)] * (log_a.ndim - 1) + [(0, pad)])
        B = T.pad(B, [(0, 0)] * (B.ndim - 2) + [(0, pad), (0, 0)])
        C = T.pad(C, [(0, 0)] * (C.ndim - 2) + [(0, pad), (0, 0)])
        x = T.pad(x, [(0, 0)] * (x.ndim - 2) + [(0, pad), (0, 0)])

    def chunks(t, trailing):
        lead = t.shape[:t.ndim - trailing - 1]
        return T.reshape(t, lead + (n_chunks, q) + t.shape[t.ndim - trailing:])

    log_a, B, C, x = chunks(log_a, 0), chunks(B, 1), chunks(C, 1), chunks(x, 1)
    decay = _segment_decay(log_a)                       # (..., c, q, q)
    a_first = T.exp(log_a[..., :1])                     # (..., c, 1)

    # intra-chunk: dense masked matrix on each block
    scores = C @ T.swapaxes(B, -1, -2) * decay
    y_diag = scores @ x

    # contribution of each chunk to its closing state
    to_end = decay[..., q - 1, :]                       # (..., c, q)
    states = T.swapaxes(B * T.reshape(to_end, to_end.shape + (1,)), -1, -2) @ x   # (..., c, n, p)
    chunk_decay = to_end[..., :1] * a_first            # (..., c, 1) total product over the chunk

    # carry states across chunks in ascending order
    lead = np.broadcast_shapes(states.shape[:-3], chunk_decay.shape[:-2])
    h = Tensor(np.zeros(lead + states.shape[-2:], dtype=states.dtype))
    incoming = []
    for c in range(n_chunks):
        incoming.append(h)
        h = T.reshape(chunk_decay[..., c, :], chunk_decay.shape[:-2] + (1, 1)) * h + states[..., c, :, :]
    h_in = T.stack(incoming, axis=-3)                   # (..., c, n, p)

    from_start = decay[..., :, 0] * a_first             # (..., c, q)
    y_off = (C * T.reshape(from_start, from_start.shape + (1,))) @ h_in
    y = y_diag + y_off
    y = T.reshape(y, y.shape[:-3] + (n_chunks * q, y.shape[-1]))
    return y[..., :n_steps, :] if pad else y


# -- selective parameterization ---------------------------------------------
def inverse_softplus(y: np.ndarray) -> np.ndarray:
    return y + np.log(-np.expm1(-y))


class Selective(Module):
    """Input-dependent (A, B, C, dt) for a multi-head scalar SSD.

    ``x`` (..., T, d_inner) -> A (..., H, T), B (..., H, T, N) already scaled
    by dt, C (..., 1, T, N) shared across heads.
    """

    def __init__(self, d_inner: int, d_state: int, n_heads: int, rng: np.random.Generator,
                 dt_min: float = 1e-3, dt_max: float = 0.1, dt_floor: float = 1e-4,
                 a_range=(1.0, 16.0), dtype=np.float32):
        self.d_state, self.n_heads = d_state, n_heads
        self.dt_min, self.dt_max = dt_min, dt_max
        self.proj_b = Linear(d_inner, d_state, rng, bias=False, dtype=dtype)
        self.proj_c = Linear(d_inner, d_state, rng, bias=False, dtype=dtype)
        self.proj_dt = Linear(d_inner, n_heads, rng, bias=False, dtype=dtype)
        self.proj_dt.weight.data *= 0.1
        dt = np.exp(rng.uniform(np.log(dt_min), np.log(dt_max), size=n_heads))
        dt = np.maximum(dt, dt_floor)
        self.dt_bias = Parameter(inverse_softplus(dt).astype(dtype))
        self.a_log = Parameter(np.log(rng.uniform(*a_range, size=n_heads)).astype(dtype))

    def forward(self, x) -> SSDParams:
        x = T.as_tensor(x)
        dt = T.clip(T.softplus(self.proj_dt(x) + self.dt_bias), self.dt_min, self.dt_max)
        dt = T.swapaxes(dt, -1, -2)                      # (..., H, T)
        a = T.exp(self.a_log)
        A = T.exp(-(dt * T.reshape(a, (self.n_heads, 1))))
        b = self.proj_b(x)
        c = self.proj_c(x)
        b = T.reshape(b, b.shape[:-2] + (1,) + b.shape[-2:])
        c = T.reshape(c, c.shape[:-2] + (1,) + c.shape[-2:])
        B = b * T.reshape(dt, dt.shape + (1,))
        return SSDParams(A=A, B=B, C=c, dt=dt)


class MambaLayer(Module):
    """Gated scalar-SSD mixer over (batch, T, d) sequences.

    in-projection to (x, z) with expansion, causal depthwise conv + SiLU on x,
    selective SSD with a per-head skip, RMS norm gated by SiLU(z), out-projection.
    """

    def __init__(self, d_model: int, d_state: int = 16, expand: int = 2, head_dim: int = 64,
                 conv_width: int = 4, chunk_size: int = 256, rng: np.random.Generator | None = None,
                 dtype=np.float32):
        rng = rng if rng is not None else np.random.default_rng(0)
        d_inner = expand * d_model
        head_dim = min(head_dim, d_inner)
        if d_inner % head_dim:
            raise ValueError(f"inner width {d_inner} not divisible by head dim {head_dim}")
        self.d_inner, self.head_dim = d_inner, head_dim
        self.n_heads = d_inner // head_dim
        self.chunk_size = chunk_size
        self.in_proj = Linear(d_model, 2 * d_inner, rng, bias=False, dtype=dtype)
        bound = 1.0 / np.sqrt(conv_width)
        self.conv_w = Parameter(rng.uniform(-bound, bound, size=(conv_width, d_inner)).astype(dtype))
        self.conv_b = init_zeros((d_inner,), dtype)
        self.select = Selective(d_inner, d_state, self.n_heads, rng, dtype=dtype)
        self.skip = init_ones((self.n_heads,), dtype)
        self.norm_w = init_ones((d_inner,), dtype)
        self.out_proj = Linear(d_inner, d_model, rng, bias=False, dtype=dtype)

    def _causal_depthwise(self, x: Tensor) -> Tensor:
        k = self.conv_w.shape[0]
        n = x.shape[-2]
        xp = T.pad(x, [(0, 0)] * (x.ndim - 2) + [(k - 1, 0), (0, 0)])
        out = None
        for i in range(k):
            term = xp[..., i:i + n, :] * self.conv_w[i]
            out = term if out is None else out + term
        return out + self.conv_b

    def forward(self, u) -> Tensor:
        u = T.as_tensor(u)
        xz = self.in_proj(u)
        x, z = xz[..., :self.d_inner], xz[..., self.d_inner:]
        x = T.silu(self._causal_depthwise(x))
        p = self.select(x)
        lead = x.shape[:-1]
        xh = T.reshape(x, lead + (self.n_heads, self.head_dim))
        xh = T.moveaxis(xh, -2, -3)                      # (..., H, T, P)
        y = ssd_chunked(p.A, p.B, p.C, xh, self.chunk_size)
        y = y + xh * T.reshape(self.skip, (self.n_heads, 1, 1))
        y = T.reshape(T.moveaxis(y, -3, -2), lead + (self.d_inner,))
        y = ad.rms_norm(y * T.silu(z)) * self.norm_w
        return self.out_proj(y)


def mamba_layer(d_model: int, **kwargs) -> MambaLayer:
    return MambaLayer(d_model, **kwargs)
