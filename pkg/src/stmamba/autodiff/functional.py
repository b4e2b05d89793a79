"""Neural-network ops built on :mod:`tensor`: normalization, convolution, FFT."""
from __future__ import annotations

import itertools

import numpy as np

from . import counters
from .tensor import ShapeError, Tensor, _make, as_tensor, repeat


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    x = a.data
    m = np.max(x, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0)
    e = np.exp(x - m)
    out = e / e.sum(axis=axis, keepdims=True)
    return _make(out, (a,), lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),))


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    x = a.data
    m = np.max(x, axis=axis, keepdims=True)
    lse = m + np.log(np.exp(x - m).sum(axis=axis, keepdims=True))
    out = x - lse
    sm = np.exp(out)
    return _make(out, (a,), lambda g: (g - sm * g.sum(axis=axis, keepdims=True),))


def layer_norm(a, eps: float = 1e-6) -> Tensor:
    """Normalize over the last axis (no affine; apply scale/shift separately)."""
    a = as_tensor(a)
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    out = xc * rstd

    def bw(g):
        gm = g.mean(axis=-1, keepdims=True)
        gxm = (g * out).mean(axis=-1, keepdims=True)
        return (rstd * (g - gm - out * gxm),)
    return _make(out, (a,), bw)


def rms_norm(a, eps: float = 1e-6) -> Tensor:
    a = as_tensor(a)
    x = a.data
    ms = (x * x).mean(axis=-1, keepdims=True)
    r = 1.0 / np.sqrt(ms + eps)
    out = x * r

    def bw(g):
        return (r * (g - out * (g * out).mean(axis=-1, keepdims=True)),)
    return _make(out, (a,), bw)


def linear(x, w, b=None) -> Tensor:
    """``x @ w + b`` with ``w`` shaped (d_in, d_out)."""
    y = as_tensor(x) @ w
    return y + b if b is not None else y


def dropout(a, p: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    a = as_tensor(a)
    if not training or p <= 0.0:
        return a
    if rng is None:
        raise ValueError("dropout in training mode needs a seeded generator")
    keep = (rng.random(a.shape) >= p).astype(a.dtype) / (1.0 - p)
    return _make(a.data * keep, (a,), lambda g: (g * keep,))


# -- convolution -----------------------------------------------------------
def conv(x, w, stride=1, padding=0) -> Tensor:
    """N-d cross-correlation, channels last.

    ``x``: (B, *spatial, C_in); ``w``: (*kernel, C_in, C_out). ``padding`` is
    an int, a per-dim int, or per-dim ``(before, after)`` pairs.
    """
    x, w = as_tensor(x), as_tensor(w)
    nd = w.ndim - 2
    if x.ndim != nd + 2:
        raise ShapeError(f"conv: input {x.shape} and kernel {w.shape} disagree on spatial rank")
    if x.shape[-1] != w.shape[-2]:
        raise ShapeError(f"conv: input channels {x.shape} vs kernel {w.shape}")
    stride = (stride,) * nd if isinstance(stride, int) else tuple(stride)
    if isinstance(padding, int):
        padding = ((padding, padding),) * nd
    padding = tuple((p, p) if isinstance(p, int) else tuple(p) for p in padding)
    ksz = w.shape[:nd]
    xp = np.pad(x.data, ((0, 0),) + padding + ((0, 0),))
    in_sp = xp.shape[1:-1]
    out_sp = tuple((n - k) // s + 1 for n, k, s in zip(in_sp, ksz, stride))
    if any(o <= 0 for o in out_sp):
        raise ShapeError(f"conv: kernel {ksz} larger than padded input {in_sp}")
    cin, cout = w.shape[-2], w.shape[-1]
    bsz = x.shape[0]
    out = np.zeros((bsz,) + out_sp + (cout,), dtype=np.result_type(x.dtype, w.dtype))
    offsets = list(itertools.product(*[range(k) for k in ksz]))

    def window(off):
        return (slice(None),) + tuple(slice(o, o + s * (n - 1) + 1, s) for o, s, n in zip(off, stride, out_sp)) + (slice(None),)

    wd = w.data
    for off in offsets:
        out += xp[window(off)] @ wd[off]
    counters.add_macs(int(np.prod(out.shape[:-1])) * len(offsets) * cin * cout)

    def bw(g):
        gx = gw = None
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for off in offsets:
                gxp[window(off)] += g @ wd[off].T
            sl = (slice(None),) + tuple(slice(lo, lo + n) for (lo, _), n in zip(padding, x.shape[1:-1])) + (slice(None),)
            gx = np.ascontiguousarray(gxp[sl])
        if w.requires_grad:
            gw = np.zeros_like(wd)
            g2 = g.reshape(-1, cout)
            for off in offsets:
                gw[off] = xp[window(off)].reshape(-1, cin).T @ g2
        return gx, gw
    return _make(out, (x, w), bw)


def conv2d(x, w, stride=1, padding=1) -> Tensor:
    """2-D conv on (B, H, W, C) with kernel (kh, kw, C_in, C_out)."""
    return conv(x, w, stride, padding)


def causal_conv3d(x, w, stride=(1, 1, 1)) -> Tensor:
    """3-D conv on (B, F, H, W, C); time is padded on the past side only.

    With temporal stride ``s`` the left pad is ``k_t - s`` so that output
    frame ``j`` ends exactly at input frame ``s*j + s - 1``.
    """
    kt, kh, kw = w.shape[:3]
    st = stride[0]
    if kt < st:
        raise ShapeError(f"causal_conv3d: temporal kernel {kt} shorter than stride {st}")
    padding = ((kt - st, 0), _same_pad(kh, stride[1]), _same_pad(kw, stride[2]))
    return conv(x, w, stride, padding)


def _same_pad(k: int, s: int) -> tuple[int, int]:
    total = max(k - s, 0)
    return total // 2, total - total // 2


def upsample_nearest(x, factors) -> Tensor:
    """Repeat each spatial entry of (B, *spatial, C) by ``factors`` per dim."""
    out = as_tensor(x)
    for ax, f in enumerate(factors, start=1):
        if f > 1:
            out = repeat(out, f, axis=ax)
    return out


# -- spectral ---------------------------------------------------------------
_ADJOINT_NORM = {"backward": "forward", "ortho": "ortho", "forward": "backward"}


def fft2(a, norm: str = "ortho") -> Tensor:
    """2-D DFT over the last two axes of a real tensor.

    Returns the complex spectrum as a real pair on a new trailing axis
    (``[..., 0]`` real, ``[..., 1]`` imaginary).
    """
    a = as_tensor(a)
    if a.ndim < 2:
        raise ShapeError(f"fft2 needs at least 2 axes, got {a.shape}")
    spec = np.fft.fft2(a.data, norm=norm)
    out = np.stack([spec.real, spec.imag], axis=-1).astype(a.dtype)

    def bw(g):
        gc = g[..., 0] + 1j * g[..., 1]
        return (np.fft.ifft2(gc, norm=_ADJOINT_NORM[norm]).real.astype(a.dtype),)
    return _make(out, (a,), bw)


def dft2_direct(x: np.ndarray, norm: str = "ortho") -> np.ndarray:
    """O(n^2) reference DFT over the last two axes (complex result)."""
    h, w = x.shape[-2:]
    fh = np.exp(-2j * np.pi * np.outer(np.arange(h), np.arange(h)) / h)
    fw = np.exp(-2j * np.pi * np.outer(np.arange(w), np.arange(w)) / w)
    out = fh @ x @ fw.T
    if norm == "ortho":
        out = out / np.sqrt(h * w)
    elif norm == "forward":
        out = out / (h * w)
    return out


# -- resampling ---------------------------------------------------------------
def linear_resize_matrix(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    """Half-pixel linear interpolation weights, shape (n_out, n_in)."""
    m = np.zeros((n_out, n_in), dtype=dtype)
    if n_in == n_out:
        np.fill_diagonal(m, 1.0)
        return m
    scale = n_in / n_out
    for i in range(n_out):
        src = (i + 0.5) * scale - 0.5
        src = min(max(src, 0.0), n_in - 1)
        lo = int(np.floor(src))
        hi = min(lo + 1, n_in - 1)
        frac = src - lo
        m[i, lo] += 1 - frac
        m[i, hi] += frac
    return m


def resize_first_axis(a, n_out: int) -> Tensor:
    """Bilinear (half-pixel) resize of the first axis of a 2-D matrix."""
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"resize_first_axis expects a 2-D matrix, got {a.shape}")
    m = linear_resize_matrix(a.shape[0], n_out, a.dtype)
    return Tensor(m) @ a
