"""Spatio-temporal denoiser: spiral-scan spatial Mamba, windowed attention,
frame-axis Mamba, patch embedding and the analytic FLOP model.

Token tensors are laid out (b, f, l, d) with ``l = hb * wb`` tokens per frame
stored row-major (row = height index).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .attention import LocalAttention
from .autodiff import Module, Parameter, Tensor, counters
from .autodiff import tensor as T
from .autodiff.nn import Linear
from .ssd import MambaLayer


# -- spiral ordering ---------------------------------------------------------
def spiral_order(rows: int, cols: int) -> np.ndarray:
    """Flat indices of an inward clockwise spiral starting at the top-left cell."""
    if rows < 1 or cols < 1:
        raise ValueError(f"grid must be at least 1x1, got {rows}x{cols}")
    top, bottom, left, right = 0, rows - 1, 0, cols - 1
    out = []
    while top <= bottom and left <= right:
        out.extend(top * cols + c for c in range(left, right + 1))
        out.extend(r * cols + right for r in range(top + 1, bottom + 1))
        if top < bottom:
            out.extend(bottom * cols + c for c in range(right - 1, left - 1, -1))
        if left < right:
            out.extend(r * cols + left for r in range(bottom - 1, top, -1))
        top, bottom, left, right = top + 1, bottom - 1, left + 1, right - 1
    return np.array(out, dtype=np.int64)


def spiral_inverse(order: np.ndarray) -> np.ndarray:
    return np.argsort(order, kind="stable")


def token_grid(l: int, grid: tuple[int, int] | None = None) -> tuple[int, int]:
    if grid is not None:
        hb, wb = grid
        if hb * wb != l:
            raise ValueError(f"grid {hb}x{wb} does not hold {l} tokens")
        return hb, wb
    side = math.isqrt(l)
    if side * side != l:
        raise ValueError(f"{l} tokens per frame is not a square grid; pass an explicit (rows, cols)")
    return side, side


def spatial_mamba_branch(z, axis: str, layer, grid: tuple[int, int] | None = None) -> Tensor:
    """Bidirectional spiral scan of ``z`` (b, f, l, d) along one spatial axis.

    ``axis="width"`` scans sequences of shape (b*hb, f*wb, d) and ``"height"``
    scans (b*wb, f*hb, d). The spiral runs over the (f x cols) grid; ``layer``
    sees the spiral order and its reverse, and both results are restored and
    summed.
    """
    z = T.as_tensor(z)
    b, f, l, d = z.shape
    hb, wb = token_grid(l, grid)
    zg = T.reshape(z, (b, f, hb, wb, d))
    if axis == "width":
        seq = T.reshape(T.transpose(zg, (0, 2, 1, 3, 4)), (b * hb, f * wb, d))
        cols = wb
    elif axis == "height":
        seq = T.reshape(T.transpose(zg, (0, 3, 1, 2, 4)), (b * wb, f * hb, d))
        cols = hb
    else:
        raise ValueError(f"axis must be 'width' or 'height', got {axis!r}")
    order = spiral_order(f, cols)
    inv = spiral_inverse(order)
    fwd = T.take(seq, order, axis=1)
    n = seq.shape[0]
    both = layer(T.concat([fwd, T.flip(fwd, 1)], axis=0))
    y = both[:n] + T.flip(both[n:], 1)
    y = T.take(y, inv, axis=1)
    if axis == "width":
        y = T.transpose(T.reshape(y, (b, hb, f, wb, d)), (0, 2, 1, 3, 4))
    else:
        y = T.transpose(T.reshape(y, (b, wb, f, hb, d)), (0, 2, 3, 1, 4))
    return T.reshape(y, (b, f, l, d))


def temporal_mamba(z, layer) -> Tensor:
    """Forward scan across frames for every spatial token: (b, f, l, d) -> same."""
    z = T.as_tensor(z)
    b, f, l, d = z.shape
    seq = T.reshape(T.transpose(z, (0, 2, 1, 3)), (b * l, f, d))
    y = layer(seq)
    return T.transpose(T.reshape(y, (b, l, f, d)), (0, 2, 1, 3))


class GatedFuse(Module):
    """sigmoid(W1 y_w + b1) * y_w + sigmoid(W2 y_h + b2) * y_h."""

    def __init__(self, d: int, rng: np.random.Generator, dtype=np.float32):
        self.gate_w = Linear(d, d, rng, dtype=dtype)
        self.gate_h = Linear(d, d, rng, dtype=dtype)

    def forward(self, y_w, y_h) -> Tensor:
        y_w, y_h = T.as_tensor(y_w), T.as_tensor(y_h)
        if y_w.shape != y_h.shape:
            raise ad.ShapeError(f"gated fuse: width branch {y_w.shape} vs height branch {y_h.shape}")
        return T.sigmoid(self.gate_w(y_w)) * y_w + T.sigmoid(self.gate_h(y_h)) * y_h


# -- patch embedding -----------------------------------------------------------
def patchify_layout(latent: np.ndarray | Tensor, p: int) -> Tensor:
    """(b, f, c, H, W) -> (b, f, (H/p)(W/p), p*p*c)."""
    x = T.as_tensor(latent)
    b, f, c, h, w = x.shape
    if h % p or w % p:
        raise ValueError(f"latent {h}x{w} is not divisible by patch size {p}")
    x = T.reshape(x, (b, f, c, h // p, p, w // p, p))
    x = T.transpose(x, (0, 1, 3, 5, 4, 6, 2))
    return T.reshape(x, (b, f, (h // p) * (w // p), p * p * c))


def unpatchify_layout(tokens, p: int, c: int, h: int, w: int) -> Tensor:
    x = T.as_tensor(tokens)
    b, f = x.shape[:2]
    x = T.reshape(x, (b, f, h // p, w // p, p, p, c))
    x = T.transpose(x, (0, 1, 6, 2, 4, 3, 5))
    return T.reshape(x, (b, f, c, h, w))


def sincos_1d(n: int, d: int) -> np.ndarray:
    pos = np.arange(n, dtype=np.float64)[:, None]
    freq = 1.0 / 10000 ** (np.arange(d // 2, dtype=np.float64) / (d // 2))
    ang = pos * freq[None]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


def sincos_2d(hb: int, wb: int, d: int) -> np.ndarray:
    rows = np.repeat(sincos_1d(hb, d // 2), wb, axis=0)
    cols = np.tile(sincos_1d(wb, d // 2), (hb, 1))
    return np.concatenate([rows, cols], axis=1)


def timestep_embedding(t, dim: int = 256, max_period: float = 10000.0) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    half = dim // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half) / half)
    args = t[:, None] * freqs[None]
    return np.concatenate([np.cos(args), np.sin(args)], axis=1)


# -- block ------------------------------------------------------------------------
@dataclass
class ModelConfig:
    in_channels: int = 8
    latent_hw: tuple[int, int] = (8, 8)
    patch: int = 1
    strip: int = 1
    d: int = 128
    depth: int = 4
    heads: int = 4
    window: int = 8
    dropout: float = 0.1
    d_state: int = 16
    expand: int = 2
    head_dim: int = 64
    conv_width: int = 4
    chunk_size: int = 256
    parallel_spatial: bool = True
    grid: tuple[int, int] | None = None
    freq_dim: int = 256

    @property
    def tokens_per_frame(self) -> int:
        h, w = self.latent_hw
        return (h // self.patch) * (w // self.patch)

    def token_grid(self) -> tuple[int, int]:
        return token_grid(self.tokens_per_frame, self.grid)


N_MOD = 9   # (shift, scale, gate) for attention, spatial Mamba, temporal Mamba


def modulate(x: Tensor, shift: Tensor, scale: Tensor) -> Tensor:
    return x * (1.0 + scale) + shift


class SpatioTemporalBlock(Module):
    """Pre-norm residual block: spatial component, then temporal scan.

    ``cond`` is (B, 9, d) modulation; the last axis of the 9 is split into
    (shift, scale, gate) triples for attention, spatial Mamba and temporal
    Mamba. Output projections start at zero so the block is the identity at
    init.
    """

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, dtype=np.float32):
        d = cfg.d
        self.cfg = cfg
        self.attn = LocalAttention(d, cfg.heads, cfg.window, cfg.dropout, rng, zero_out=True, dtype=dtype)

        def mamba():
            m = MambaLayer(d, cfg.d_state, cfg.expand, cfg.head_dim, cfg.conv_width, cfg.chunk_size, rng, dtype)
            m.out_proj.weight.data[:] = 0
            return m
        self.mamba_w = mamba()
        self.mamba_h = mamba()
        self.mamba_t = mamba()
        self.fuse = GatedFuse(d, rng, dtype)
        self.table = Parameter((rng.normal(size=(N_MOD, d)) / math.sqrt(d)).astype(dtype))

    def spatial_mamba(self, x: Tensor) -> Tensor:
        grid = self.cfg.grid
        y_w = spatial_mamba_branch(x, "width", self.mamba_w, grid)
        y_h = spatial_mamba_branch(x, "height", self.mamba_h, grid)
        return self.fuse(y_w, y_h)

    def forward(self, z, cond, rng: np.random.Generator | None = None, capture: list | None = None) -> Tensor:
        z = T.as_tensor(z)
        b, f, l, d = z.shape
        mod = cond + self.table                                     # (b, 9, d)
        m = [T.reshape(mod[:, i], (b, 1, 1, d)) for i in range(N_MOD)]

        def attn_update(x):
            h = modulate(ad.layer_norm(x), m[0], m[1])
            a = self.attn(T.reshape(h, (b * f, l, d)), rng)
            return m[2] * T.reshape(a, (b, f, l, d))

        def mamba_update(x):
            h = modulate(ad.layer_norm(x), m[3], m[4])
            return m[5] * self.spatial_mamba(h)

        if self.cfg.parallel_spatial:
            z = z + attn_update(z) + mamba_update(z)
        else:
            z = z + attn_update(z)
            z = z + mamba_update(z)
        if capture is not None:
            capture.append(z)
        h = modulate(ad.layer_norm(z), m[6], m[7])
        return z + m[8] * temporal_mamba(h, self.mamba_t)


class TimestepEmbedder(Module):
    def __init__(self, d: int, freq_dim: int, rng: np.random.Generator, dtype=np.float32):
        self.freq_dim = freq_dim
        self.fc1 = Linear(freq_dim, d, rng, dtype=dtype)
        self.fc2 = Linear(d, d, rng, dtype=dtype)
        self.dtype = dtype

    def forward(self, t) -> Tensor:
        e = Tensor(timestep_embedding(t, self.freq_dim).astype(self.dtype))
        return self.fc2(T.silu(self.fc1(e)))


class Denoiser(Module):
    """Noise predictor over video latents with optional appended still images.

    Video frames form one clip; each appended image is processed as its own
    single-frame clip with the same weights, so video outputs never depend on
    the images.
    """

    def __init__(self, cfg: ModelConfig, seed: int = 0, dtype=np.float32):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        d, p, c = cfg.d, cfg.patch, cfg.in_channels
        hb, wb = cfg.token_grid()
        self.embed = Linear(p * p * c, d, rng, dtype=dtype)
        self.pos = sincos_2d(hb, wb, d).astype(dtype)
        self.t_embed = TimestepEmbedder(d, cfg.freq_dim, rng, dtype)
        self.t_mod = Linear(d, N_MOD * d, rng, dtype=dtype)
        self.blocks = [SpatioTemporalBlock(cfg, rng, dtype) for _ in range(cfg.depth)]
        self.final_table = Parameter((rng.normal(size=(2, d)) / math.sqrt(d)).astype(dtype))
        self.head = Linear(d, p * p * c, rng, zero=True, dtype=dtype)
        self.dtype = dtype

    def frame_pos(self, f: int) -> np.ndarray:
        return sincos_1d(f, self.cfg.d).astype(self.dtype)

    def _run(self, lat: Tensor, temb: Tensor, rng, capture):
        cfg = self.cfg
        b, f, c, h, w = lat.shape
        x = self.embed(patchify_layout(lat, cfg.patch))
        x = x + self.pos + T.reshape(Tensor(self.frame_pos(f)), (1, f, 1, cfg.d))
        cond = T.reshape(self.t_mod(T.silu(temb)), (b, N_MOD, cfg.d))
        for blk in self.blocks:
            x = blk(x, cond, rng, capture)
        t4 = T.reshape(temb, (b, 1, 1, cfg.d))
        shift = T.reshape(self.final_table[0], (1, 1, 1, cfg.d)) + t4
        scale = T.reshape(self.final_table[1], (1, 1, 1, cfg.d)) + t4
        x = modulate(ad.layer_norm(x), shift, scale)
        return unpatchify_layout(self.head(x), cfg.patch, c, h, w)

    def forward(self, z_video, t, z_images=None, rng: np.random.Generator | None = None,
                return_features: bool = False):
        """``z_video`` (b, f, c, H, W), ``z_images`` (b, m, c, H, W) or None, ``t`` (b,).

        Returns ``(eps_video, eps_images, features)`` where ``features`` holds
        the per-block video tokens after the spatial update (b, f, l, d).
        """
        zv = T.as_tensor(z_video)
        b = zv.shape[0]
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (b,))
        temb = self.t_embed(t)
        feats: list | None = [] if return_features else None
        eps_v = self._run(zv, temb, rng, feats)
        eps_i = None
        if z_images is not None:
            zi = T.as_tensor(z_images)
            m = zi.shape[1]
            if m:
                zi1 = T.reshape(zi, (b * m, 1) + zi.shape[2:])
                temb_i = T.reshape(T.broadcast_to(T.reshape(temb, (b, 1, self.cfg.d)), (b, m, self.cfg.d)),
                                   (b * m, self.cfg.d))
                eps_i = T.reshape(self._run(zi1, temb_i, rng, None), zi.shape)
        return eps_v, eps_i, feats


# -- FLOP model and attention baseline ---------------------------------------------------
def flops_model(f: int, l: int, d: int, w: int, n_state: int) -> dict[str, int]:
    """Closed-form costs of one block: ours vs. full spatio-temporal attention."""
    f, l, d, w, n = (int(v) for v in (f, l, d, w, n_state))
    if min(f, l, d, w, n) < 1:
        raise ValueError("all arguments must be positive integers")
    ours = 4 * f * l * d * d + 2 * f * l * w * d + 18 * f * l * d * n + 6 * f * l * d * n * n
    baseline = 8 * f * l * d * d + 2 * f * l * l * d + 2 * l * f * f * d
    return {"ours": ours, "st_attention": baseline}


class DenseAttention(Module):
    """Plain multi-head attention over (B, T, d); the cost reference only."""

    def __init__(self, d: int, heads: int, rng: np.random.Generator, dtype=np.float32):
        self.d, self.heads = d, heads
        self.qkv = Linear(d, 3 * d, rng, dtype=dtype)
        self.o = Linear(d, d, rng, dtype=dtype)

    def forward(self, x) -> Tensor:
        x = T.as_tensor(x)
        n, t, d = x.shape
        dk = d // self.heads
        qkv = T.transpose(T.reshape(self.qkv(x), (n, t, 3, self.heads, dk)), (2, 0, 3, 1, 4))
        q, k, v = qkv[0], qkv[1], qkv[2]
        with counters.category("attention"):
            s = (q @ T.swapaxes(k, -1, -2)) * (1.0 / math.sqrt(dk))
            out = ad.softmax(s) @ v
        out = T.reshape(T.transpose(out, (0, 2, 1, 3)), (n, t, d))
        return self.o(out)


class STAttentionBlock(Module):
    """Spatial attention over l tokens then temporal attention over f frames."""

    def __init__(self, d: int, heads: int, rng: np.random.Generator, dtype=np.float32):
        self.spatial = DenseAttention(d, heads, rng, dtype)
        self.temporal = DenseAttention(d, heads, rng, dtype)

    def forward(self, z) -> Tensor:
        z = T.as_tensor(z)
        b, f, l, d = z.shape
        z = z + T.reshape(self.spatial(T.reshape(z, (b * f, l, d))), (b, f, l, d))
        zt = T.reshape(T.transpose(z, (0, 2, 1, 3)), (b * l, f, d))
        zt = T.transpose(T.reshape(self.temporal(zt), (b, l, f, d)), (0, 2, 1, 3))
        return z + zt
