"""Optical-flow utilities and the flow-representation alignment loss.

Flow fields are (F, 2, H, W) arrays of per-pixel displacement (u, v) in
pixels per frame, with u along columns (x) and v along rows (y).
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .autodiff import tensor as T
from .autodiff.functional import linear_resize_matrix
from .autodiff.serialization import FormatError

PEARSON_EPS = 1e-8


# -- geometry ---------------------------------------------------------------------
def flow_project(x, y, flow_k: np.ndarray):
    """Move integer pixel coordinates by the displacement stored at them.

    ``flow_k`` is (2, H, W). Results are not clamped to the frame.
    """
    x = np.asarray(x)
    y = np.asarray(y)
    return x + flow_k[0][y, x], y + flow_k[1][y, x]


def _grid(h: int, w: int):
    ys, xs = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    return xs, ys


def motion_map(kind: str, params: dict, h: int, w: int, steps: float = 1.0):
    """Exact rigid motion ``p -> p'`` after ``steps`` frames, as (x', y') arrays."""
    xs, ys = _grid(h, w)
    cx, cy = params.get("center", ((w - 1) / 2, (h - 1) / 2))
    if kind == "translation":
        u, v = params.get("velocity", (1.0, 0.0))
        return xs + steps * u, ys + steps * v
    if kind == "rotation":
        a = steps * params.get("omega", 0.0)
        dx, dy = xs - cx, ys - cy
        return cx + np.cos(a) * dx - np.sin(a) * dy, cy + np.sin(a) * dx + np.cos(a) * dy
    if kind == "zoom":
        s = (1.0 + params.get("rate", 0.0)) ** steps
        return cx + s * (xs - cx), cy + s * (ys - cy)
    raise ValueError(f"unknown motion kind {kind!r}")


def synthetic_flow(kind: str, params: dict, shape: tuple[int, int, int]) -> np.ndarray:
    """Analytic ground-truth flow (F, 2, H, W) for a constant motion.

    Translation is a constant field, rotation the rigid-rotation displacement
    about the centre (tangential, growing with radius), zoom a radial field.
    """
    n, h, w = shape
    xs, ys = _grid(h, w)
    x2, y2 = motion_map(kind, params, h, w)
    field = np.stack([x2 - xs, y2 - ys]).astype(np.float32)
    return np.broadcast_to(field, (n, 2, h, w)).copy()


def bilinear_sample(img: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Sample (C, H, W) at float coordinates with edge clamping."""
    c, h, w = img.shape
    x = np.clip(x, 0, w - 1)
    y = np.clip(y, 0, h - 1)
    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    x1, y1 = np.minimum(x0 + 1, w - 1), np.minimum(y0 + 1, h - 1)
    fx, fy = x - x0, y - y0
    top = img[:, y0, x0] * (1 - fx) + img[:, y0, x1] * fx
    bot = img[:, y1, x0] * (1 - fx) + img[:, y1, x1] * fx
    return top * (1 - fy) + bot * fy


def warp_forward(frame: np.ndarray, flow_k: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Predict the next frame by pulling from ``q - flow(q)``.

    Exact for the constant fields of translation clips (a first-order
    approximation otherwise). Returns the prediction and a mask of pixels
    whose source lies inside the frame.
    """
    c, h, w = frame.shape
    xs, ys = _grid(h, w)
    sx, sy = xs - flow_k[0], ys - flow_k[1]
    valid = (sx >= 0) & (sx <= w - 1) & (sy >= 0) & (sy <= h - 1)
    return bilinear_sample(frame, sx, sy), valid


# -- color encoding ----------------------------------------------------------------
def hsv_to_rgb(h: np.ndarray, s: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Vectorised HSV -> RGB with hue in degrees; returns (..., 3)."""
    hp = (np.asarray(h, dtype=np.float64) % 360.0) / 60.0
    c = v * s
    x = c * (1 - np.abs(hp % 2 - 1))
    z = np.zeros_like(c)
    sector = np.floor(hp).astype(np.int64) % 6
    table = [(c, x, z), (x, c, z), (z, c, x), (z, x, c), (x, z, c), (c, z, x)]
    rgb = np.zeros(np.shape(c) + (3,))
    for k, (r, g, b) in enumerate(table):
        m = sector == k
        rgb[m] = np.stack([r[m], g[m], b[m]], axis=-1)
    return rgb + (v - c)[..., None]


def flow_to_rgb(flow: np.ndarray) -> np.ndarray:
    """(F, 2, H, W) flow -> (F, 3, H, W) RGB in [0, 1].

    Hue from the full-quadrant angle, saturation 1, value = magnitude divided
    by the per-frame maximum (all-black for motionless frames).
    """
    flow = np.asarray(flow, dtype=np.float64)
    u, v = flow[:, 0], flow[:, 1]
    mag = np.sqrt(u * u + v * v)
    ang = np.mod(np.arctan2(v, u), 2 * np.pi)
    mmax = mag.reshape(len(mag), -1).max(axis=1)
    val = np.divide(mag, mmax[:, None, None], out=np.zeros_like(mag), where=mmax[:, None, None] > 0)
    rgb = hsv_to_rgb(ang / (2 * np.pi) * 360.0, np.ones_like(val), val)
    return np.clip(np.moveaxis(rgb, -1, 1), 0.0, 1.0)


# -- file format ---------------------------------------------------------------------
FLOW_MAGIC = b"MSFL"
FLOW_VERSION = 1


def dumps_flow(flow: np.ndarray) -> bytes:
    flow = np.asarray(flow, dtype="<f4")
    n, two, h, w = flow.shape
    if two != 2:
        raise ValueError(f"flow must be (F, 2, H, W), got {flow.shape}")
    return FLOW_MAGIC + struct.pack("<4I", FLOW_VERSION, n, h, w) + flow.tobytes()


def loads_flow(raw: bytes) -> np.ndarray:
    if raw[:4] != FLOW_MAGIC:
        raise FormatError("not a flow file (bad magic)")
    version, n, h, w = struct.unpack_from("<4I", raw, 4)
    if version != FLOW_VERSION:
        raise FormatError(f"unsupported flow file version {version}")
    body = raw[20:]
    if len(body) != n * 2 * h * w * 4:
        raise FormatError(f"flow payload has {len(body)} bytes, expected {n * 2 * h * w * 4}")
    return np.frombuffer(body, dtype="<f4").reshape(n, 2, h, w).astype(np.float32)


def save_flow(path, flow: np.ndarray):
    Path(path).write_bytes(dumps_flow(flow))


def load_flow(path) -> np.ndarray:
    return loads_flow(Path(path).read_bytes())


# -- frozen featurizer --------------------------------------------------------------
def _orthogonal(rng: np.random.Generator, n_in: int, n_out: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(size=(max(n_in, n_out), min(n_in, n_out))))
    q = q * np.sign(np.diag(r))
    return q if n_in >= n_out else q.T


def _smoothing_matrix(hb: int, wb: int) -> np.ndarray:
    """Row-normalised 3x3 neighbourhood average on a token grid."""
    n = hb * wb
    m = np.zeros((n, n))
    for i in range(hb):
        for j in range(wb):
            for di in (-1, 0, 1):
                for dj in (-1, 0, 1):
                    a, b = i + di, j + dj
                    if 0 <= a < hb and 0 <= b < wb:
                        m[i * wb + j, a * wb + b] = 1.0
    return m / m.sum(axis=1, keepdims=True)


class FrozenFeaturizer:
    """Seeded, never-trained multi-layer image feature extractor.

    Patch embedding by an orthogonal matrix, then ``layers`` rounds of
    orthogonal projection, tanh and neighbour smoothing; each round's output
    is one feature map of shape (tokens, width). Built on :class:`Tensor` so
    losses through it are differentiable in the input.
    """

    def __init__(self, image_hw=(32, 32), in_channels: int = 3, patch: int = 4, width: int = 32,
                 layers: int = 6, seed: int = 1234):
        h, w = image_hw
        if h % patch or w % patch:
            raise ValueError(f"image {h}x{w} not divisible by featurizer patch {patch}")
        rng = np.random.default_rng(seed)
        self.patch, self.in_channels, self.width, self.layers = patch, in_channels, width, layers
        self.grid = (h // patch, w // patch)
        d_in = in_channels * patch * patch
        self.embed = _orthogonal(rng, d_in, width) * np.sqrt(d_in / width) ** 0.5
        self.proj = [_orthogonal(rng, width, width) * 1.5 for _ in range(layers)]
        self.bias = [rng.normal(scale=0.1, size=width) for _ in range(layers)]
        self.smooth = _smoothing_matrix(*self.grid)

    @property
    def tokens(self) -> int:
        return self.grid[0] * self.grid[1]

    def __call__(self, images) -> list[Tensor]:
        """``images`` (N, C, H, W) in [0, 1] -> list of (N, tokens, width)."""
        x = T.as_tensor(images)
        n, c, h, w = x.shape
        dt = x.dtype
        p = self.patch
        x = x * 2.0 - 1.0
        x = T.reshape(x, (n, c, h // p, p, w // p, p))
        x = T.reshape(T.transpose(x, (0, 2, 4, 1, 3, 5)), (n, self.tokens, c * p * p))
        hcur = x @ Tensor(self.embed.astype(dt))
        out = []
        smooth = Tensor(self.smooth.astype(dt))
        for q, b in zip(self.proj, self.bias):
            hcur = T.tanh(hcur @ Tensor(q.astype(dt)) + Tensor(b.astype(dt)))
            hcur = smooth @ hcur
            out.append(hcur)
        return out


def perceptual_distance(feat: FrozenFeaturizer, x, y) -> Tensor:
    """Mean squared distance between featurizer maps, averaged over layers."""
    fx, fy = feat(x), feat(y)
    total = None
    for a, b in zip(fx, fy):
        d = a - b
        term = (d * d).mean()
        total = term if total is None else total + term
    return total * (1.0 / len(fx))


# -- sampling and alignment ------------------------------------------------------------
def frame_pool_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Average contiguous groups of input frames down to ``n_out`` frames."""
    if n_in % n_out:
        raise ValueError(f"cannot pool {n_in} frames into {n_out} equal groups")
    g = n_in // n_out
    m = np.zeros((n_out, n_in))
    for j in range(n_out):
        m[j, j * g:(j + 1) * g] = 1.0 / g
    return m


def channel_projection(width: int, d: int, seed: int = 4321) -> np.ndarray:
    rng = np.random.default_rng(seed)
    if width == d:
        return np.eye(d)
    return rng.normal(scale=1.0 / np.sqrt(width), size=(width, d))


def sample_features(h, n_positions: int, proj) -> Tensor:
    """Linearly resize the token axis of (..., N, K) to ``n_positions``, then project K -> d."""
    h = T.as_tensor(h)
    m = linear_resize_matrix(h.shape[-2], n_positions, h.dtype)
    return Tensor(m) @ h @ T.as_tensor(np.asarray(proj, dtype=h.dtype))


def alignment_r(y, h) -> Tensor:
    """1 - Pearson correlation per channel over the position axis.

    ``y`` and ``h`` are (..., K, d); result is (..., d).
    """
    y, h = T.as_tensor(y), T.as_tensor(h)
    if y.shape != h.shape:
        raise ValueError(f"alignment inputs differ: {y.shape} vs {h.shape}")
    if y.shape[-2] < 2:
        raise ValueError("correlation needs at least two positions")
    yc = y - y.mean(axis=-2, keepdims=True)
    hc = h - h.mean(axis=-2, keepdims=True)
    cov = (yc * hc).sum(axis=-2)
    var = (yc * yc).sum(axis=-2) * (hc * hc).sum(axis=-2)
    den = T.sqrt(T.maximum(var, PEARSON_EPS ** 2))
    return 1.0 - cov / den


def alignment_loss(r, t, margin: float = 0.0, g=None) -> Tensor:
    """max(mean(g(t) * r) - margin, 0) for one sample."""
    from .diffusion import noise_weight
    g = noise_weight if g is None else g
    r = T.as_tensor(r)
    return T.relu(r.mean() * float(g(t)) - margin)


def default_layer_map(n_blocks: int, n_layers: int) -> list[int]:
    return [i * n_layers // n_blocks for i in range(n_blocks)]


def alignment_loss_batch(features, targets, t, margin: float = 0.0, layer_map=None, g=None) -> Tensor:
    """Per-sample hinge of the weighted mean r over blocks, frames and channels, then batch mean.

    ``features``: per-block video tokens (b, f, l, d); ``targets``: per
    featurizer layer sampled flow features of the same shape.
    """
    from .diffusion import noise_weight
    g = noise_weight if g is None else g
    layer_map = default_layer_map(len(features), len(targets)) if layer_map is None else layer_map
    rs = [alignment_r(y, targets[layer_map[i]]) for i, y in enumerate(features)]   # (b, f, d) each
    r = T.stack(rs, axis=1)                                                        # (b, L, f, d)
    b = r.shape[0]
    per = T.reshape(r, (b, -1)).mean(axis=1)
    w = Tensor(np.broadcast_to(g(np.asarray(t)), (b,)).astype(per.dtype))
    return T.relu(per * w - margin).mean()


def flow_targets(flow: np.ndarray, featurizer: FrozenFeaturizer, n_frames: int, n_positions: int,
                 proj: np.ndarray) -> list[np.ndarray]:
    """Precompute sampled flow features for one clip: list over layers of (f, l, d)."""
    rgb = flow_to_rgb(flow).astype(np.float64)
    maps = featurizer(rgb)
    pool = frame_pool_matrix(len(flow), n_frames)
    out = []
    for m in maps:
        pooled = np.einsum("gf,fnk->gnk", pool, m.data)
        out.append(sample_features(pooled, n_positions, proj).data.astype(np.float32))
    return out
