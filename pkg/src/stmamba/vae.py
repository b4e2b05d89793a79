"""Small causal video autoencoder with frequency-compensation blocks.

Videos enter as (B, F, C, H, W) in [0, 1]; internally everything is
channels-last (B, F, H, W, C). Temporal convolutions only look at past
frames, so latent frame ``j`` depends on input frames ``<= s*j + s - 1``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Module, Parameter, Tensor
from .autodiff import tensor as T
from .autodiff.nn import init_zeros
from .flow import FrozenFeaturizer, perceptual_distance


LOGVAR_INIT = -8.0


@dataclass
class VAEConfig:
    in_channels: int = 3
    latent_channels: int = 8
    widths: tuple[int, int] = (16, 64)
    spatial_factor: int = 4
    temporal_factor: int = 2
    spatial_comp: bool = True
    spatiotemporal_comp: bool = True

    def latent_shape(self, frames: int, h: int, w: int) -> tuple[int, int, int, int]:
        self.check_input(frames, h, w)
        s, t = self.spatial_factor, self.temporal_factor
        return frames // t, self.latent_channels, h // s, w // s

    def check_input(self, frames: int, h: int, w: int):
        s, t = self.spatial_factor, self.temporal_factor
        if frames % t or h % s or w % s:
            raise ValueError(f"input (F={frames}, H={h}, W={w}) not divisible by compression ({t}, {s}, {s})")


def _kernel(rng, shape, gain=1.0, dtype=np.float32) -> Parameter:
    fan_in = int(np.prod(shape[:-1]))
    return Parameter((rng.normal(size=shape) * gain / np.sqrt(fan_in)).astype(dtype))


class FrameConv(Module):
    """2-D convolution applied to every frame independently."""

    def __init__(self, cin, cout, rng, k=3, stride=1, zero=False, dtype=np.float32):
        self.stride, self.pad = stride, k // 2
        self.w = init_zeros((k, k, cin, cout), dtype) if zero else _kernel(rng, (k, k, cin, cout), dtype=dtype)
        self.b = init_zeros((cout,), dtype)

    def forward(self, x) -> Tensor:
        x = T.as_tensor(x)
        b, f, h, w, c = x.shape
        y = ad.conv(T.reshape(x, (b * f, h, w, c)), self.w, self.stride, self.pad)
        return T.reshape(y, (b, f) + y.shape[1:]) + self.b


class CausalConv(Module):
    def __init__(self, cin, cout, rng, k=(3, 3, 3), stride=(1, 1, 1), zero=False, dtype=np.float32):
        self.stride = stride
        self.w = init_zeros(k + (cin, cout), dtype) if zero else _kernel(rng, k + (cin, cout), dtype=dtype)
        self.b = init_zeros((cout,), dtype)

    def forward(self, x) -> Tensor:
        return ad.causal_conv3d(x, self.w, self.stride) + self.b


class ResBlock(Module):
    def __init__(self, cin, cout, rng, causal: bool, dtype=np.float32):
        conv = (lambda a, b, **kw: CausalConv(a, b, rng, dtype=dtype, **kw)) if causal else \
            (lambda a, b, **kw: FrameConv(a, b, rng, dtype=dtype, **kw))
        self.c1 = conv(cin, cout)
        self.c2 = conv(cout, cout)
        self.skip = FrameConv(cin, cout, rng, k=1, dtype=dtype) if cin != cout else None

    def forward(self, x) -> Tensor:
        h = self.c1(T.silu(x))
        h = self.c2(T.silu(h))
        return (self.skip(x) if self.skip is not None else x) + h


class FreqCompBlock(Module):
    """Residual two-conv block; the second conv starts at zero so the block is the identity.

    ``kind="spatial2d"`` uses per-frame 2-D convs, ``"spatiotemporal3d"`` causal 3-D convs.
    """

    def __init__(self, c, rng, kind: str, dtype=np.float32):
        if kind == "spatial2d":
            self.c1 = FrameConv(c, c, rng, dtype=dtype)
            self.c2 = FrameConv(c, c, rng, zero=True, dtype=dtype)
        elif kind == "spatiotemporal3d":
            self.c1 = CausalConv(c, c, rng, dtype=dtype)
            self.c2 = CausalConv(c, c, rng, zero=True, dtype=dtype)
        else:
            raise ValueError(f"unknown compensation kind {kind!r}")
        self.kind = kind

    def forward(self, x) -> Tensor:
        return x + self.c2(T.silu(self.c1(x)))


class Encoder(Module):
    def __init__(self, cfg: VAEConfig, rng, dtype=np.float32):
        c1, c2 = cfg.widths
        n_down = int(np.log2(cfg.spatial_factor))
        if 2 ** n_down != cfg.spatial_factor or cfg.temporal_factor not in (1, 2):
            raise ValueError("spatial factor must be a power of two and temporal factor 1 or 2")
        self.conv_in = CausalConv(cfg.in_channels, c1, rng, dtype=dtype)
        chans = [c1] * n_down + [c2]
        self.stages, self.comp, self.down = [], [], []
        for i in range(n_down):
            self.stages.append(ResBlock(chans[i], chans[i], rng, causal=i > 0, dtype=dtype))
            self.comp.append(FreqCompBlock(chans[i], rng, "spatial2d", dtype) if cfg.spatial_comp else None)
            self.down.append(FrameConv(chans[i], chans[i + 1], rng, stride=2, dtype=dtype))
        self.tdown = CausalConv(c2, c2, rng, stride=(2, 1, 1), dtype=dtype) if cfg.temporal_factor == 2 else None
        self.mid = ResBlock(c2, c2, rng, causal=True, dtype=dtype)
        self.conv_out = CausalConv(c2, 2 * cfg.latent_channels, rng, k=(1, 3, 3), dtype=dtype)
        # start with a narrow posterior so sampling noise does not swamp the latent early on
        self.conv_out.b.data[cfg.latent_channels:] = LOGVAR_INIT

    def forward(self, x) -> Tensor:
        h = self.conv_in(x)
        for stage, comp, down in zip(self.stages, self.comp, self.down):
            h = stage(h)
            if comp is not None:
                h = comp(h)
            h = down(h)
        if self.tdown is not None:
            h = self.tdown(h)
        h = self.mid(h)
        return self.conv_out(T.silu(h))


class Decoder(Module):
    def __init__(self, cfg: VAEConfig, rng, dtype=np.float32):
        c1, c2 = cfg.widths
        n_up = int(np.log2(cfg.spatial_factor))
        self.temporal_factor = cfg.temporal_factor
        self.conv_in = CausalConv(cfg.latent_channels, c2, rng, dtype=dtype)
        self.mid = ResBlock(c2, c2, rng, causal=True, dtype=dtype)
        self.tup = CausalConv(c2, c2, rng, dtype=dtype) if cfg.temporal_factor == 2 else None
        chans = [c2] + [c1] * n_up
        self.first, self.comp, self.second, self.up = [], [], [], []
        for i in range(n_up):
            causal = i < n_up - 1
            self.first.append(ResBlock(chans[i], chans[i], rng, causal=causal, dtype=dtype))
            self.comp.append(FreqCompBlock(chans[i], rng, "spatiotemporal3d", dtype) if cfg.spatiotemporal_comp else None)
            self.second.append(ResBlock(chans[i], chans[i], rng, causal=False, dtype=dtype))
            self.up.append(FrameConv(chans[i], chans[i + 1], rng, dtype=dtype))
        self.conv_out = FrameConv(c1, cfg.in_channels, rng, dtype=dtype)

    def forward(self, z) -> Tensor:
        h = self.mid(self.conv_in(z))
        if self.tup is not None:
            h = self.tup(T.repeat(h, self.temporal_factor, axis=1))
        for first, comp, second, up in zip(self.first, self.comp, self.second, self.up):
            h = first(h)
            if comp is not None:
                h = comp(h)
            h = second(h)
            h = up(ad.upsample_nearest(h, (1, 2, 2)))
        return T.sigmoid(self.conv_out(T.silu(h)))


class VideoVAE(Module):
    def __init__(self, cfg: VAEConfig | None = None, seed: int = 0, dtype=np.float32):
        self.cfg = cfg or VAEConfig()
        rng = np.random.default_rng(seed)
        self.encoder = Encoder(self.cfg, rng, dtype)
        self.decoder = Decoder(self.cfg, rng, dtype)
        self.dtype = dtype

    def compensation_parameters(self) -> list[Parameter]:
        out = []
        for part in (self.encoder, self.decoder):
            for comp in part.comp:
                if comp is not None:
                    out.extend(comp.parameters())
        return out

    def backbone_parameters(self) -> list[Parameter]:
        comp = {id(p) for p in self.compensation_parameters()}
        return [p for p in self.parameters() if id(p) not in comp]

    def freeze_backbone(self):
        for p in self.backbone_parameters():
            p.requires_grad = False

    def encode_moments(self, video) -> tuple[Tensor, Tensor]:
        x = T.as_tensor(video)
        b, f, c, h, w = x.shape
        self.cfg.check_input(f, h, w)
        out = self.encoder(T.transpose(x, (0, 1, 3, 4, 2)))
        cz = self.cfg.latent_channels
        mean, logvar = out[..., :cz], T.clip(out[..., cz:], -30.0, 20.0)
        to_cf = (0, 1, 4, 2, 3)
        return T.transpose(mean, to_cf), T.transpose(logvar, to_cf)

    def encode(self, video) -> Tensor:
        """Posterior mean latent (B, F/t, c_z, H/s, W/s)."""
        return self.encode_moments(video)[0]

    def decode(self, latent) -> Tensor:
        z = T.transpose(T.as_tensor(latent), (0, 1, 3, 4, 2))
        return T.transpose(self.decoder(z), (0, 1, 4, 2, 3))

    def forward(self, video, rng: np.random.Generator | None = None):
        mean, logvar = self.encode_moments(video)
        if rng is not None:
            eps = rng.standard_normal(mean.shape).astype(mean.dtype)
            z = mean + T.exp(logvar * 0.5) * Tensor(eps)
        else:
            z = mean
        return self.decode(z), mean, logvar


def encode_images(vae: VideoVAE, images) -> Tensor:
    """Encode stills (N, C, H, W) as static clips; returns (N, c_z, h, w) latents."""
    x = T.as_tensor(images)
    t = vae.cfg.temporal_factor
    clip = T.broadcast_to(T.reshape(x, (x.shape[0], 1) + x.shape[1:]), (x.shape[0], t) + x.shape[1:])
    return vae.encode(clip)[:, 0]


# -- losses ----------------------------------------------------------------------
def focal_weights(x, x_hat, gamma: float = 1.0) -> np.ndarray:
    """``|dF|^gamma`` normalized to max 1 per spectrum, as a plain array."""
    d = np.fft.fft2(np.asarray(getattr(x_hat, "data", x_hat)) - np.asarray(getattr(x, "data", x)), norm="ortho")
    mag = np.abs(d) ** gamma
    peak = mag.max(axis=(-2, -1), keepdims=True)
    return np.divide(mag, peak, out=np.zeros_like(mag), where=peak > 0)


def focal_frequency_loss(x, x_hat, gamma: float = 1.0, weights: np.ndarray | None = None) -> Tensor:
    """Spectrum-weighted squared error between (..., H, W) images.

    Weights are constants for the step; pass ``weights`` to pin them.
    Summed over frequencies, averaged over all leading axes.
    """
    x, x_hat = T.as_tensor(x), T.as_tensor(x_hat)
    if x.shape != x_hat.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {x_hat.shape}")
    d = ad.fft2(x_hat - x)
    power = (d * d).sum(axis=-1)                                   # (..., H, W)
    w = focal_weights(x, x_hat, gamma) if weights is None else weights
    per = (power * Tensor(w.astype(power.dtype))).sum(axis=(-2, -1))
    return per.mean()


def kl_divergence(mean, logvar) -> Tensor:
    """KL to a standard normal, summed over latent elements and averaged over the batch."""
    mean, logvar = T.as_tensor(mean), T.as_tensor(logvar)
    kl = (mean * mean + T.exp(logvar) - 1.0 - logvar) * 0.5
    return kl.sum() * (1.0 / mean.shape[0])


def vae_loss(x, x_hat, mean=None, logvar=None, lam: float = 0.1, featurizer: FrozenFeaturizer | None = None,
             kl_weight: float = 1e-6, ffl_weights: np.ndarray | None = None) -> dict:
    """L1 + perceptual + kl_weight * KL + lam * FFL on (B, F, C, H, W) videos."""
    x, x_hat = T.as_tensor(x), T.as_tensor(x_hat)
    b, f, c, h, w = x.shape
    l1 = T.abs_(x_hat - x).mean()
    if featurizer is not None:
        perc = perceptual_distance(featurizer, T.reshape(x_hat, (b * f, c, h, w)), T.reshape(x, (b * f, c, h, w)))
    else:
        perc = Tensor(np.zeros((), x.dtype))
    kl = kl_divergence(mean, logvar) if mean is not None else Tensor(np.zeros((), x.dtype))
    ffl = focal_frequency_loss(x, x_hat, weights=ffl_weights)
    total = l1 + perc + kl * kl_weight
    if lam:
        total = total + ffl * lam
    return {"total": total, "l1": l1, "perceptual": perc, "kl": kl, "ffl": ffl}
