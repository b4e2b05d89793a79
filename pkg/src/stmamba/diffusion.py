"""Variance-preserving noise schedule, forward noising, joint training loss,
deterministic DDIM sampling and EMA weights.

Schedule arrays have length ``T + 1``; level 0 is clean data. A model-facing
timestep index ``t`` in ``[0, T)`` addresses noise level ``t + 1``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Module, Tensor, as_tensor


@dataclass
class NoiseSchedule:
    alpha: np.ndarray
    sigma: np.ndarray
    betas: np.ndarray

    @property
    def T(self) -> int:
        return len(self.alpha) - 1

    def snr(self) -> np.ndarray:
        with np.errstate(divide="ignore"):
            return self.alpha ** 2 / self.sigma ** 2

    def alpha_ts(self, t, s) -> np.ndarray:
        return self.alpha[t] / self.alpha[s]

    def sigma2_ts(self, t, s) -> np.ndarray:
        return self.sigma[t] ** 2 - self.alpha_ts(t, s) ** 2 * self.sigma[s] ** 2

    def check_level(self, t):
        t = np.asarray(t)
        if np.any(t < 0) or np.any(t > self.T):
            raise ValueError(f"noise level out of range [0, {self.T}]: {t}")


def make_schedule(T: int = 1000, kind: str = "linear", beta_start: float = 1e-4,
                  beta_end: float = 2e-2) -> NoiseSchedule:
    if T < 1:
        raise ValueError(f"need at least one diffusion step, got T={T}")
    if kind != "linear":
        raise ValueError(f"unknown schedule kind {kind!r}")
    betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    if np.any(betas <= 0) or np.any(betas >= 1):
        raise ValueError(f"betas must lie in (0, 1), got range [{betas.min()}, {betas.max()}]")
    alpha2 = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
    alpha = np.sqrt(alpha2)
    sigma = np.sqrt(1.0 - alpha2)
    sched = NoiseSchedule(alpha=alpha, sigma=sigma, betas=betas)
    snr = sched.snr()
    if not np.all(np.diff(snr[1:]) < 0):
        raise ValueError("signal-to-noise ratio is not strictly decreasing")
    return sched


def _bcast(v, ndim: int) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    return v.reshape(v.shape + (1,) * (ndim - v.ndim))


def q_sample(z0, t, eps, schedule: NoiseSchedule) -> np.ndarray:
    """z_t = alpha_t z0 + sigma_t eps, ``t`` a level (scalar or per-batch)."""
    schedule.check_level(t)
    z0, eps = np.asarray(z0), np.asarray(eps)
    a = _bcast(schedule.alpha[t], z0.ndim)
    s = _bcast(schedule.sigma[t], z0.ndim)
    return (a * z0 + s * eps).astype(z0.dtype)


def ddim_step(z, level, next_level, eps, schedule: NoiseSchedule) -> np.ndarray:
    a, s = _bcast(schedule.alpha[level], z.ndim), _bcast(schedule.sigma[level], z.ndim)
    a2, s2 = _bcast(schedule.alpha[next_level], z.ndim), _bcast(schedule.sigma[next_level], z.ndim)
    z0_hat = (z - s * eps) / a
    return (a2 * z0_hat + s2 * eps).astype(z.dtype)


def ddim_levels(T: int, steps: int) -> np.ndarray:
    """Descending levels T, T - k, ..., k followed by 0 for a uniform sub-schedule."""
    stride = max(T // steps, 1)
    levels = np.arange(T, 0, -stride)[:steps]
    return np.concatenate([levels, [0]]).astype(np.int64)


def ddim_sample(eps_fn, schedule: NoiseSchedule, shape, steps: int = 250, seed: int = 0,
                dtype=np.float32, z_init: np.ndarray | None = None) -> np.ndarray:
    """Deterministic sampler. ``eps_fn(z, t_index)`` predicts noise with ``t_index = level - 1``."""
    rng = np.random.default_rng(seed)
    z = rng.standard_normal(shape).astype(dtype) if z_init is None else np.asarray(z_init, dtype)
    levels = ddim_levels(schedule.T, steps)
    batch = shape[0]
    for lv, nxt in zip(levels[:-1], levels[1:]):
        eps = np.asarray(eps_fn(z, np.full(batch, lv - 1, dtype=np.int64)))
        z = ddim_step(z, lv, nxt, eps, schedule)
    return z


class EMA:
    """Shadow copy of parameters: shadow <- decay * shadow + (1 - decay) * live."""

    def __init__(self, module: Module, decay: float = 0.9999):
        self.decay = decay
        self.shadow = {n: p.data.copy() for n, p in module.named_parameters()}

    def update(self, module: Module):
        d = self.decay
        for n, p in module.named_parameters():
            s = self.shadow[n]
            if s.shape != p.shape:
                raise ValueError(f"{n}: EMA shape {s.shape} vs live {p.shape}")
            s *= d
            s += (1 - d) * p.data

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: v.copy() for n, v in self.shadow.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]):
        self.shadow = {n: np.asarray(v).copy() for n, v in state.items()}

    def copy_to(self, module: Module):
        module.load_state_dict(self.shadow)


def noise_weight(t) -> np.ndarray:
    """Default alignment weight g(t) = 1 / (t + 1)."""
    return 1.0 / (np.asarray(t, dtype=np.float64) + 1.0)


def training_loss(model, schedule: NoiseSchedule, z_video, t, eps_video, z_images=None, eps_images=None,
                  flow_targets=None, alpha: float = 0.01, margin: float = 0.0, rng=None,
                  layer_map=None) -> dict:
    """Joint objective: noise MSE over video and image frames + alpha * video-only alignment.

    ``t`` holds per-sample indices in [0, T); level ``t + 1`` is noised.
    ``flow_targets`` is a list (one per featurizer layer) of sampled flow
    features shaped like the video tokens (b, f, l, d).
    """
    t = np.asarray(t, dtype=np.int64)
    if alpha > 0 and flow_targets is None:
        raise ValueError("alignment weight alpha > 0 requires flow features")
    zt_v = q_sample(z_video, t + 1, eps_video, schedule)
    zt_i = q_sample(z_images, t + 1, eps_images, schedule) if z_images is not None else None
    pred_v, pred_i, feats = model(zt_v, t, zt_i, rng=rng, return_features=alpha > 0 or flow_targets is not None)
    out = joint_objective(pred_v, eps_video, pred_i, eps_images, feats, flow_targets, t, alpha, margin, layer_map)
    out["features"] = feats
    return out


def joint_objective(pred_v, eps_video, pred_i, eps_images, feats, flow_targets, t, alpha: float = 0.01,
                    margin: float = 0.0, layer_map=None) -> dict:
    """Noise MSE over every video and image element plus ``alpha`` times the video-only alignment."""
    from .flow import alignment_loss_batch

    pred_v = as_tensor(pred_v)
    pred_i = as_tensor(pred_i) if pred_i is not None else None
    diff_v = pred_v - Tensor(np.asarray(eps_video))
    sq = (diff_v * diff_v).sum()
    count = diff_v.size
    if pred_i is not None:
        diff_i = pred_i - Tensor(np.asarray(eps_images))
        sq = sq + (diff_i * diff_i).sum()
        count += diff_i.size
    mse = sq * (1.0 / count)
    if flow_targets is not None:
        align = alignment_loss_batch(feats, flow_targets, t, margin, layer_map)
    else:
        align = Tensor(np.zeros((), dtype=mse.dtype))
    total = mse + align * alpha if alpha > 0 else mse
    return {"total": total, "mse": mse, "align": align}
