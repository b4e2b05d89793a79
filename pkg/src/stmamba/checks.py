"""Finite-difference gradient suite: every primitive plus the composite losses."""
from __future__ import annotations

import numpy as np

from .autodiff import Tensor, grad_check
from .autodiff.catalog import run_catalog
from .blocks import Denoiser, ModelConfig
from .diffusion import joint_objective, make_schedule, training_loss
from .flow import FrozenFeaturizer, alignment_loss, alignment_loss_batch, alignment_r
from .vae import focal_weights, vae_loss

TOL = 1e-4


def _alignment_cases(rng) -> dict[str, float]:
    y, h = rng.normal(size=(3, 16, 4)), rng.normal(size=(3, 16, 4))
    # margin below mean(r) * g(t) keeps the hinge strictly active at the test point
    r_mean = float(alignment_r(y, h).data.mean()) / 3.0
    margin = 0.5 * r_mean
    out = {"alignment_loss": grad_check(lambda a: alignment_loss(alignment_r(a, Tensor(h)), 2, margin), [y])}
    feats = [rng.normal(size=(2, 3, 8, 4)) for _ in range(3)]
    targets = [rng.normal(size=(2, 3, 8, 4)) for _ in range(2)]
    t = np.array([0, 4])
    out["alignment_loss_batch"] = grad_check(lambda *fs: alignment_loss_batch(list(fs), targets, t, 0.0), feats)
    return out


def _vae_cases(rng) -> dict[str, float]:
    x = rng.uniform(0.2, 0.8, size=(1, 1, 3, 32, 32))
    # |x_hat - x| stays away from zero so the L1 kink is not straddled
    x_hat = x + rng.choice([-1.0, 1.0], size=x.shape) * rng.uniform(0.05, 0.1, size=x.shape)
    mean = rng.standard_normal((1, 1, 2, 8, 8))
    logvar = 0.1 * rng.standard_normal((1, 1, 2, 8, 8))
    feat = FrozenFeaturizer()
    w = focal_weights(x, x_hat)    # focal weights held constant, as during a training step
    recon = grad_check(lambda xh: vae_loss(x, xh, mean, logvar, 0.1, feat, ffl_weights=w)["total"], [x_hat])
    post = grad_check(lambda m, lv: vae_loss(x, x_hat, m, lv, 0.1, feat, kl_weight=1.0, ffl_weights=w)["total"],
                      [mean, logvar])
    return {"vae_loss_reconstruction": recon, "vae_loss_posterior": post}


def _joint_cases(rng) -> dict[str, float]:
    b, f, m, l, d = 2, 2, 3, 4, 8
    t = np.array([3, 40])
    eps_v, eps_i = rng.normal(size=(b, f, 1, 2, 2)), rng.normal(size=(b, m, 1, 2, 2))
    targets = [rng.normal(size=(b, f, l, d)) for _ in range(2)]
    pred_v, pred_i = rng.normal(size=eps_v.shape), rng.normal(size=eps_i.shape)
    feats = [rng.normal(size=(b, f, l, d)) for _ in range(2)]

    def objective(pv, pi, f0, f1):
        return joint_objective(pv, eps_v, pi, eps_i, [f0, f1], targets, t, alpha=0.5)["total"]

    out = {"joint_objective": grad_check(objective, [pred_v, pred_i] + feats)}

    # end to end through a tiny denoiser, with respect to its output head and input embedding
    cfg = ModelConfig(in_channels=1, latent_hw=(2, 2), d=d, depth=2, heads=2, window=2, d_state=2, head_dim=8,
                      chunk_size=4, dropout=0.0, freq_dim=8)
    model = Denoiser(cfg, seed=0, dtype=np.float64)
    prng = np.random.default_rng(1)
    for p in model.parameters():
        p.data = p.data + 0.1 * prng.normal(size=p.shape)
    sched = make_schedule(100)
    z_v, z_i = rng.normal(size=eps_v.shape), rng.normal(size=eps_i.shape)
    t = np.array([3, 60])
    tg = [rng.normal(size=(b, f, l, d)) for _ in range(2)]

    def through(owner, attr):
        def fn(w):
            old = getattr(owner, attr)
            setattr(owner, attr, w)
            try:
                return training_loss(model, sched, z_v, t, eps_v, z_i, eps_i, tg, alpha=0.5)["total"]
            finally:
                setattr(owner, attr, old)
        return fn

    out["training_loss_head"] = grad_check(through(model.head, "weight"), [model.head.weight.data])
    out["training_loss_embed"] = grad_check(through(model.embed, "weight"), [model.embed.weight.data])
    return out


def composite_checks(seed: int = 0) -> dict[str, float]:
    rng = np.random.default_rng(seed)
    out = {}
    out.update(_alignment_cases(rng))
    out.update(_vae_cases(rng))
    out.update(_joint_cases(rng))
    return out


def run_suite(seed: int = 0, primitives: bool = True) -> dict[str, float]:
    """Worst relative error per check; every value should be <= ``TOL``."""
    out = {}
    if primitives:
        out.update({f"op:{k}": v for k, v in run_catalog().items()})
    out.update({f"loss:{k}": v for k, v in composite_checks(seed).items()})
    return out
