"""Training, sampling and evaluation loops for the autoencoder and the denoiser.

All randomness of step ``s`` comes from ``default_rng([seed, s])`` so a run
resumed from a checkpoint replays the next step exactly.
"""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import AdamW, Tensor, clip_grad_norm, global_grad_norm, load_tensors, no_grad, save_tensors
from .blocks import Denoiser
from .config import RunConfig
from .data import export_pngs, gen_dataset, load_dataset, save_video
from .diffusion import EMA, ddim_sample, make_schedule, training_loss
from .flow import FrozenFeaturizer, channel_projection, default_layer_map, flow_targets
from .vae import VAEConfig, VideoVAE, encode_images, vae_loss

log = logging.getLogger(__name__)

METRICS_HEADER = ["step", "mse_term", "align_term", "total", "grad_norm", "lr"]
VAE_HEADER = ["step", "l1", "perceptual", "kl", "ffl", "total", "lr"]


class TrainingDiverged(RuntimeError):
    pass


# -- checkpoint helpers -----------------------------------------------------------
def _pack_json(obj) -> np.ndarray:
    return np.frombuffer(json.dumps(obj, sort_keys=True).encode(), dtype=np.uint8).astype(np.float32)


def _unpack_json(arr: np.ndarray):
    return json.loads(np.asarray(arr).astype(np.uint8).tobytes().decode())


def _prefixed(prefix: str, d: dict) -> dict:
    return {f"{prefix}{k}": v for k, v in d.items()}


def _strip(prefix: str, d: dict) -> dict:
    return {k[len(prefix):]: v for k, v in d.items() if k.startswith(prefix)}


def save_vae(path, vae: VideoVAE):
    save_tensors(path, {**_prefixed("vae.", vae.state_dict()), "meta.config": _pack_json(vae.cfg.__dict__)})


def load_vae(path) -> VideoVAE:
    state = load_tensors(path)
    raw = _unpack_json(state["meta.config"])
    cfg = VAEConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in raw.items()})
    vae = VideoVAE(cfg)
    vae.load_state_dict(_strip("vae.", state))
    return vae


def _write_config(out_dir: Path, cfg: RunConfig):
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg.save(out_dir / "config.json")


class CSVLog:
    def __init__(self, path: Path, header: list[str], append: bool = False):
        fresh = not (append and path.exists())
        self.fh = open(path, "a" if not fresh else "w", newline="")
        self.writer = csv.writer(self.fh)
        self.header = header
        if fresh:
            self.writer.writerow(header)

    def row(self, values: dict):
        self.writer.writerow([_fmt(values[k]) for k in self.header])
        self.fh.flush()

    def close(self):
        self.fh.close()


def _fmt(v) -> str:
    return str(v) if isinstance(v, (int, np.integer)) else repr(float(v))


def read_csv(path) -> dict[str, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return {k: np.array([float(r[k]) for r in rows]) for k in (rows[0] if rows else {})}


# -- autoencoder --------------------------------------------------------------------------
def _vae_batch(videos: np.ndarray, step: int, seed: int, batch: int):
    rng = np.random.default_rng([seed, step])
    idx = rng.choice(len(videos), size=min(batch, len(videos)), replace=False)
    return videos[idx], rng


def cosine_lr(step: int, total: int, lr: float, lr_final: float) -> float:
    if total <= 1:
        return lr
    return lr_final + 0.5 * (lr - lr_final) * (1.0 + math.cos(math.pi * step / (total - 1)))


def pretrain_vae(cfg: RunConfig, videos: np.ndarray, out_dir=None, steps: int | None = None) -> tuple[VideoVAE, dict]:
    """Train the backbone (compensation blocks stay at their identity init).

    ``videos`` is (N, F, C, H, W) in [0, 1].
    """
    vt = cfg.vae_train
    vae = VideoVAE(cfg.vae, seed=cfg.seed)
    feat = FrozenFeaturizer(image_hw=videos.shape[-2:], seed=cfg.train.featurizer_seed)
    params = vae.backbone_parameters()
    comp = vae.compensation_parameters()
    for p in comp:
        p.requires_grad = False
    opt = AdamW(params, lr=vt.lr, betas=vt.betas)
    out = Path(out_dir) if out_dir is not None else None
    logger = CSVLog(out / "vae_metrics.csv", VAE_HEADER) if out is not None else None
    history = []
    steps = vt.steps if steps is None else steps
    for step in range(steps):
        x, rng = _vae_batch(videos, step, cfg.seed, vt.batch_size)
        recon, mean, logvar = vae(x, rng)
        terms = vae_loss(x, recon, mean, logvar, lam=0.0, featurizer=feat, kl_weight=vt.kl_weight)
        vae.zero_grad()
        terms["total"].backward()
        opt.lr = cosine_lr(step, steps, vt.lr, vt.lr_final)
        opt.step()
        row = {k: float(v.data) for k, v in terms.items()}
        if not math.isfinite(row["total"]):
            raise TrainingDiverged(f"autoencoder loss became {row['total']} at step {step} (batch seed [{cfg.seed}, {step}])")
        row.update(step=step, lr=opt.lr)
        history.append(row)
        if logger:
            logger.row(row)
    for p in comp:
        p.requires_grad = True
    if logger:
        logger.close()
        save_vae(out / "vae.msra", vae)
    return vae, {k: np.array([h[k] for h in history]) for k in VAE_HEADER}


def finetune_compensation(vae: VideoVAE, videos: np.ndarray, cfg: RunConfig, lam: float | None = None,
                          steps: int | None = None, lr: float | None = None, seed: int | None = None,
                          featurizer: FrozenFeaturizer | None = None) -> dict:
    """Train only the compensation blocks on the full objective; backbone frozen."""
    vt = cfg.vae_train
    lam = vt.lam if lam is None else lam
    steps = vt.finetune_steps if steps is None else steps
    if lr is None:
        lr = vt.finetune_lr_override if vt.finetune_lr_override is not None else vt.finetune_lr
    seed = cfg.seed + 1 if seed is None else seed
    feat = featurizer or FrozenFeaturizer(image_hw=videos.shape[-2:], seed=cfg.train.featurizer_seed)
    vae.freeze_backbone()
    backbone = vae.backbone_parameters()
    comp = vae.compensation_parameters()
    opt = AdamW(comp, lr=lr, betas=vt.betas)
    history = {k: [] for k in ("l1", "perceptual", "kl", "ffl", "total", "backbone_grad_norm")}
    for step in range(steps):
        x, rng = _vae_batch(videos, step, seed, vt.batch_size)
        recon, mean, logvar = vae(x, rng)
        terms = vae_loss(x, recon, mean, logvar, lam=lam, featurizer=feat, kl_weight=vt.kl_weight)
        vae.zero_grad()
        terms["total"].backward()
        leaked = global_grad_norm(backbone)
        assert leaked == 0.0, f"gradient detected on frozen weights (norm {leaked})"
        opt.step()
        for k in ("l1", "perceptual", "kl", "ffl", "total"):
            history[k].append(float(terms[k].data))
        history["backbone_grad_norm"].append(leaked)
    return {k: np.array(v) for k, v in history.items()}


def reconstruct(vae: VideoVAE, videos: np.ndarray, batch: int = 4) -> np.ndarray:
    out = []
    with no_grad():
        for i in range(0, len(videos), batch):
            out.append(vae.decode(vae.encode(videos[i:i + batch])).data)
    return np.concatenate(out)


# -- latent dataset -------------------------------------------------------------------------
@dataclass
class LatentData:
    video: np.ndarray           # (N, f, c, h, w), scaled
    images: np.ndarray          # (N * F, c, h, w), every frame encoded as a still, scaled
    targets: list[np.ndarray]   # per featurizer layer, (N, f, l, d)
    scale: float


def encode_dataset(vae: VideoVAE, videos: np.ndarray, flows: np.ndarray, cfg: RunConfig,
                   scale: float | None = None, batch: int = 4) -> LatentData:
    frames = videos[:, :-1]
    with no_grad():
        lat = np.concatenate([vae.encode(frames[i:i + batch]).data for i in range(0, len(frames), batch)])
        stills = frames.reshape((-1,) + frames.shape[2:])
        img = np.concatenate([encode_images(vae, stills[i:i + 4 * batch]).data
                              for i in range(0, len(stills), 4 * batch)])
    scale = float(1.0 / lat.std()) if scale is None else scale
    feat = FrozenFeaturizer(image_hw=videos.shape[-2:], seed=cfg.train.featurizer_seed)
    proj = channel_projection(feat.width, cfg.model.d)
    f, l = lat.shape[1], cfg.model.tokens_per_frame
    per_clip = [flow_targets(fl, feat, f, l, proj) for fl in flows]
    targets = [np.stack([c[k] for c in per_clip]) for k in range(feat.layers)]
    return LatentData(video=(lat * scale).astype(np.float32), images=(img * scale).astype(np.float32),
                      targets=targets, scale=scale)


# -- diffusion training ---------------------------------------------------------------------
def phase_at(cfg: RunConfig, step: int, n_clips: int):
    """(lr, batch size, epoch) in effect at ``step`` under the phased schedule."""
    done_steps, done_epochs = 0, 0
    phases = cfg.train.phases
    for i, ph in enumerate(phases):
        per_epoch = max(1, math.ceil(n_clips / ph.batch_size))
        if ph.epochs is None or i == len(phases) - 1:
            return ph.lr, ph.batch_size, done_epochs + (step - done_steps) // per_epoch
        span = ph.epochs * per_epoch
        if step < done_steps + span:
            return ph.lr, ph.batch_size, done_epochs + (step - done_steps) // per_epoch
        done_steps += span
        done_epochs += ph.epochs


class DiffusionTrainer:
    def __init__(self, cfg: RunConfig, data: LatentData, out_dir=None, alpha: float | None = None):
        self.cfg = cfg
        self.data = data
        self.alpha = cfg.train.alpha if alpha is None else alpha
        self.schedule = make_schedule(cfg.train.T, beta_start=cfg.train.beta_start, beta_end=cfg.train.beta_end)
        self.model = Denoiser(cfg.model, seed=cfg.seed)
        self.ema = EMA(self.model, cfg.train.ema_decay)
        self.opt = AdamW(self.model.parameters(), lr=cfg.train.phases[0].lr, weight_decay=cfg.train.weight_decay)
        self.layer_map = default_layer_map(cfg.model.depth, len(data.targets))
        self.step = 0
        self.out = Path(out_dir) if out_dir is not None else None

    # one optimisation step, fully determined by (seed, step)
    def batch(self, step: int):
        n = len(self.data.video)
        lr, bsz, epoch = phase_at(self.cfg, step, n)
        rng = np.random.default_rng([self.cfg.seed, step])
        idx = rng.choice(n, size=min(bsz, n), replace=False)
        t = rng.integers(0, self.schedule.T, size=len(idx))
        zv = self.data.video[idx]
        eps_v = rng.standard_normal(zv.shape).astype(np.float32)
        m = self.cfg.train.n_images
        zi = eps_i = None
        if m:
            # independent stills from anywhere in the dataset
            pick = rng.integers(0, len(self.data.images), size=(len(idx), m))
            zi = self.data.images[pick]
            eps_i = rng.standard_normal(zi.shape).astype(np.float32)
        targets = [tg[idx] for tg in self.data.targets]
        return dict(idx=idx, t=t, zv=zv, eps_v=eps_v, zi=zi, eps_i=eps_i, targets=targets, rng=rng, lr=lr,
                    epoch=epoch)

    def train_step(self) -> dict:
        step = self.step
        b = self.batch(step)
        self.model.train()
        self.opt.lr = b["lr"]
        terms = training_loss(self.model, self.schedule, b["zv"], b["t"], b["eps_v"], b["zi"], b["eps_i"],
                              flow_targets=b["targets"], alpha=self.alpha, margin=self.cfg.train.margin,
                              rng=b["rng"], layer_map=self.layer_map)
        total = float(terms["total"].data)
        if not math.isfinite(total):
            self._dump_nan(step, b, total)
        self.model.zero_grad()
        terms["total"].backward()
        params = self.model.parameters()
        if b["epoch"] >= self.cfg.train.clip_from_epoch:
            gnorm = clip_grad_norm(params, self.cfg.train.clip_norm)
        else:
            gnorm = global_grad_norm(params)
        self.opt.step()
        self.ema.update(self.model)
        self.step += 1
        return {"step": step, "mse_term": float(terms["mse"].data), "align_term": float(terms["align"].data),
                "total": total, "grad_norm": gnorm, "lr": b["lr"]}

    def _dump_nan(self, step: int, b: dict, total: float):
        info = {"step": step, "batch_seed": [self.cfg.seed, step], "clips": b["idx"].tolist(),
                "t": b["t"].tolist(), "loss": repr(total)}
        if self.out is not None:
            (self.out / "nan_dump.json").write_text(json.dumps(info, indent=2))
        raise TrainingDiverged(f"non-finite loss at step {step}; batch seed [{self.cfg.seed}, {step}]: {info}")

    def run(self, steps: int | None = None, append_log: bool = False) -> dict[str, np.ndarray]:
        steps = self.cfg.train.steps if steps is None else steps
        logger = CSVLog(self.out / "metrics.csv", METRICS_HEADER, append=append_log) if self.out else None
        rows = []
        every = self.cfg.train.checkpoint_every
        while self.step < steps:
            row = self.train_step()
            rows.append(row)
            if logger:
                logger.row(row)
            if row["step"] % self.cfg.train.log_every == 0:
                log.info("step %d total %.4f mse %.4f align %.4f", row["step"], row["total"], row["mse_term"],
                         row["align_term"])
            if self.out and every and self.step % every == 0:
                self.save(self.out / "diffusion.msra")
        if logger:
            logger.close()
        if self.out:
            self.save(self.out / "diffusion.msra")
        return {k: np.array([r[k] for r in rows]) for k in METRICS_HEADER}

    def align_on(self, idx, t, weights: str = "live") -> float:
        """Alignment term on a fixed batch (no dropout), for comparing runs."""
        from .flow import alignment_loss_batch
        model = self.model if weights == "live" else self.ema_model()
        model.eval()
        rng = np.random.default_rng(12345)
        zv = self.data.video[idx]
        eps = rng.standard_normal(zv.shape).astype(np.float32)
        from .diffusion import q_sample
        with no_grad():
            _, _, feats = model(q_sample(zv, np.asarray(t) + 1, eps, self.schedule), t, return_features=True)
            val = alignment_loss_batch(feats, [tg[idx] for tg in self.data.targets], t, self.cfg.train.margin,
                                       self.layer_map)
        model.train()
        return float(val.data)

    def ema_model(self) -> Denoiser:
        m = Denoiser(self.cfg.model, seed=self.cfg.seed)
        self.ema.copy_to(m)
        return m

    # -- checkpointing
    def state(self) -> dict[str, np.ndarray]:
        return {**_prefixed("model.", self.model.state_dict()), **_prefixed("ema.", self.ema.state_dict()),
                **_prefixed("opt.", self.opt.state_dict()),
                "meta.step": np.array([self.step], np.float32),
                "meta.latent_scale": np.array([self.data.scale], np.float32),
                "meta.alpha": np.array([self.alpha], np.float32),
                "meta.config": _pack_json(self.cfg.to_dict())}

    def save(self, path):
        save_tensors(path, self.state())

    def load(self, path):
        state = load_tensors(path)
        self.model.load_state_dict(_strip("model.", state))
        self.ema.load_state_dict(_strip("ema.", state))
        self.opt.load_state_dict(_strip("opt.", state))
        self.step = int(state["meta.step"][0])


def load_denoiser(path, use_ema: bool = True) -> tuple[Denoiser, RunConfig, float]:
    state = load_tensors(path)
    cfg = RunConfig.from_dict(_unpack_json(state["meta.config"]))
    model = Denoiser(cfg.model, seed=cfg.seed)
    model.load_state_dict(_strip("ema." if use_ema else "model.", state))
    return model.eval(), cfg, float(state["meta.latent_scale"][0])


# -- sampling and evaluation -------------------------------------------------------------------
def sample_latents(model: Denoiser, cfg: RunConfig, n: int, seed: int, steps: int | None = None) -> np.ndarray:
    sched = make_schedule(cfg.train.T, beta_start=cfg.train.beta_start, beta_end=cfg.train.beta_end)
    f, c, h, w = cfg.vae.latent_shape(cfg.data.frames - 1, cfg.data.size, cfg.data.size)
    model.eval()

    def eps_fn(z, t):
        with no_grad():
            return model(z, t)[0].data

    return ddim_sample(eps_fn, sched, (n, f, c, h, w), steps=steps or cfg.sample.ddim_steps, seed=seed)


def decode_latents(vae: VideoVAE, lat: np.ndarray, scale: float, batch: int = 4) -> np.ndarray:
    with no_grad():
        out = [vae.decode(lat[i:i + batch] / scale).data for i in range(0, len(lat), batch)]
    return np.clip(np.concatenate(out), 0.0, 1.0)


def sample(checkpoint, vae_path, n: int, seed: int, out_dir, steps: int | None = None, use_ema: bool = True,
           png: bool = False) -> list[Path]:
    out = Path(out_dir)
    if n <= 0:
        return []
    model, cfg, scale = load_denoiser(checkpoint, use_ema)
    vae = load_vae(vae_path)
    videos = decode_latents(vae, sample_latents(model, cfg, n, seed, steps), scale)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, v in enumerate(videos):
        p = out / f"sample_{i:04d}.msv"
        save_video(p, v)
        paths.append(p)
        if png:
            export_pngs(v, out / "frames", f"sample_{i:04d}")
    return paths


def frame_features(featurizer: FrozenFeaturizer, frames: np.ndarray) -> np.ndarray:
    with no_grad():
        maps = featurizer(np.asarray(frames, dtype=np.float64))
    return maps[-1].data.reshape(len(frames), -1)


def eval_fc(videos, featurizer: FrozenFeaturizer | None = None) -> tuple[np.ndarray, float]:
    """Consecutive-frame consistency: 100 * mean cosine between frame features, per video."""
    videos = [np.asarray(v) for v in videos]
    if not videos:
        raise ValueError("no videos to score")
    featurizer = featurizer or FrozenFeaturizer(image_hw=videos[0].shape[-2:])
    scores = []
    for v in videos:
        if len(v) < 2:
            raise ValueError(f"frame consistency needs at least 2 frames, got {len(v)}")
        f = frame_features(featurizer, v)
        a, b = f[:-1], f[1:]
        cos = np.sum(a * b, axis=1) / np.maximum(np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1), 1e-12)
        scores.append(100.0 * float(np.mean(np.maximum(cos, 0.0))))
    scores = np.array(scores)
    return scores, float(scores.mean())


def noise_videos(n: int, frames: int, size: int, seed: int = 0, channels: int = 3) -> np.ndarray:
    return np.random.default_rng(seed).uniform(size=(n, frames, channels, size, size)).astype(np.float32)


# -- orchestration used by the command line ---------------------------------------------------
def ensure_dataset(cfg: RunConfig, data_dir) -> Path:
    d = Path(data_dir)
    if not (d / "manifest.json").exists():
        gen_dataset(d, cfg.data.n_clips + cfg.data.n_test, seed=cfg.data.seed, frames=cfg.data.frames,
                    size=cfg.data.size)
    return d


def split(cfg: RunConfig, videos, flows):
    n = cfg.data.n_clips
    return (videos[:n], flows[:n]), (videos[n:], flows[n:])


def run_train_vae(cfg: RunConfig, data_dir, out_dir) -> dict:
    out = Path(out_dir)
    _write_config(out, cfg)
    videos, flows, _ = load_dataset(ensure_dataset(cfg, data_dir))
    (train_v, _), (test_v, _) = split(cfg, videos, flows)
    vae, hist = pretrain_vae(cfg, train_v[:, :-1], out)
    from .data import psnr
    before = psnr(reconstruct(vae, test_v[:, :-1]), test_v[:, :-1])
    ft = finetune_compensation(vae, train_v[:, :-1], cfg)
    after = psnr(reconstruct(vae, test_v[:, :-1]), test_v[:, :-1])
    save_vae(out / "vae.msra", vae)
    summary = {"psnr_backbone": before, "psnr_finetuned": after, "final_ffl": float(ft["ffl"][-1]),
               "steps": int(len(hist["total"]))}
    (out / "vae_summary.json").write_text(json.dumps(summary, indent=2))
    return summary


def run_train(cfg: RunConfig, data_dir, vae_path, out_dir, resume=None, steps: int | None = None) -> dict:
    out = Path(out_dir)
    _write_config(out, cfg)
    videos, flows, _ = load_dataset(ensure_dataset(cfg, data_dir))
    (train_v, train_f), _ = split(cfg, videos, flows)
    vae = load_vae(vae_path)
    data = encode_dataset(vae, train_v, train_f, cfg)
    trainer = DiffusionTrainer(cfg, data, out)
    if resume:
        trainer.load(resume)
    hist = trainer.run(steps, append_log=bool(resume))
    return {"steps": trainer.step, "final_total": float(hist["total"][-1]) if len(hist["total"]) else None}
