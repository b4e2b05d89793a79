"""Run configuration: every knob of a run, with desk and reference presets."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .blocks import ModelConfig
from .vae import VAEConfig


@dataclass
class DataConfig:
    n_clips: int = 256
    n_test: int = 8
    frames: int = 9            # one more than the VAE sees, so flow covers every model frame
    size: int = 32
    seed: int = 0


@dataclass
class LRPhase:
    lr: float
    batch_size: int
    epochs: int | None = None  # None: until the end of training


@dataclass
class TrainConfig:
    steps: int = 500
    phases: list[LRPhase] = field(default_factory=lambda: [LRPhase(1e-3, 2, None)])
    n_images: int = 8
    alpha: float = 0.01
    margin: float = 0.0
    ema_decay: float = 0.99
    clip_from_epoch: int = 10
    clip_norm: float = 1.0
    weight_decay: float = 0.0
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 2e-2
    featurizer_seed: int = 1234
    checkpoint_every: int = 100
    log_every: int = 10


@dataclass
class VAETrainConfig:
    steps: int = 1500
    batch_size: int = 4
    lr: float = 1e-3
    lr_final: float = 1e-4
    betas: tuple[float, float] = (0.5, 0.9)
    lam: float = 0.1
    kl_weight: float = 1e-6
    finetune_steps: int = 150
    finetune_lr: float = 2e-7
    finetune_lr_override: float | None = 1e-3


@dataclass
class SampleConfig:
    n: int = 4
    ddim_steps: int = 250
    use_ema: bool = True


@dataclass
class RunConfig:
    preset: str = "desk"
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    vae: VAEConfig = field(default_factory=VAEConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    vae_train: VAETrainConfig = field(default_factory=VAETrainConfig)
    sample: SampleConfig = field(default_factory=SampleConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        return _build(cls, d)

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        return cls.from_dict(json.loads(text))

    def save(self, path):
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_json(Path(path).read_text())

    def check(self):
        v, m = self.vae, self.model
        f, h, w = self.data.frames - 1, self.data.size, self.data.size
        lf, cz, lh, lw = v.latent_shape(f, h, w)
        if (cz, (lh, lw)) != (m.in_channels, tuple(m.latent_hw)):
            raise ValueError(f"VAE latent ({cz}, {lh}x{lw}) does not match model input "
                             f"({m.in_channels}, {m.latent_hw[0]}x{m.latent_hw[1]})")
        if not self.train.phases:
            raise ValueError("need at least one learning-rate phase")
        return self


_NESTED = {"data": DataConfig, "model": ModelConfig, "vae": VAEConfig, "train": TrainConfig,
           "vae_train": VAETrainConfig, "sample": SampleConfig}


def _build(cls, d: dict):
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(d) - set(known)
    if unknown:
        raise ValueError(f"unknown {cls.__name__} fields: {sorted(unknown)}")
    kw = {}
    for name, value in d.items():
        if cls is RunConfig and name in _NESTED:
            value = _build(_NESTED[name], value)
        elif cls is TrainConfig and name == "phases":
            value = [_build(LRPhase, p) for p in value]
        elif isinstance(value, list):
            value = tuple(value)
        kw[name] = value
    return cls(**kw)


def desk_preset(seed: int = 0) -> RunConfig:
    return RunConfig(preset="desk", seed=seed).check()


def paper_preset(seed: int = 0, size: str = "S") -> RunConfig:
    """Reference-scale hyperparameters; far too large to train on a CPU."""
    depth = {"S": 6, "B": 12, "L": 24}[size]
    model = ModelConfig(in_channels=16, latent_hw=(16, 16), patch=2, strip=2, d=512, depth=depth, heads=8,
                        window=8, d_state=128, chunk_size=256)
    vae = VAEConfig(latent_channels=16, widths=(128, 256), spatial_factor=8, temporal_factor=2)
    train = TrainConfig(steps=1_000_000, phases=[LRPhase(1e-3, 16, 2), LRPhase(1e-4, 2, None)], ema_decay=0.9999,
                        clip_from_epoch=25)
    vae_train = VAETrainConfig(lr=1e-4, lr_final=1e-4, finetune_lr=2e-7, finetune_lr_override=None)
    data = DataConfig(frames=17, size=128)
    return RunConfig(preset="paper", seed=seed, data=data, model=model, vae=vae, train=train,
                     vae_train=vae_train).check()


PRESETS = {"desk": desk_preset, "paper": paper_preset}
