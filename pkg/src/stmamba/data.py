"""Synthetic motion clips with exact flow, and the video/flow file formats."""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .autodiff.serialization import FormatError
from .flow import load_flow, motion_map, save_flow, synthetic_flow

VIDEO_MAGIC = b"MSVD"
VIDEO_VERSION = 1
MOTIONS = ("translation", "rotation", "zoom")


@dataclass
class ClipSpec:
    motion: str
    params: dict
    seed: int
    frames: int = 9
    size: int = 32
    blobs: int = 4
    channels: int = 3


@dataclass
class Scene:
    """A smooth analytic RGB image defined on the whole plane."""
    centers: np.ndarray
    sigmas: np.ndarray
    colors: np.ndarray
    bg_a: np.ndarray
    bg_b: np.ndarray
    bg_freq: np.ndarray
    bg_phase: np.ndarray

    @classmethod
    def random(cls, rng: np.random.Generator, size: int, blobs: int, channels: int = 3) -> "Scene":
        return cls(
            centers=rng.uniform(0.15 * size, 0.85 * size, size=(blobs, 2)),
            sigmas=rng.uniform(0.08 * size, 0.16 * size, size=blobs),
            colors=rng.uniform(-1.5, 1.5, size=(blobs, channels)),
            bg_a=rng.uniform(-0.6, 0.6, size=channels),
            bg_b=rng.uniform(-0.4, 0.4, size=(2, channels)),
            bg_freq=rng.uniform(0.5, 1.5, size=(2,)) * 2 * np.pi / size,
            bg_phase=rng.uniform(0, 2 * np.pi, size=channels),
        )

    def __call__(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        """Evaluate at coordinates -> (C, *x.shape) in (0, 1)."""
        ch = len(self.bg_a)
        s = np.zeros((ch,) + x.shape)
        wave = np.sin(self.bg_freq[0] * x[None] + self.bg_freq[1] * y[None] + self.bg_phase[:, None, None])
        s += self.bg_a[:, None, None] + self.bg_b[0][:, None, None] * wave
        for (cx, cy), sg, col in zip(self.centers, self.sigmas, self.colors):
            g = np.exp(-((x - cx) ** 2 + (y - cy) ** 2) / (2 * sg * sg))
            s += col[:, None, None] * g[None]
        return 1.0 / (1.0 + np.exp(-s))


def random_clip_spec(rng: np.random.Generator, seed: int, frames: int = 9, size: int = 32,
                     motion: str | None = None) -> ClipSpec:
    motion = motion or MOTIONS[int(rng.integers(len(MOTIONS)))]
    if motion == "translation":
        ang = rng.uniform(0, 2 * np.pi)
        speed = rng.uniform(0.5, 1.5)
        params = {"velocity": [float(speed * np.cos(ang)), float(speed * np.sin(ang))]}
    elif motion == "rotation":
        params = {"omega": float(rng.choice([-1, 1]) * rng.uniform(0.03, 0.08))}
    else:
        params = {"rate": float(rng.choice([-1, 1]) * rng.uniform(0.02, 0.05))}
    return ClipSpec(motion=motion, params=params, seed=seed, frames=frames, size=size)


def render_clip(spec: ClipSpec) -> tuple[np.ndarray, np.ndarray]:
    """Frames (F+1, C, H, W) in [0, 1] and exact flow (F, 2, H, W).

    Frame k is the scene pulled back through k applications of the motion,
    so the displacement from frame k to k+1 is the analytic field.
    """
    rng = np.random.default_rng(spec.seed)
    scene = Scene.random(rng, spec.size, spec.blobs, spec.channels)
    n = spec.size
    frames = []
    for k in range(spec.frames):
        x, y = motion_map(spec.motion, spec.params, n, n, steps=-k)
        frames.append(scene(x, y))
    flow = synthetic_flow(spec.motion, spec.params, (spec.frames - 1, n, n))
    return np.stack(frames).astype(np.float32), flow


# -- video file format -----------------------------------------------------------
def to_uint8(video: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(video) * 255.0), 0, 255).astype(np.uint8)


def dumps_video(video: np.ndarray) -> bytes:
    """``video`` (F, C, H, W) floats in [0, 1] -> bytes."""
    u8 = to_uint8(video)
    f, c, h, w = u8.shape
    return VIDEO_MAGIC + struct.pack("<5I", VIDEO_VERSION, f, h, w, c) + np.ascontiguousarray(
        u8.transpose(0, 2, 3, 1)).tobytes()


def loads_video(raw: bytes) -> np.ndarray:
    if raw[:4] != VIDEO_MAGIC:
        raise FormatError("not a video file (bad magic)")
    version, f, h, w, c = struct.unpack_from("<5I", raw, 4)
    if version != VIDEO_VERSION:
        raise FormatError(f"unsupported video file version {version}")
    body = raw[24:]
    if len(body) != f * h * w * c:
        raise FormatError(f"video payload has {len(body)} bytes, expected {f * h * w * c}")
    u8 = np.frombuffer(body, dtype=np.uint8).reshape(f, h, w, c)
    return u8.transpose(0, 3, 1, 2).astype(np.float32) / 255.0


def save_video(path, video: np.ndarray):
    Path(path).write_bytes(dumps_video(video))


def load_video(path) -> np.ndarray:
    return loads_video(Path(path).read_bytes())


def export_pngs(video: np.ndarray, out_dir, stem: str) -> list[Path]:
    from PIL import Image
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for k, frame in enumerate(to_uint8(video)):
        p = out_dir / f"{stem}_{k:03d}.png"
        Image.fromarray(frame.transpose(1, 2, 0)).save(p)
        paths.append(p)
    return paths


def psnr(a: np.ndarray, b: np.ndarray, mask: np.ndarray | None = None) -> float:
    err = (np.asarray(a, np.float64) - np.asarray(b, np.float64)) ** 2
    if mask is not None:
        err = err[..., mask]
    mse = float(err.mean())
    return float("inf") if mse == 0 else 10.0 * np.log10(1.0 / mse)


# -- dataset ------------------------------------------------------------------------
def gen_dataset(out_dir, n_clips: int, seed: int = 0, frames: int = 9, size: int = 32) -> list[dict]:
    """Write ``n_clips`` clip/flow file pairs plus ``manifest.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for i in range(n_clips):
        rng = np.random.default_rng([seed, i])
        spec = random_clip_spec(rng, seed=int(rng.integers(1 << 31)), frames=frames, size=size)
        video, flow = render_clip(spec)
        name = f"clip_{i:04d}"
        save_video(out / f"{name}.msv", video)
        save_flow(out / f"{name}.msfl", flow)
        entries.append({"name": name, **asdict(spec)})
    (out / "manifest.json").write_text(json.dumps({"seed": seed, "clips": entries}, indent=2, sort_keys=True))
    return entries


def load_dataset(data_dir) -> tuple[np.ndarray, np.ndarray, list[dict]]:
    """Videos (N, F+1, C, H, W) and flows (N, F, 2, H, W), in manifest order."""
    d = Path(data_dir)
    manifest = json.loads((d / "manifest.json").read_text())
    vids, flows = [], []
    for e in manifest["clips"]:
        vids.append(load_video(d / f"{e['name']}.msv"))
        flows.append(load_flow(d / f"{e['name']}.msfl"))
    return np.stack(vids), np.stack(flows), manifest["clips"]
