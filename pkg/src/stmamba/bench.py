"""Cost benchmark: closed-form FLOP model vs instrumented counts, with scaling fits.

The report table (counts, model values, fits) is deterministic for a given
config; wall time and peak memory go to a separate timing file.
"""
from __future__ import annotations

import csv
import io
import time
import tracemalloc
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Tensor, counters, no_grad
from .blocks import N_MOD, ModelConfig, SpatioTemporalBlock, STAttentionBlock, flops_model


@dataclass
class BenchConfig:
    d: int = 64
    heads: int = 4
    d_state: int = 16
    frames: int = 4
    window: int = 8
    chunk_size: int = 8
    sizes: list[tuple[int, int]] = field(default_factory=lambda: [(8, 8), (8, 16), (16, 16)])
    seed: int = 0
    include_backward: bool = False


@dataclass
class BenchRow:
    l: int
    grid: tuple[int, int]
    ours_counted: int
    ours_attention: int
    ours_model: int
    st_counted: int
    st_attention: int
    st_model: int
    wall_ours: float = 0.0
    wall_st: float = 0.0
    peak_bytes_ours: int = 0
    peak_bytes_st: int = 0

    @property
    def ours_ratio(self) -> float:
        return self.ours_model / self.ours_counted

    @property
    def st_ratio(self) -> float:
        return self.st_model / self.st_counted


def _measure(fn):
    tracemalloc.start()
    t0 = time.perf_counter()
    with counters.MacCounter() as c:
        fn()
    wall = time.perf_counter() - t0
    _, peak = tracemalloc.get_traced_memory()
    tracemalloc.stop()
    return c, wall, peak


def bench_size(cfg: BenchConfig, grid: tuple[int, int]) -> BenchRow:
    hb, wb = grid
    l = hb * wb
    mcfg = ModelConfig(in_channels=1, latent_hw=grid, d=cfg.d, depth=1, heads=cfg.heads, window=cfg.window,
                       d_state=cfg.d_state, chunk_size=cfg.chunk_size,
                       dropout=0.0, grid=grid)
    rng = np.random.default_rng(cfg.seed)
    block = SpatioTemporalBlock(mcfg, rng).eval()
    st = STAttentionBlock(cfg.d, cfg.heads, rng)
    z = rng.standard_normal((1, cfg.frames, l, cfg.d)).astype(np.float32)
    cond = Tensor(rng.standard_normal((1, N_MOD, cfg.d)).astype(np.float32) * 0.1)

    def run(f):
        if cfg.include_backward:
            zt = Tensor(z, requires_grad=True)
            f(zt).sum().backward()
        else:
            with no_grad():
                f(Tensor(z))

    c_ours, w_ours, m_ours = _measure(lambda: run(lambda x: block(x, cond)))
    c_st, w_st, m_st = _measure(lambda: run(st))
    model = flops_model(cfg.frames, l, cfg.d, cfg.window, cfg.d_state)
    return BenchRow(l=l, grid=grid, ours_counted=c_ours.total, ours_attention=c_ours["attention"],
                    ours_model=model["ours"], st_counted=c_st.total, st_attention=c_st["attention"],
                    st_model=model["st_attention"], wall_ours=w_ours, wall_st=w_st, peak_bytes_ours=m_ours,
                    peak_bytes_st=m_st)


def fit_exponent(ls, values) -> float:
    """Slope of log(value) against log(l) by least squares."""
    x, y = np.log(np.asarray(ls, float)), np.log(np.asarray(values, float))
    return float(np.polyfit(x, y, 1)[0])


@dataclass
class BenchReport:
    rows: list[BenchRow]
    ours_exponent: float
    st_exponent: float

    def table(self) -> str:
        out = io.StringIO()
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["l", "grid", "ours_counted_macs", "ours_model", "ours_model_over_counted",
                    "st_counted_macs", "st_attention_macs", "st_model", "st_model_over_counted"])
        for r in self.rows:
            w.writerow([r.l, f"{r.grid[0]}x{r.grid[1]}", r.ours_counted, r.ours_model, f"{r.ours_ratio:.6f}",
                        r.st_counted, r.st_attention, r.st_model, f"{r.st_ratio:.6f}"])
        return out.getvalue()

    def timing(self) -> str:
        out = io.StringIO()
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["l", "wall_ours_s", "wall_st_s", "peak_bytes_ours", "peak_bytes_st"])
        for r in self.rows:
            w.writerow([r.l, f"{r.wall_ours:.6f}", f"{r.wall_st:.6f}", r.peak_bytes_ours, r.peak_bytes_st])
        return out.getvalue()

    def text(self) -> str:
        lines = ["cost benchmark (one block, forward)", ""]
        lines.append(f"{'l':>5} {'ours counted':>14} {'ours model':>14} {'ratio':>8} "
                     f"{'st counted':>14} {'st model':>14} {'ratio':>8}")
        for r in self.rows:
            lines.append(f"{r.l:>5} {r.ours_counted:>14} {r.ours_model:>14} {r.ours_ratio:>8.4f} "
                         f"{r.st_counted:>14} {r.st_model:>14} {r.st_ratio:>8.4f}")
        lines += ["", f"fitted exponent in l, ours (whole block):           {self.ours_exponent:.4f}",
                  f"fitted exponent in l, attention scores (baseline):  {self.st_exponent:.4f}"]
        return "\n".join(lines) + "\n"

    def write(self, out_dir) -> list[Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = [out / "bench.csv", out / "bench.txt", out / "bench_timing.csv"]
        for p, body in zip(paths, (self.table(), self.text(), self.timing())):
            p.write_text(body)
        return paths


def run_bench(cfg: BenchConfig | None = None) -> BenchReport:
    cfg = cfg or BenchConfig()
    rows = [bench_size(cfg, tuple(g)) for g in cfg.sizes]
    ls = [r.l for r in rows]
    return BenchReport(rows=rows, ours_exponent=fit_exponent(ls, [r.ours_counted for r in rows]),
                       st_exponent=fit_exponent(ls, [r.st_attention for r in rows]))
