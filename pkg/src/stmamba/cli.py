"""Command line entry point: ``stmamba <subcommand> [options]``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import PRESETS, RunConfig

log = logging.getLogger("stmamba")


def _config(args) -> RunConfig:
    if args.config:
        cfg = RunConfig.load(args.config)
    else:
        cfg = PRESETS[args.preset]()
    if args.seed is not None:
        cfg.seed = args.seed
        if args.command == "gen-data":
            cfg.data.seed = args.seed
    return cfg.check()


def _out(args, default: str) -> Path:
    out = Path(args.out_dir or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_gen_data(args, cfg: RunConfig) -> int:
    from .data import gen_dataset
    out = _out(args, "data")
    n = args.n if args.n is not None else cfg.data.n_clips + cfg.data.n_test
    gen_dataset(out, n, seed=cfg.data.seed, frames=cfg.data.frames, size=cfg.data.size)
    cfg.save(out / "config.json")
    print(f"wrote {n} clips to {out}")
    return 0


def cmd_train_vae(args, cfg: RunConfig) -> int:
    from .train import run_train_vae
    out = _out(args, "runs/vae")
    summary = run_train_vae(cfg, args.data_dir, out)
    print(json.dumps(summary, indent=2))
    return 0


def cmd_train(args, cfg: RunConfig) -> int:
    from .train import run_train
    out = _out(args, "runs/diffusion")
    if args.alpha is not None:
        cfg.train.alpha = args.alpha
    summary = run_train(cfg, args.data_dir, args.vae, out, resume=args.checkpoint if args.resume else None,
                        steps=args.steps)
    print(json.dumps(summary, indent=2))
    return 0


def cmd_sample(args, cfg: RunConfig) -> int:
    from .train import sample
    out = _out(args, "samples")
    cfg.save(out / "config.json")
    n = args.n if args.n is not None else cfg.sample.n
    paths = sample(args.checkpoint, args.vae, n, cfg.seed, out, steps=args.steps, use_ema=not args.live,
                   png=args.png)
    print(f"wrote {len(paths)} videos to {out}")
    return 0


def cmd_eval_fc(args, cfg: RunConfig) -> int:
    from .data import load_video
    from .train import eval_fc
    files = sorted(Path(args.videos).glob("*.msv")) if Path(args.videos).is_dir() else [Path(args.videos)]
    if not files:
        print(f"no .msv files under {args.videos}", file=sys.stderr)
        return 2
    scores, mean = eval_fc([load_video(f) for f in files])
    for f, s in zip(files, scores):
        print(f"{f.name}\t{s:.4f}")
    print(f"mean\t{mean:.4f}")
    return 0


def cmd_bench(args, cfg: RunConfig) -> int:
    from .bench import BenchConfig, run_bench
    report = run_bench(BenchConfig(seed=cfg.seed))
    out = _out(args, "bench")
    cfg.save(out / "config.json")
    report.write(out)
    print(report.text(), end="")
    return 0


def cmd_grad_check(args, cfg: RunConfig) -> int:
    from .checks import TOL, run_suite
    results = run_suite(cfg.seed)
    bad = 0
    for name, err in results.items():
        ok = err <= TOL
        bad += not ok
        print(f"{'PASS' if ok else 'FAIL'}  {name:40s} {err:.3e}")
    print(f"{len(results) - bad}/{len(results)} checks within {TOL:g}")
    return 1 if bad else 0


COMMANDS = {"gen-data": cmd_gen_data, "train-vae": cmd_train_vae, "train": cmd_train, "sample": cmd_sample,
            "eval-fc": cmd_eval_fc, "bench": cmd_bench, "grad-check": cmd_grad_check}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration (overrides --preset)")
    common.add_argument("--preset", choices=sorted(PRESETS), default="desk")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--out-dir", default=None)
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="stmamba", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    g = sub.add_parser("gen-data", parents=[common], help="write synthetic clips with exact flow")
    g.add_argument("--n", type=int, default=None, help="number of clips")
    v = sub.add_parser("train-vae", parents=[common], help="pretrain the autoencoder, then fine-tune compensation")
    v.add_argument("--data-dir", default="data")
    t = sub.add_parser("train", parents=[common], help="train the denoiser on encoded latents")
    t.add_argument("--data-dir", default="data")
    t.add_argument("--vae", required=True, help="autoencoder checkpoint")
    t.add_argument("--checkpoint", default=None, help="checkpoint to resume from (with --resume)")
    t.add_argument("--resume", action="store_true")
    t.add_argument("--steps", type=int, default=None)
    t.add_argument("--alpha", type=float, default=None)
    s = sub.add_parser("sample", parents=[common], help="DDIM sampling and decoding")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--vae", required=True)
    s.add_argument("--n", type=int, default=None)
    s.add_argument("--steps", type=int, default=None, help="DDIM steps")
    s.add_argument("--live", action="store_true", help="use live weights instead of the EMA copy")
    s.add_argument("--png", action="store_true", help="also export per-frame PNGs")
    e = sub.add_parser("eval-fc", parents=[common], help="frame consistency of .msv videos")
    e.add_argument("videos", help="a .msv file or a directory of them")
    sub.add_parser("bench", parents=[common], help="FLOP model vs instrumented counts")
    sub.add_parser("grad-check", parents=[common], help="finite-difference gradient suite")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = _config(args)
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return COMMANDS[args.command](args, cfg)


if __name__ == "__main__":
    sys.exit(main())
