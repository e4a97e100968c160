"""Command-line entry point: ``kanet <command> ...``.

Set ``KANET_THREADS`` to cap the BLAS worker pool used by every command.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import checkpoint as ckpt_io
from .config import load_config
from .errors import KanetError
from .experiments import grid_demo, scaling_experiment, write_scaling_csv
from .gradcheck import CASES, TOLERANCE, run_suite
from .hsi import parse_ratios, read_cube, synth_cube, write_cube
from .train import TrainConfig, evaluate, train


def _threads() -> int | None:
    raw = os.environ.get("KANET_THREADS")
    if not raw:
        return None
    try:
        n = int(raw)
    except ValueError:
        raise KanetError(f"KANET_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise KanetError(f"KANET_THREADS must be a positive integer, got {raw!r}")
    return n


def cmd_synth(args) -> int:
    cube = synth_cube(classes=args.classes, height=args.height, width=args.width, bands=args.bands,
                      noise_sigma=args.noise, seed=args.seed)
    write_cube(args.out, cube)
    print(f"wrote {args.out}: {cube.shape[0]}x{cube.shape[1]}x{cube.shape[2]}, "
          f"{cube.classes} classes, {cube.labeled_count} labeled pixels")
    return 0


def cmd_train(args) -> int:
    train_over, net_over = load_config(args.config) if args.config else ({}, {})
    if args.seed is not None:
        train_over["seed"] = args.seed
    cfg = TrainConfig(**train_over)
    report = train(read_cube(args.cube), args.patch, parse_ratios(args.split), cfg, net_over,
                   out_dir=args.out, pad_mode=args.pad)
    sys.stdout.write(report.text())
    print(f"run written to {args.out}")
    return 0


def cmd_eval(args) -> int:
    raster = args.raster or str(Path(args.checkpoint).with_suffix(".pgm"))
    ev = evaluate(ckpt_io.load(args.checkpoint), read_cube(args.cube), raster_path=raster)
    rows = [("all", ev.metrics)] + list(ev.splits.items())
    print(f"{'pixels':<8}{'OA':>9}{'AA':>9}{'Kappa':>9}")
    for name, m in rows:
        print(f"{name:<8}{m.oa:>9.4f}{m.aa:>9.4f}{m.kappa:>9.4f}")
    print("per-class accuracy (all labeled pixels):")
    for k, acc in enumerate(ev.metrics.per_class, start=1):
        print(f"  class {k}: {acc:.4f}")
    print(f"class map written to {raster}")
    return 0


def cmd_gradcheck(args) -> int:
    names = [args.layer] if args.layer else None
    failed = 0
    for r in run_suite(names):
        status = "ok" if r.passed else "FAIL"
        failed += not r.passed
        print(f"{r.name:<16} seed {r.seed}  max rel error {r.error:.3e}  {status}")
    print(f"{'all passed' if not failed else f'{failed} failed'} (tolerance {TOLERANCE:g})")
    return 1 if failed else 0


def cmd_scaling(args) -> int:
    result = scaling_experiment(seed=args.seed)
    write_scaling_csv(args.out, result)
    for row in result.rows:
        print(f"{row.family:<4} G={row.grid_size:<3} N={row.parameters:<4} loss={row.loss:.3e}")
    print(f"log-log slope: kan {result.kan_slope:.3f}, mlp {result.mlp_slope:.3f} (reference exponent -4)")
    return 0


def cmd_grid_demo(args) -> int:
    sys.stdout.write(grid_demo(args.epsilon, grid_size=args.grid_size, seed=args.seed).text())
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="kanet", description="3D KAN convolution networks for hyperspectral cubes")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write a synthetic HSC1 cube")
    s.add_argument("--out", default="synth.hsc1")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--classes", type=int, default=5)
    s.add_argument("--height", type=int, default=32)
    s.add_argument("--width", type=int, default=32)
    s.add_argument("--bands", type=int, default=16)
    s.add_argument("--noise", type=float, default=0.05)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train a KANet on an HSC1 cube")
    t.add_argument("--cube", required=True)
    t.add_argument("--patch", type=int, required=True, help="odd patch side M")
    t.add_argument("--split", default="6:1:3", help="train:val:test ratio")
    t.add_argument("--config", help="key = value file with TrainConfig/NetworkConfig fields")
    t.add_argument("--seed", type=int, help="overrides the config seed")
    t.add_argument("--out", required=True, help="output directory")
    t.add_argument("--pad", choices=("reflect", "zero"), default="reflect")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a cube")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--cube", required=True)
    e.add_argument("--raster", help="PGM class-map path (default: next to the checkpoint)")
    e.set_defaults(func=cmd_eval)

    g = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    g.add_argument("--layer", choices=sorted(CASES))
    g.set_defaults(func=cmd_gradcheck)

    c = sub.add_parser("scaling", help="KAN vs MLP parameter scaling fit")
    c.add_argument("--out", default="scaling.csv")
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(func=cmd_scaling)

    d = sub.add_parser("grid-demo", help="show knots before and after a grid update")
    d.add_argument("--epsilon", type=float, default=0.02)
    d.add_argument("--grid-size", type=int, default=5)
    d.add_argument("--seed", type=int, default=0)
    d.set_defaults(func=cmd_grid_demo)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with threadpool_limits(limits=_threads()):
            return args.func(args)
    except (KanetError, OSError) as exc:
        print(f"kanet {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
