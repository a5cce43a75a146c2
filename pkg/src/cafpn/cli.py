"""Command-line entry point.

Exit status: 0 success, 1 a check failed, 2 usage or I/O error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import bench, checks, demo, pyramid, tnsr
from .tensor import ShapeError

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2

FORMULA_TRIPLES = [(8, 4, 4), (1, 1, 1), (2, 3, 5), (4, 4, 4), (3, 7, 2), (16, 2, 8), (5, 5, 5),
               (6, 1, 9), (12, 3, 3), (8, 8, 8), (7, 6, 4), (32, 4, 4)]


def _sizes(text: str) -> list[int]:
    try:
        sizes = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad size list {text!r}")
    if not sizes or min(sizes) < 1:
        raise argparse.ArgumentTypeError("sizes must be positive integers")
    return sizes


def cmd_selfcheck(args) -> int:
    results = checks.run_selfcheck(args.data_dir)
    if args.json:
        print(json.dumps([r.__dict__ for r in results], indent=2))
    else:
        for r in results:
            print(f"{'PASS' if r.passed else 'FAIL'}  {r.name:<40} {r.seconds:6.2f}s  {r.detail}")
        failed = sum(not r.passed for r in results)
        print(f"{len(results) - failed}/{len(results)} suites passed")
    return EXIT_OK if all(r.passed for r in results) else EXIT_FAIL


def cmd_gradcheck(args) -> int:
    report = checks.run_gradcheck(args.seed, args.h, args.tol)
    for name, err in report.errors.items():
        print(f"{'ok ' if err < args.tol else 'BAD'}  {name:<20} {err:.3e}")
    name, err = report.worst
    if report.passed:
        print(f"all {len(report.errors)} gradients within {args.tol:g} (worst {name} {err:.3e})")
        return EXIT_OK
    print(f"gradient check failed: worst parameter {name} relative error {err:.3e} >= {args.tol:g}",
          file=sys.stderr)
    return EXIT_FAIL


def cmd_bench(args) -> int:
    try:
        records, fit = bench.scaling_experiment(args.kind, args.channels, args.sizes, args.out,
                                                trials=args.trials, seed=args.seed,
                                                dtype=np.dtype(args.dtype))
    except ValueError as exc:
        print(f"bench: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"bench: {exc}", file=sys.stderr)
        return EXIT_USAGE
    for r in records:
        print(f"{r.kind} C={r.C} N={r.N:>7} macs={r.macs:>14} aux_peak={r.aux_peak:>11} wall={r.wall_ns / 1e6:9.3f} ms")
    print(f"log-log MAC exponent {fit.exponent:.4f} (r^2 {fit.r2:.6f})")
    print(f"linearized core undercuts softmax from N = {bench.crossover(args.channels)}")
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_flops(args) -> int:
    if not args.check_eq8:
        macs, aux = bench.flops_formula_sa(args.channels, args.height, args.width)
        print(f"C={args.channels} H={args.height} W={args.width}: macs={macs} aux={aux}")
        return EXIT_OK
    ok = True
    for c, h, w in FORMULA_TRIPLES:
        counted = bench.instrumented_sa_block(c, h, w).macs
        formula, aux = bench.flops_formula_sa(c, h, w)
        match = counted == formula
        ok &= match
        print(f"{'ok ' if match else 'BAD'}  C={c:<3} H={h:<2} W={w:<2} formula={formula:<10} counted={counted}")
    print("instrumented counts match 4HWC^2 + 2H^2W^2C" if ok else "count mismatch")
    return EXIT_OK if ok else EXIT_FAIL


def cmd_demo(args) -> int:
    try:
        if args.input is not None:
            image = demo.load_image(args.input)
        else:
            h, w = args.random
            image = demo.random_image(h, w, args.seed)
        params = pyramid.load_params(args.params) if args.params else None
        levels = demo.run_demo(image, args.dump_dir, args.seed, params)
    except (tnsr.TnsrError, ShapeError, OSError, KeyError) as exc:
        print(f"demo: {exc}", file=sys.stderr)
        return EXIT_USAGE
    for level in sorted(levels):
        print(f"P{level}: {'x'.join(map(str, levels[level].shape[1:]))} -> {os.path.join(args.dump_dir, f'P{level}.pgm')}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cafpn", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("selfcheck", help="run every invariant suite")
    p.add_argument("--data-dir", default=None, help="golden fixture directory")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_selfcheck)

    p = sub.add_parser("gradcheck", help="analytic vs finite-difference gradients")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--h", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("bench", help="MAC/storage scaling sweep")
    p.add_argument("--kind", choices=("sa", "lt"), required=True)
    p.add_argument("--channels", type=int, required=True)
    p.add_argument("--sizes", type=_sizes, required=True, help="comma-separated sequence lengths")
    p.add_argument("--out", required=True)
    p.add_argument("--trials", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dtype", choices=("float32", "float64"), default="float32")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("flops", help="closed-form softmax attention cost")
    p.add_argument("--check-eq8", action="store_true",
                   help="compare instrumented counts with the closed form")
    p.add_argument("--channels", type=int, default=8)
    p.add_argument("--height", type=int, default=4)
    p.add_argument("--width", type=int, default=4)
    p.set_defaults(func=cmd_flops)

    p = sub.add_parser("demo", help="forward one image and dump P2..P6 activations")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--input", help="TNSR image, 1 x 3 x H x W")
    src.add_argument("--random", nargs=2, type=int, metavar=("H", "W"))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--params", help="parameter manifest; seeded parameters when omitted")
    p.add_argument("--dump-dir", required=True)
    p.set_defaults(func=cmd_demo)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
