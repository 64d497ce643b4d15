"""Command line front end: single solves, convergence studies, frame caches.

Exit codes: 0 success, 1 configuration error, 2 solver did not converge.
"""

from __future__ import annotations

import argparse
import logging
import sys

from . import harness
from .operators import ConfigurationError


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigurationError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="ellipt3d", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("-q", "--quiet", action="store_true", help="suppress progress logs")
        p.add_argument("--problem", required=True, help="benchmark problem name")
        p.add_argument("--tol", type=float, default=1e-8, help="max-norm residual target")
        p.add_argument("--kmax", type=int, default=harness.DEFAULT_KMAX,
                       help="stencil-width cap for the frame hierarchy")
        p.add_argument("--out", help="output CSV path")
        p.add_argument("--cache", help="frame cache file (overrides ELLIPT3D_CACHE)")
        p.add_argument("--no-plot", action="store_true", help="skip the convergence figure")
        p.add_argument("--timings", action="store_true",
                       help="fill the seconds column (breaks byte reproducibility)")
        p.add_argument("--seed", type=int, default=0)

    p_solve = sub.add_parser("solve", help="solve one problem at a single resolution")
    common(p_solve)
    p_solve.add_argument("--n", type=int, required=True, help="lattice count per axis")

    p_study = sub.add_parser("study", help="run a convergence study over several n")
    common(p_study)
    p_study.add_argument("--ns", default="8,12,16,20",
                         help="comma-separated lattice counts, increasing")

    p_frames = sub.add_parser("frames", help="precompute and store the frame hierarchy")
    p_frames.add_argument("-q", "--quiet", action="store_true", help="suppress progress logs")
    p_frames.add_argument("--kmax", type=int, required=True)
    p_frames.add_argument("--cache", help="cache file path")
    return parser


def _study_config(args, ns) -> harness.StudyConfig:
    return harness.StudyConfig(
        problem=args.problem,
        ns=ns,
        tolerance=args.tol,
        k_max=args.kmax,
        out=args.out,
        cache=args.cache,
        plot=not args.no_plot,
        timings=args.timings,
        seed=args.seed,
    )


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(
            level=logging.WARNING if args.quiet else logging.INFO,
            format="%(message)s",
            stream=sys.stderr,
        )
        if args.command == "frames":
            path = harness.precompute_frames(args.kmax, args.cache)
            print(path)
            return 0
        if args.command == "solve":
            config = _study_config(args, (args.n,))
        else:
            try:
                ns = tuple(int(tok) for tok in args.ns.split(",") if tok)
            except ValueError as exc:
                raise ConfigurationError(f"bad --ns list {args.ns!r}: {exc}") from exc
            config = _study_config(args, ns)
        result = harness.run_study(config)
        for rec in result.records:
            bits = [
                f"n={rec.n}",
                f"h={rec.h:.6g}",
                f"max_error={rec.max_error:.6g}",
                f"iters={rec.iters}",
                f"converged={rec.converged}",
            ]
            if rec.c is not None:
                bits.append(f"c={rec.c:.6g}")
            print("  ".join(bits))
        if result.rate is not None:
            print(f"fitted rate: {result.rate:.3f}")
        return 0 if result.all_converged else 2
    except ConfigurationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
