import argparse

from ncrft.services.gradcheck_service import GRADIENT_TOLERANCE, run_gradcheck
from ncrft.utils.errors import ConfigError, NumericError


def register(subparsers):
    parser = subparsers.add_parser("gradcheck", help="Finite-difference check of every training objective")
    parser.add_argument("--seeds", type=int, default=20, help="Number of random instances per objective")
    parser.add_argument("--length", type=int, default=3)
    parser.add_argument("--labels", type=int, default=2)
    parser.set_defaults(handler=handle)


def handle(args: argparse.Namespace) -> int:
    if args.seeds < 1 or args.length < 1 or args.labels < 1:
        raise ConfigError("--seeds, --length and --labels must be positive")
    summary = run_gradcheck(range(args.seeds), args.length, args.labels)
    print(summary.to_string(float_format=lambda value: f"{value:.3e}"))
    failed = summary.index[~summary["passed"]].tolist()
    if failed:
        raise NumericError(f"Relative gradient error >= {GRADIENT_TOLERANCE:g} for {', '.join(failed)}")
    return 0
