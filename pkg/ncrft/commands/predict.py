import argparse

from ncrft.services.inference_service import run_predict
from ncrft.utils.errors import ConfigError


def register(subparsers):
    parser = subparsers.add_parser("predict", help="Append a predicted tag column to a column file")
    parser.add_argument("--checkpoint", required=True)
    parser.add_argument("--input", required=True)
    parser.add_argument("--output", required=True)
    parser.add_argument("--beam", type=int, default=None)
    parser.add_argument("--token-column", type=int, default=0)
    parser.set_defaults(handler=handle)


def handle(args: argparse.Namespace) -> int:
    if args.beam is not None and args.beam < 1:
        raise ConfigError(f"--beam must be positive, got {args.beam}")
    count = run_predict(args.checkpoint, args.input, args.output, args.beam, args.token_column)
    print(f"sentences\t{count}")
    return 0
