import argparse
import sys
from typing import List, Optional

from dotenv import load_dotenv

# Load environment variables
load_dotenv()

from ncrft.commands import evaluate, gradcheck, predict, synth, train
from ncrft.utils.errors import ConfigError, DataError, TaggerError
from ncrft.utils.logger import app_logger, log_error


class TaggerArgumentParser(argparse.ArgumentParser):
    """Usage errors become ConfigError so they share the exit-code path"""

    def error(self, message):
        raise ConfigError(f"{self.prog}: {message}")


def build_parser() -> TaggerArgumentParser:
    parser = TaggerArgumentParser(
        prog="ncrft",
        description="Sequence labeling with linear-chain CRFs, RNN transducers and NCRF transducers",
    )
    subparsers = parser.add_subparsers(dest="command", required=True)
    for command in (train, evaluate, predict, gradcheck, synth):
        command.register(subparsers)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """Run one subcommand; returns the process exit code"""
    try:
        args = build_parser().parse_args(argv)
        return args.handler(args)
    except TaggerError as e:
        app_logger.debug(f"{type(e).__name__}: {e.detail}")
        print(f"Error: {e.detail}", file=sys.stderr)
        return e.exit_code
    except ValueError as e:
        log_error(app_logger, e, "invalid input")
        print(f"Error: {e}", file=sys.stderr)
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())
