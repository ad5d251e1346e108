import argparse

from ncrft.services.synthetic_service import SyntheticTask, run_synthetic
from ncrft.utils.errors import ConfigError


def register(subparsers):
    parser = subparsers.add_parser("synth", help="Generate a seeded synthetic labeling corpus")
    parser.add_argument("--task", choices=[task.value for task in SyntheticTask],
                        default=SyntheticTask.SECOND_ORDER_PARITY.value)
    parser.add_argument("--seed", type=int, default=1)
    parser.add_argument("--train-size", type=int, default=2000)
    parser.add_argument("--dev-size", type=int, default=500)
    parser.add_argument("--length", type=int, default=10)
    parser.add_argument("--noise", type=float, default=0.0, help="Flip probability for first-order-chain")
    parser.add_argument("--out-dir", default=".")
    parser.set_defaults(handler=handle)


def handle(args: argparse.Namespace) -> int:
    if args.length < 1 or args.train_size < 0 or args.dev_size < 0:
        raise ConfigError("--length must be positive and sizes non-negative")
    if not 0.0 <= args.noise <= 1.0:
        raise ConfigError(f"--noise must be a probability, got {args.noise}")
    files = run_synthetic(SyntheticTask(args.task), args.seed, args.out_dir, args.train_size, args.dev_size,
                          args.length, args.noise)
    print(f"train\t{files.train_path}")
    print(f"dev\t{files.dev_path}")
    print(f"entropy\t{files.entropy!r}")
    print(f"first_order_bound\t{files.first_order_bound!r}")
    return 0
