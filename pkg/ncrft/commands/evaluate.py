"""
`ncrft eval`: score one checkpoint, or several independent runs with --multi.
"""
import argparse

from ncrft.models.models import TaskType
from ncrft.services.eval_service import format_summary
from ncrft.services.inference_service import run_eval, run_eval_multi
from ncrft.utils.errors import ConfigError


def register(subparsers):
    parser = subparsers.add_parser("eval", help="Evaluate checkpoints on a gold-tagged column file")
    target = parser.add_mutually_exclusive_group(required=True)
    target.add_argument("--checkpoint", help="Model checkpoint")
    target.add_argument("--multi", nargs="+", metavar="CHECKPOINT", help="Independent runs to summarize")
    parser.add_argument("--data", required=True, help="Column file with gold tags")
    parser.add_argument("--beam", type=int, default=None,
                        help="Decoding beam width (default: 512 for ncrft, greedy for rnnt)")
    parser.add_argument("--task", choices=[task.value for task in TaskType], default=None)
    parser.add_argument("--token-column", type=int, default=0)
    parser.add_argument("--tag-column", type=int, default=-1)
    parser.add_argument("--nll", action="store_true", help="Also report mean per-sentence NLL")
    parser.add_argument("--records", help="Write name<TAB>value metric records to this file")
    parser.set_defaults(handler=handle)


def handle(args: argparse.Namespace) -> int:
    if args.beam is not None and args.beam < 1:
        raise ConfigError(f"--beam must be positive, got {args.beam}")
    task = TaskType(args.task) if args.task else None
    if args.multi:
        reports, summary = run_eval_multi(args.multi, args.data, args.beam, task, args.token_column,
                                          args.tag_column)
        for report in reports:
            print(report.to_text())
            print()
        print(format_summary(summary))
        return 0

    report = run_eval(args.checkpoint, args.data, args.beam, task, args.token_column, args.tag_column,
                      with_nll=args.nll)
    print(report.to_text())
    if args.records:
        with open(args.records, "w", encoding="utf-8") as stream:
            stream.write(report.to_records())
    return 0
