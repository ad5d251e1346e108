"""
`ncrft train`: one flag per configuration key, on top of an optional preset
and config file.
"""
import argparse

from ncrft.models.models import EncoderConfig, OptimizerSettings, RunConfig
from ncrft.services.training_service import run_train
from ncrft.utils.config import OPTIMIZER_PREFIX, PRESETS, known_keys, load_run_config


def _field_for(key: str):
    if key in RunConfig.model_fields:
        return RunConfig.model_fields[key]
    if key in EncoderConfig.model_fields:
        return EncoderConfig.model_fields[key]
    return OptimizerSettings.model_fields[key[len(OPTIMIZER_PREFIX):]]


def register(subparsers):
    parser = subparsers.add_parser("train", help="Train a sequence labeler")
    parser.add_argument("--config", help="key = value configuration file")
    parser.add_argument("--preset", choices=sorted(PRESETS), help="Named hyperparameter preset")
    for key in sorted(known_keys()):
        flag = "--" + key.replace("_", "-")
        if _field_for(key).annotation is bool:
            parser.add_argument(flag, dest=key, action="store_const", const="true", default=None)
        else:
            parser.add_argument(flag, dest=key, metavar=key.upper(), default=None)
    parser.set_defaults(handler=handle)


def handle(args: argparse.Namespace) -> int:
    overrides = {key: getattr(args, key) for key in known_keys()}
    config = load_run_config(args.config, overrides, args.preset)
    result = run_train(config)
    print(f"best_epoch\t{result.best_epoch}")
    print(f"best_dev_metric\t{result.best_dev_metric!r}")
    print(f"best_dev_nll\t{result.best_dev_nll!r}")
    if result.test_report is not None:
        print(result.test_report.to_text())
    print(f"checkpoint\t{config.checkpoint_path}")
    return 0
