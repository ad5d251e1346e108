"""
Run configuration files: line-oriented `key = value` text parsed with
python-dotenv. Encoder keys use the EncoderConfig field names; optimizer keys
carry an `optimizer_` prefix.

Precedence: preset < file < overrides.
"""
from enum import Enum
from typing import Any, Dict, Mapping, Optional

from dotenv import dotenv_values
from pydantic import ValidationError

from ncrft.models.models import EncoderConfig, OptimizerSettings, RunConfig
from ncrft.utils.errors import ConfigError

OPTIMIZER_PREFIX = "optimizer_"

PRESETS: Dict[str, Dict[str, Any]] = {
    "pos": {
        "task": "accuracy", "tag_scheme": "raw", "word_dim": 100,
        "optimizer_kind": "sgd-momentum", "optimizer_learning_rate": 0.01,
        "optimizer_momentum": 0.9, "optimizer_decay": 0.05,
    },
    "english-ner": {
        "task": "f1", "tag_scheme": "bioes", "word_dim": 100,
        "optimizer_kind": "sgd-momentum", "optimizer_learning_rate": 0.01,
        "optimizer_momentum": 0.9, "optimizer_decay": 0.05,
    },
    "chunking": {
        "task": "f1", "tag_scheme": "bioes", "word_dim": 50, "f_layers": 2, "dev_size": 1000,
        "optimizer_kind": "adam", "optimizer_learning_rate": 1e-3, "optimizer_decay": 0.0,
    },
    "dutch-ner": {
        "task": "f1", "tag_scheme": "bioes", "word_dim": 64,
        "optimizer_kind": "adam", "optimizer_learning_rate": 1e-3, "optimizer_decay": 0.0,
    },
    "finetune": {
        "model_kind": "ncrft",
        "optimizer_kind": "sgd-momentum", "optimizer_learning_rate": 5e-3, "optimizer_momentum": 0.9,
    },
}

_ENCODER_KEYS = set(EncoderConfig.model_fields)
_OPTIMIZER_KEYS = {OPTIMIZER_PREFIX + key for key in OptimizerSettings.model_fields}
_RUN_KEYS = set(RunConfig.model_fields) - {"encoder", "optimizer"}


def known_keys() -> set:
    return _RUN_KEYS | _ENCODER_KEYS | _OPTIMIZER_KEYS


def _text(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, Enum):
        return str(value.value)
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def flatten_config(config: RunConfig) -> Dict[str, str]:
    """RunConfig -> flat key/text map"""
    flat = {}
    for key in _RUN_KEYS:
        flat[key] = _text(getattr(config, key))
    for key in _ENCODER_KEYS:
        flat[key] = _text(getattr(config.encoder, key))
    for key in OptimizerSettings.model_fields:
        flat[OPTIMIZER_PREFIX + key] = _text(getattr(config.optimizer, key))
    return flat


def unflatten_config(flat: Mapping[str, Any]) -> Dict[str, Any]:
    """Flat key map -> nested keyword arguments for RunConfig"""
    unknown = sorted(set(flat) - known_keys())
    if unknown:
        raise ConfigError(f"Unknown configuration keys: {', '.join(unknown)}")
    nested: Dict[str, Any] = {"encoder": {}, "optimizer": {}}
    for key, value in flat.items():
        if key in _ENCODER_KEYS:
            nested["encoder"][key] = value
        elif key in _OPTIMIZER_KEYS:
            nested["optimizer"][key[len(OPTIMIZER_PREFIX):]] = value
        else:
            nested[key] = value
    return nested


def build_run_config(flat: Mapping[str, Any]) -> RunConfig:
    try:
        return RunConfig(**unflatten_config(flat))
    except ValidationError as e:
        problems = "; ".join(
            f"{'.'.join(str(part) for part in error['loc']) or 'config'}: {error['msg']}" for error in e.errors()
        )
        raise ConfigError(f"Invalid configuration: {problems}")


def read_config_file(path: str) -> Dict[str, str]:
    try:
        with open(path, "r", encoding="utf-8") as stream:
            values = dotenv_values(stream=stream)
    except OSError as e:
        raise ConfigError(f"Cannot read configuration file {path}: {e}")
    return {key.strip().lower(): ("" if value is None else value) for key, value in values.items()}


def load_run_config(path: Optional[str] = None, overrides: Optional[Mapping[str, Any]] = None,
                    preset: Optional[str] = None) -> RunConfig:
    """
    Build a validated RunConfig from a preset, a config file and overrides.

    Args:
        path: Optional `key = value` file
        overrides: Flat keys (command-line flags); None values are ignored
        preset: Optional preset name

    Raises:
        ConfigError: Unknown preset or key, unreadable file, or invalid values
    """
    flat: Dict[str, Any] = {}
    if preset:
        if preset not in PRESETS:
            raise ConfigError(f"Unknown preset {preset!r}; choose from {', '.join(sorted(PRESETS))}")
        flat.update(PRESETS[preset])
    if path:
        flat.update(read_config_file(path))
    for key, value in (overrides or {}).items():
        if value is not None:
            flat[key] = value
    return build_run_config(flat)


def _quote(text: str) -> str:
    if text and (text != text.strip() or any(ch in text for ch in " \t#'\"")):
        return "'" + text + "'" if "'" not in text else '"' + text.replace('"', '\\"') + '"'
    return text


def dump_run_config(config: RunConfig) -> str:
    flat = flatten_config(config)
    return "".join(f"{key} = {_quote(flat[key])}\n" for key in sorted(flat))


def save_run_config(config: RunConfig, path: str):
    with open(path, "w", encoding="utf-8") as stream:
        stream.write(dump_run_config(config))
