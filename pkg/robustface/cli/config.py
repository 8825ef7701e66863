import copy
import json
import logging
import sys
from pathlib import Path
from typing import Any, Dict, Optional

from termcolor import colored, cprint

from ..errors import ConfigError

DEFAULT_CONFIG = {
    'mode': None,
    'seed': 0,
    'run_dir': None,
    'dataset': {
        'manifest': None,
        'min_images': 2,
        'val_fraction': 0.1,
    },
    'model': {
        'input_dim': None,
        'hidden_dims': [256, 128],
        'embed_dim': 64,
        'project_dim': 32,
        'use_dual_norm': False,
    },
    'train': {
        'epochs': None,
        'batch_size': 32,
        'learning_rate': None,
        'momentum': 0.9,
        'label_fraction': 0.0,
        'checkpoint_every': 0,
        'triplets_per_epoch': None,
        'eval_every': 0,
        'eval_triplets': 200,
    },
    'attack': {
        'epsilon': 8 / 255,
        'alpha': 2 / 255,
        'iterations': 7,
        'random_start': False,
        'seed': 0,
    },
    'augment': {
        'crop_scale_min': 0.7,
        'jitter_brightness': 0.2,
        'jitter_contrast': 0.2,
        'blur_sigma_max': 1.0,
        'blur_probability': 0.5,
        'seed': 0,
    },
    'contrastive': {
        'temperature': 0.5,
    },
    'triplet': {
        'margin': 0.2,
        'distance': 'squared_euclidean',
    },
}

# Types of keys whose default is null.
NULLABLE = {
    '/mode': str,
    '/run_dir': str,
    '/dataset/manifest': str,
    '/model/input_dim': int,
    '/train/epochs': int,
    '/train/learning_rate': float,
    '/train/triplets_per_epoch': int,
}

MODE_DEFAULTS = {
    'standard': {'epochs': 30, 'learning_rate': 0.05},
    'triplet-adv': {'epochs': 100, 'learning_rate': 0.01},
    'pretrain': {'epochs': 50, 'learning_rate': 0.05},
    'pretrain-semi': {'epochs': 50, 'learning_rate': 0.05},
    'finetune': {'epochs': 25, 'learning_rate': 0.01},
}
SEMI_DEFAULT_FRACTION = 0.1


def print_warning(msg: str, quiet: bool = False):
    if not quiet:
        cprint(f"Warning: {msg}", 'yellow', file=sys.stderr)


def print_error(msg: str, quiet: bool = False):
    if not quiet:
        cprint(f"Error: {msg}", 'red', file=sys.stderr)


def print_progress(msg: str, quiet: bool = False, end="\n"):
    if not quiet:
        cprint(msg, 'green', end=end, file=sys.stderr)


class ColourFormatter(logging.Formatter):
    COLOURS = {
        'DEBUG': 'cyan',
        'INFO': 'green',
        'WARNING': 'yellow',
        'ERROR': 'red',
        'CRITICAL': 'red',
    }

    def format(self, record):
        record = copy.copy(record)
        colour = self.COLOURS.get(record.levelname)
        if colour:
            record.levelname = colored(record.levelname, colour)
        return super().format(record)


def setup_logging(quiet: bool = False, verbose: bool = False) -> None:
    level = logging.WARNING if quiet else logging.DEBUG if verbose else logging.INFO
    root = logging.getLogger('robustface')
    for handler in list(root.handlers):
        if getattr(handler, '_robustface', False):
            root.removeHandler(handler)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(ColourFormatter('%(levelname)s %(name)s: %(message)s'))
    handler._robustface = True
    root.addHandler(handler)
    root.setLevel(level)


def _expected_type(pointer: str) -> type:
    node = DEFAULT_CONFIG
    for part in pointer.strip('/').split('/'):
        node = node[part]
    return NULLABLE[pointer] if node is None else type(node)


def _check_type(pointer: str, value: Any) -> None:
    if value is None:
        if pointer in NULLABLE:
            return
        raise ConfigError(pointer, "must not be null")
    expected = _expected_type(pointer)
    if expected is bool:
        ok = isinstance(value, bool)
    elif expected is int:
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif expected is float:
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    elif expected is list:
        ok = isinstance(value, list) and all(isinstance(v, int) and not isinstance(v, bool) for v in value)
    else:
        ok = isinstance(value, expected)
    if not ok:
        raise ConfigError(pointer, f"expected {expected.__name__}, got {type(value).__name__} {value!r}")


def merge_config(defaults: Dict[str, Any], overrides: Dict[str, Any], pointer: str = "") -> Dict[str, Any]:
    """Deep-merge ``overrides`` onto ``defaults``; unknown keys and wrong types are rejected."""
    merged = copy.deepcopy(defaults)
    for key, value in overrides.items():
        path = f"{pointer}/{key}"
        if key not in defaults:
            raise ConfigError(path, "unknown key")
        default = defaults[key]
        if isinstance(default, dict):
            if not isinstance(value, dict):
                raise ConfigError(path, f"expected an object, got {type(value).__name__}")
            merged[key] = merge_config(default, value, path)
        else:
            _check_type(path, value)
            merged[key] = copy.deepcopy(value)
    return merged


def get_config(path: Optional[str] = None) -> Dict[str, Any]:
    """Defaults merged with the JSON file at ``path`` (if any)."""
    if not path:
        return copy.deepcopy(DEFAULT_CONFIG)
    try:
        with open(Path(path), encoding='utf-8') as f:
            config = json.load(f)
    except FileNotFoundError:
        raise ConfigError("/", f"config file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise ConfigError("/", f"{path} is not valid JSON: {e}") from None
    if not isinstance(config, dict):
        raise ConfigError("/", "the config document must be a JSON object")
    return merge_config(DEFAULT_CONFIG, config)


def apply_overrides(config: Dict[str, Any], overrides: Dict[str, Any]) -> Dict[str, Any]:
    """Set ``/section/key`` pointers from command-line flags; ``None`` values are skipped."""
    patch: Dict[str, Any] = {}
    for pointer, value in overrides.items():
        if value is None:
            continue
        node = patch
        parts = pointer.strip('/').split('/')
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = value
    return merge_config(config, patch)


def resolve_mode(config: Dict[str, Any], mode: str) -> Dict[str, Any]:
    """Fill mode-dependent nulls so the persisted copy is fully materialized."""
    resolved = copy.deepcopy(config)
    resolved['mode'] = mode
    for key, value in MODE_DEFAULTS[mode].items():
        if resolved['train'][key] is None:
            resolved['train'][key] = value
    if mode == 'pretrain-semi' and resolved['train']['label_fraction'] == 0:
        resolved['train']['label_fraction'] = SEMI_DEFAULT_FRACTION
    return resolved
