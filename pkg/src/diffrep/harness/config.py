"""Experiment configuration files.

Configs are TOML documents carrying ``version = 1``. Every key has a
default (see ``DEFAULTS``); a file only lists what it changes. Command-line
overrides use dotted paths, e.g. ``--set probe.t=150 --set data.classes=6``;
values are parsed as TOML literals and fall back to plain strings.

TOML has no null, so optional numbers use 0 for "unset" (``pool = 0``
means no pooling, ``final_block = 0`` means "choose automatically").
"""

from __future__ import annotations

import copy
import json
from pathlib import Path
from typing import Iterable, Optional

import tomli

CONFIG_VERSION = 1
TASKS = ("train-diffusion", "sample", "extract", "probe", "difformer", "diffeed", "cka", "knn", "grid")

DEFAULTS = {
    "version": CONFIG_VERSION,
    "seed": 0,
    "out": "runs/out",
    "workers": 1,
    "model": {
        "preset": "toy",  # toy | mini | paper
        "checkpoint": "",  # load weights (and config) from here when set
    },
    "schedule": {"T": 1000, "beta_start": 1e-4, "beta_end": 0.02},
    "data": {
        "source": "synthetic",  # synthetic | image-directory | packed
        "path": "",
        "classes": 4,
        "per_class": 64,
        "size": 32,
        "num_shapes": 0,
        "difficulty": 1.0,
        "separable": False,
        "eval_fraction": 0.25,
        "flip": False,
    },
    "train": {"steps": 2000, "batch_size": 8, "lr": 1e-3, "checkpoint_every": 500, "window": 50},
    "sample": {"count": 4, "noise_scale": 1.0},
    "extract": {"t": 150, "b": 7, "pool": 0, "split": "train", "flatten": True},
    "probe": {
        "t": 150,
        "b": 7,
        "pool": 0,
        "head": "linear",  # linear | mlp | cnn | attention
        "epochs": 28,
        "lr": 1e-3,
        "batch_size": 64,
        "step_every": 7,
        "gamma": 0.1,
        "mode": "frozen",
        "labels": "",  # optional label file overriding the training labels
        "standardize": False,  # frozen mode: z-score features with train statistics
        "d_model": 64,
        "num_layers": 2,
        "num_heads": 4,
        "pool_threshold": 16,
    },
    "difformer": {"time_set": [50, 150, 300], "block_set": [7, 8, 10], "d_model": 64, "num_layers": 2,
                  "num_heads": 4, "pool_threshold": 16},
    "diffeed": {"strategy": "bottleneck", "t": 150, "final_block": 0, "candidates": []},
    "cka": {"axis": "blocks", "entries": [], "t": 90, "b": 7, "sample": 64, "external": ""},
    "knn": {"t": 150, "b": 7, "pool": 4, "k": 20, "metric": "cosine"},
    "grid": {"t_values": [150, 900], "b_values": [7], "pool_sizes": [4]},
}

# keys that describe how a run is executed, not what it computes
RUNTIME_KEYS = ("workers", "out")


class ConfigError(ValueError):
    pass


def _merge(base: dict, upd: dict, path: str = "") -> dict:
    for k, v in upd.items():
        where = f"{path}{k}"
        if k not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[k], dict):
            if not isinstance(v, dict):
                raise ConfigError(f"config key {where!r} must be a table")
            _merge(base[k], v, where + ".")
        else:
            base[k] = v
    return base


def parse_value(text: str):
    try:
        return tomli.loads(f"v = {text}")["v"]
    except tomli.TOMLDecodeError:
        return text


def apply_override(cfg: dict, assignment: str) -> None:
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} is not of the form key.path=value")
    key, text = assignment.split("=", 1)
    parts = key.strip().split(".")
    node = cfg
    for p in parts[:-1]:
        if not isinstance(node.get(p), dict):
            raise ConfigError(f"unknown config key {key!r}")
        node = node[p]
    if parts[-1] not in node or isinstance(node[parts[-1]], dict):
        raise ConfigError(f"unknown config key {key!r}")
    node[parts[-1]] = parse_value(text.strip())


def load_config(path: Optional[str] = None, overrides: Iterable[str] = ()) -> dict:
    """Defaults, then the file at ``path`` (if any), then dotted overrides."""
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise FileNotFoundError(f"config file not found: {p}")
        try:
            data = tomli.loads(p.read_text())
        except tomli.TOMLDecodeError as exc:
            raise ConfigError(f"{p}: {exc}") from exc
        version = data.get("version", CONFIG_VERSION)
        if version != CONFIG_VERSION:
            raise ConfigError(f"{p}: config version {version} is not supported (expected {CONFIG_VERSION})")
        _merge(cfg, data)
    for o in overrides:
        apply_override(cfg, o)
    return cfg


def payload_config(cfg: dict) -> dict:
    """The part of a config that determines results (runtime keys dropped)."""
    return {k: v for k, v in cfg.items() if k not in RUNTIME_KEYS}


def dump_json(cfg: dict) -> str:
    return json.dumps(cfg, sort_keys=True, indent=2) + "\n"
