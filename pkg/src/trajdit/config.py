"""Command configuration: YAML files, dotted ``key=value`` overrides and
fully resolved snapshots."""

from __future__ import annotations

import copy
import os
from dataclasses import asdict
from pathlib import Path

import yaml

from .curation import CurationConfig
from .errors import ValidationError
from .motion_vae import VaeTrainConfig
from .synthetic import CorpusConfig
from .training import TrainConfig

OUTPUT_ROOT_ENV = "TRAJDIT_OUTPUT_ROOT"
SNAPSHOT_NAME = "config.resolved.yaml"


def _plain(obj):
    """Tuples to lists, recursively, so snapshots are plain YAML."""
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def defaults(command):
    trees = {
        "gen-corpus": {"corpus": asdict(CorpusConfig())},
        "curate": {"corpus": None, "seed": 0, "curation": asdict(CurationConfig())},
        "train-vae": {
            "corpus": None,
            "kind": "motion",
            "maps": "mixed",
            "sigma": 3.0,
            "num_clips": None,
            "vae": {"latent_channels": 4, "channels": [16, 64, 64], "kl_weight": 1e-6},
            "train": asdict(VaeTrainConfig()),
        },
        "train": {
            "corpus": None,
            "motion_vae": None,
            "video_vae": None,
            "train": TrainConfig().to_dict(),
        },
        "sample": {
            "checkpoint": None,
            "motion_vae": None,
            "video_vae": None,
            "caption": "a white square moving right",
            "trajectory": None,
            "frames": 16,
            "height": 32,
            "width": 32,
            "seed": 0,
            "steps": None,
            "guidance_scale": None,
        },
        "eval": {
            "checkpoint": None,
            "motion_vae": None,
            "video_vae": None,
            "corpus": None,
            "num_cases": 20,
            "seed": 0,
            "steps": None,
            "guidance_scale": None,
            "background_level": 0.2,
            "ablation": {},
        },
        "visualize": {"input": None, "frames": 16, "height": 32, "width": 32, "sigma": 3.0},
        "report": {"runs": [], "figures": True},
    }
    if command not in trees:
        raise ValidationError(f"unknown command {command!r}")
    return _plain(trees[command])


def parse_override(text):
    """``a.b.c=value`` with ``value`` read as YAML (``3``, ``true``, ``[1, 2]``)."""
    if "=" not in text:
        raise ValidationError(f"override {text!r} must look like key.path=value")
    key, raw = text.split("=", 1)
    if not key:
        raise ValidationError(f"override {text!r} has an empty key")
    try:
        value = yaml.safe_load(raw)
    except yaml.YAMLError as exc:
        raise ValidationError(f"override {text!r}: {exc}") from exc
    return key.split("."), value


# mappings whose keys are free-form
OPEN_PATHS = {("ablation",), ("train", "schedule")}


def merge(base, update, path=()):
    """Deep-merge ``update`` into a copy of ``base``; unknown keys are errors."""
    out = copy.deepcopy(base)
    for key, value in update.items():
        where = ".".join((*path, key))
        if key not in out and path not in OPEN_PATHS:
            raise ValidationError(f"unknown config key {where!r}")
        if isinstance(out.get(key), dict) and isinstance(value, dict) and (*path, key) not in OPEN_PATHS:
            out[key] = merge(out[key], value, (*path, key))
        else:
            out[key] = value
    return out


def set_dotted(tree, keys, value):
    update = value
    for key in reversed(keys):
        update = {key: update}
    return merge(tree, update)


def load_yaml(path):
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"config file {path} not found")
    data = yaml.safe_load(path.read_text()) or {}
    if not isinstance(data, dict):
        raise ValidationError(f"{path}: top level must be a mapping")
    return data


def resolve(command, config_path=None, overrides=()):
    tree = defaults(command)
    if config_path:
        data = load_yaml(config_path)
        if set(data) == {"command", "config"}:  # a resolved snapshot
            if data["command"] != command:
                raise ValidationError(f"{config_path} is a snapshot of {data['command']!r}, not {command!r}")
            data = data["config"]
        tree = merge(tree, data)
    for text in overrides:
        tree = set_dotted(tree, *parse_override(text))
    return _plain(tree)


def output_dir(command, out=None):
    if out:
        return Path(out)
    root = os.environ.get(OUTPUT_ROOT_ENV, "runs")
    return Path(root) / command


def write_snapshot(out_dir, command, tree):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    text = yaml.safe_dump({"command": command, "config": tree}, sort_keys=True)
    (out / SNAPSHOT_NAME).write_text(text)
    return out / SNAPSHOT_NAME


def read_snapshot(path):
    data = load_yaml(path)
    return data["command"], data["config"]
