"""Run configuration: JSON files, dotted-path overrides, digests.

A run is reproducible from (config, code version); every artifact written by
the pipeline embeds the config digest so downstream phases can refuse
mismatched inputs.
"""

from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path

DEFAULT_CONFIG = {
    "seed": 0,
    "out": "runs/default",
    "scene": {
        "count": 6,
        "width": 9,
        "height": 9,
        "wall_segments": 1,
        "image_hw": 48,
    },
    "domains": {
        "n_source": 3,
        "n_seen": 6,
        "n_unseen": 4,
    },
    "dataset": {
        "episodes_per_factor": 120,
        "kappa": 0.7,
        "min_start_geodesic": 1.5,
        "holdout_fraction": 0.1,
    },
    "backbone": {
        "patch": 8,
        "dim": 64,
        "layers": 4,
        "heads": 4,
        "out_dim": 32,
        "epochs": 50,
        "batch": 128,
        "lr": 1e-3,
        "max_frames": 8000,
    },
    "prompts": {
        "pool": 10,
        "length": 8,
        "embed_dim": 64,
        "projection_gain": 8.0,
    },
    "prompt_training": {
        "epochs": 100,
        "visual_batch": 64,
        "action_batch": 32,
        "text_batch": 64,
        "lambda_visual": 1.0,
        "lambda_text": 1.0,
        "sigma": 0.1,
        "beta": 0.99,
        "lr_visual": 0.02,
        "lr_action": 0.02,
        "lr_text": 0.04,
        "momentum": 0.9,
        "weight_decay": 1e-3,
        "poly_power": 0.9,
        "steps_per_epoch": 0,
    },
    "policy": {
        "envs": 8,
        "rollout": 100,
        "total_steps": 300000,
        "lr": 1e-3,
        "lr_final": 1e-5,
        "clip": 0.2,
        "gamma": 0.99,
        "gae_lambda": 0.95,
        "value_coef": 0.5,
        "entropy_coef": 0.02,
        "update_epochs": 4,
        "minibatches": 4,
        "hidden": 128,
        "action_embed": 16,
        "min_start_geodesic": 1.25,
        "max_start_geodesic": 2.5,
        "train_max_steps": 120,
        "log_every_steps": 2000,
    },
    "eval": {
        "episodes_per_domain": 20,
        "seeds": [0, 1, 2],
        "max_steps": 500,
    },
    "ablation": {
        "variant": "full",
        "total_steps": 150000,
        "seeds": [0, 1, 2],
    },
    "export": {
        "kind": "embeddings",
        "samples": 64,
    },
    "probe": {
        "samples": 64,
    },
}


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        here = f"{path}.{key}" if path else key
        if key not in base:
            raise KeyError(f"invalid config key: {here}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise KeyError(f"config key {here} expects a section, got {type(value).__name__}")
            out[key] = _merge(base[key], value, here)
        else:
            out[key] = value
    return out


def load_config(path: str | Path | None = None) -> dict:
    """Defaults merged with an optional JSON config file; unknown keys fail."""
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path is not None:
        user = json.loads(Path(path).read_text())
        cfg = _merge(cfg, user)
    return cfg


def apply_override(cfg: dict, dotted: str):
    """Apply one 'a.b.c=value' override in place; values parse as JSON."""
    if "=" not in dotted:
        raise KeyError(f"override must look like key.path=value, got {dotted!r}")
    keypath, raw = dotted.split("=", 1)
    keys = keypath.split(".")
    node = cfg
    for key in keys[:-1]:
        if not isinstance(node, dict) or key not in node:
            raise KeyError(f"invalid config key: {keypath}")
        node = node[key]
    leaf = keys[-1]
    if not isinstance(node, dict) or leaf not in node:
        raise KeyError(f"invalid config key: {keypath}")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node[leaf] = value


def config_digest(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()


def save_config(cfg: dict, path: str | Path):
    Path(path).write_text(json.dumps(cfg, sort_keys=True, indent=2))
