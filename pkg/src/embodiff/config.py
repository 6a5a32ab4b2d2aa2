"""Run configuration: JSON schema, strict validation, hashing, derivations.

Configs are plain dicts validated against SCHEMA below. Validation is
strict both ways: a missing key and an unknown key are both errors, and
messages carry the dotted key path. All randomness in a run flows from the
single top-level `seed` through named substreams (data/init/train/eval/mptd).
"""
from __future__ import annotations

import copy
import json

from .util import canonical_hash, canonical_json

# type markers: python types, [T] for homogeneous lists, nested dicts
SCHEMA = {
    "seed": int,
    "layout": {"windows": [int]},
    "embodiments": [
        {
            "id": int,
            "name": str,
            "active_dims": [int],
            "sigma_e": float,
            "reach_radius": float,
        }
    ],
    "noise": {"delta": float, "schedule": str, "stepwise_pyramid": bool},
    "diffusion": {"steps": int},
    "model": {
        "horizon": int,
        "hidden": int,
        "n_hidden": int,
        "prompt_dim": int,
        "timestep_dim": int,
    },
    "train": {
        "iterations": int,
        "batch": int,
        "lr": float,
        "weight_decay": float,
        "log_every": int,
        "checkpoint_every": int,
    },
    "sampler": {"mode": str, "jumpy_interval": int, "flow_steps": int},
    "mptd": {
        "enabled": bool,
        "exploration_scale": float,
        "m0": float,
        "m1": float,
        "branching": int,
        "budget": int,
        "jumpy_interval": int,
        "guidance_weight": float,
    },
    "eval": {"episodes": int, "replan_every": int},
    "data": {"trajs_per_pair": int},
    "ablation": {"use_ebf": bool, "use_mptd": bool, "use_soft_prompt": bool},
}

SAMPLER_MODES = ("diffusion", "flow_matching")
ABLATION_VARIANTS = ("full", "wo_sp", "wo_mptd", "wo_ebf", "wo_all")


class ConfigError(ValueError):
    pass


def _type_name(t) -> str:
    return {int: "int", float: "float", str: "str", bool: "bool"}.get(t, str(t))


def _validate(node, schema, path: str) -> None:
    if isinstance(schema, dict):
        if not isinstance(node, dict):
            raise ConfigError(f"{path or 'config'}: expected object")
        for key in schema:
            if key not in node:
                raise ConfigError(f"missing key {path + '.' if path else ''}{key}")
        for key in node:
            if key not in schema:
                raise ConfigError(f"unknown key {path + '.' if path else ''}{key}")
        for key, sub in schema.items():
            _validate(node[key], sub, f"{path}.{key}" if path else key)
    elif isinstance(schema, list):
        if not isinstance(node, list):
            raise ConfigError(f"{path}: expected array")
        for i, item in enumerate(node):
            _validate(item, schema[0], f"{path}[{i}]")
    else:
        ok = isinstance(node, schema) and not (schema is not bool and isinstance(node, bool))
        if schema is float and isinstance(node, int) and not isinstance(node, bool):
            ok = True
        if not ok:
            raise ConfigError(
                f"{path}: expected {_type_name(schema)}, got {type(node).__name__}"
            )


def validate_config(cfg: dict) -> None:
    _validate(cfg, SCHEMA, "")
    if cfg["sampler"]["mode"] not in SAMPLER_MODES:
        raise ConfigError(
            f"sampler.mode: expected one of {SAMPLER_MODES}, got {cfg['sampler']['mode']!r}"
        )
    if cfg["noise"]["schedule"] != "cosine":
        raise ConfigError(f"noise.schedule: only 'cosine' is supported")
    if not 0.0 < cfg["noise"]["delta"] <= 1.0:
        raise ConfigError(f"noise.delta: must lie in (0, 1], got {cfg['noise']['delta']}")


def load_config(path) -> dict:
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except OSError as e:
        raise ConfigError(f"unreadable config {path}: {e}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"invalid JSON in {path}: {e}") from None
    validate_config(cfg)
    return cfg


def save_config(cfg: dict, path) -> None:
    with open(path, "w") as fh:
        fh.write(json.dumps(cfg, sort_keys=True, indent=2) + "\n")


def config_hash(cfg: dict) -> str:
    return canonical_hash(cfg)


def default_config() -> dict:
    """Reference desk-scale configuration."""
    return {
        "seed": 0,
        "layout": {"windows": [4, 2, 3, 3]},
        "embodiments": [
            {"id": 0, "name": "gripper", "active_dims": [4, 2, 1, 0],
             "sigma_e": 1.0, "reach_radius": 1.3},
            {"id": 1, "name": "hand4", "active_dims": [4, 2, 3, 1],
             "sigma_e": 0.9, "reach_radius": 1.3},
            {"id": 2, "name": "hand5", "active_dims": [4, 2, 3, 2],
             "sigma_e": 0.8, "reach_radius": 1.3},
        ],
        "noise": {"delta": 0.5, "schedule": "cosine", "stepwise_pyramid": False},
        "diffusion": {"steps": 50},
        "model": {"horizon": 16, "hidden": 256, "n_hidden": 3,
                  "prompt_dim": 16, "timestep_dim": 32},
        "train": {"iterations": 3000, "batch": 32, "lr": 1e-3,
                  "weight_decay": 0.05, "log_every": 25, "checkpoint_every": 0},
        "sampler": {"mode": "diffusion", "jumpy_interval": 10, "flow_steps": 10},
        "mptd": {"enabled": True, "exploration_scale": 3.0, "m0": 1.0, "m1": 1.1,
                 "branching": 3, "budget": 24, "jumpy_interval": 10,
                 "guidance_weight": 0.3},
        "eval": {"episodes": 200, "replan_every": 8},
        "data": {"trajs_per_pair": 10},
        "ablation": {"use_ebf": True, "use_mptd": True, "use_soft_prompt": True},
    }


def variant_config(cfg: dict, variant: str) -> dict:
    """Derive one ablation row from a base config by flipping flags only."""
    if variant not in ABLATION_VARIANTS:
        raise ConfigError(f"unknown ablation variant {variant!r}")
    out = copy.deepcopy(cfg)
    flags = out["ablation"]
    flags["use_ebf"] = variant not in ("wo_ebf", "wo_all")
    flags["use_mptd"] = variant not in ("wo_mptd", "wo_all")
    flags["use_soft_prompt"] = variant not in ("wo_sp", "wo_all")
    return out


def train_relevant_config(cfg: dict) -> dict:
    """The sub-config that determines training results (for checkpoint reuse).

    Evaluation-only settings (mptd block, eval block, use_mptd) are dropped:
    the tree search runs at inference time and never changes the weights.
    """
    keep = ["seed", "layout", "embodiments", "noise", "diffusion", "model",
            "train", "data"]
    out = {k: copy.deepcopy(cfg[k]) for k in keep}
    out["sampler_mode"] = cfg["sampler"]["mode"]
    out["use_ebf"] = cfg["ablation"]["use_ebf"]
    out["use_soft_prompt"] = cfg["ablation"]["use_soft_prompt"]
    return out


def provenance_string(cfg: dict) -> str:
    from . import __version__

    return f"embodiff-{__version__}+cfg.{config_hash(cfg)[:12]}"
