"""Run configuration: TOML in, validated and fully resolved dict out."""

from __future__ import annotations

import copy
import hashlib
import json
import sys
from importlib import resources
from pathlib import Path

import jsonschema

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib
import tomli_w

from .driving import DEFAULT_BUDGETS, DatasetConfig
from .evaluation import CORRUPTIONS

_data = DatasetConfig()

DEFAULTS = {
    "dataset": {
        "n_scenarios": _data.n_scenarios,
        "obstacle_count_probs": list(_data.obstacle_count_probs),
        "ego_speed_range": list(_data.ego_speed_range),
        "ego_x_range": list(_data.ego_x_range),
        "ego_lateral_range": list(_data.ego_lateral_range),
        "obstacle_speed_range": list(_data.obstacle_speed_range),
        "obstacle_lateral_speed_range": list(_data.obstacle_lateral_speed_range),
        "obstacle_ahead_range": list(_data.obstacle_ahead_range),
        "bend_probability": _data.bend_probability,
        "val_fraction": _data.val_fraction,
    },
    "model": {"init_seed_offset": 0},
    "train": {
        "pretrain_epochs": 20,
        "finetune_epochs": 3,
        "batch_size": 32,
        "pretrain_learning_rate": 1e-3,
        "finetune_learning_rate": 1e-4,
        "optimizer": "adam",
        "frozen": [],
        "budgets": dict(DEFAULT_BUDGETS),
        "baseline_eps": 0.2,
        "attack_steps": 5,
        "attack_restarts": 1,
    },
    "attack": {
        "method": "pgd",
        "norm": "linf",
        "objective": "total_loss",
        "eps": 0.2,
        "steps": 5,
        "restarts": 5,
        "step_fraction": 0.2,
        "momentum": 1.0,
        "module_wise": False,
        "budgets": dict(DEFAULT_BUDGETS),
    },
    "dwaa": {"enabled": True, "r": 0.2, "update_period": 100},
    "eval": {
        "n_samples": 0,
        "batch_size": 50,
        "restarts": 5,
        "seeds": [0],
        "corruptions": list(CORRUPTIONS),
        "severities": [1, 2, 3, 4, 5],
    },
    "sim": {
        "episode_length": 40,
        "n_episodes": 50,
        "collision_radius": 1.5,
        "target_distance": 24.0,
        "speed_cap": 2.0,
        "universal_eps": 0.2,
        "universal_epochs": 3,
    },
}


class ConfigError(ValueError):
    """Schema violation; ``key`` is the dotted path of the offending entry."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


def schema() -> dict:
    return json.loads(resources.files("ma2t").joinpath("schemas/config.schema.json").read_text())


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k != "budgets":
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _float_fields(cfg: dict) -> dict:
    # ints given where reals are expected (eps = 1) resolve to floats so the
    # echo is canonical
    for section, fields in DEFAULTS.items():
        for key, default in fields.items():
            value = cfg[section][key]
            if isinstance(default, float) and isinstance(value, int) and not isinstance(value, bool):
                cfg[section][key] = float(value)
            elif isinstance(default, list) and default and isinstance(default[0], float):
                cfg[section][key] = [float(v) for v in value]
            elif key == "budgets":
                cfg[section][key] = {s: float(e) for s, e in value.items()}
    return cfg


def validate_config(raw: dict) -> dict:
    """Reject unknown keys and bad values, then fill every default."""
    try:
        jsonschema.validate(raw, schema())
    except jsonschema.ValidationError as err:
        path = [str(p) for p in err.absolute_path]
        if err.validator == "additionalProperties":
            extra = sorted(set(err.instance) - set(err.schema.get("properties", {})))
            path.append(extra[0])
        key = ".".join(path) or "<root>"
        raise ConfigError(key, err.message) from None
    cfg = _float_fields(_merge(DEFAULTS, raw))
    probs = cfg["dataset"]["obstacle_count_probs"]
    if abs(sum(probs) - 1.0) > 1e-9:
        raise ConfigError("dataset.obstacle_count_probs", "must sum to 1")
    for key in ("ego_speed_range", "ego_x_range", "ego_lateral_range", "obstacle_speed_range",
                "obstacle_lateral_speed_range", "obstacle_ahead_range"):
        lo, hi = cfg["dataset"][key]
        if lo > hi:
            raise ConfigError(f"dataset.{key}", "low must not exceed high")
    return cfg


def load_config(path=None) -> dict:
    if path is None:
        return validate_config({})
    try:
        raw = tomllib.loads(Path(path).read_text())
    except tomllib.TOMLDecodeError as err:
        raise ConfigError("<file>", f"invalid TOML: {err}") from None
    return validate_config(raw)


def dump_config(cfg: dict) -> str:
    return tomli_w.dumps(cfg)


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()


def dataset_config(cfg: dict, seed: int) -> DatasetConfig:
    d = cfg["dataset"]
    return DatasetConfig(seed=seed, **{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})
