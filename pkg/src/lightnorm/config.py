"""TOML run-configuration files mirroring TrainConfig / NetworkPlan fields.

Layout:

    [train]            # TrainConfig fields, e.g. lr_init = 2e-4
    [plan]             # NetworkPlan fields; optional preset = "small"
    [data]             # root, val_root, out_dir, val_pairs
    [[variant]]        # ablation grids only: label + plan overrides
"""

import dataclasses
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from .errors import ConfigurationError
from .network import PLAN_PRESETS, NetworkPlan
from .training import TrainConfig


def _read(path):
    try:
        with open(path, "rb") as f:
            return tomllib.load(f)
    except FileNotFoundError as e:
        raise ConfigurationError(f"config file not found: {path}") from e
    except tomllib.TOMLDecodeError as e:
        raise ConfigurationError(f"cannot parse {path}: {e}") from e


def plan_from_table(table):
    table = dict(table)
    preset = table.pop("preset", None)
    if preset is not None:
        if preset not in PLAN_PRESETS:
            raise ConfigurationError(
                f"unknown plan preset '{preset}' (have {sorted(PLAN_PRESETS)})"
            )
        base = PLAN_PRESETS[preset]
    else:
        base = NetworkPlan()
    try:
        return dataclasses.replace(base, **table)
    except TypeError as e:
        raise ConfigurationError(f"bad [plan] field: {e}") from e


def train_config_from_table(table):
    try:
        return TrainConfig(**table)
    except TypeError as e:
        raise ConfigurationError(f"bad [train] field: {e}") from e


def load_run_config(path):
    """Returns (TrainConfig, NetworkPlan, data table, variant list)."""
    doc = _read(path)
    cfg = train_config_from_table(doc.get("train", {}))
    plan = plan_from_table(doc.get("plan", {}))
    data = doc.get("data", {})
    variants = doc.get("variant", [])
    if "root" in data:
        data["root"] = str(Path(data["root"]))
    return cfg, plan, data, variants
