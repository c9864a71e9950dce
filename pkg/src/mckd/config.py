"""Run configuration: one JSON document, strict keys, dotted-path overrides."""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

from .meta import MetaLoopConfig

__all__ = ["TrainConfig", "ConfigError", "load_config", "resolve_config", "apply_overrides"]


class ConfigError(ValueError):
    pass


DEFAULTS: dict[str, Any] = {
    "num_networks": 2,
    "stage_widths": [64, 64, 64],
    "embed_dim": 32,
    "proj_hidden": None,
    "gate_hidden": None,
    "tau": 0.1,
    "alpha": 0.1,
    "beta": 1.0,
    "kd_temperature": 3.0,
    "num_negatives": 14,
    "mining": "batch",  # batch | memory
    "bank_capacity": 4096,
    "matching": "weighted",  # one_to_one | all_to_all | weighted
    "meta": {"k_inner": 2, "eta": None, "period": 50, "lr_pi": None},
    "epochs": 30,
    "batch_size": 16,
    "optimizer": {
        "lr": 0.05,
        "momentum": 0.9,
        "weight_decay": 5e-4,
        "schedule": "cosine",  # cosine | step
        "step_milestones": [0.5, 0.75],
        "step_gamma": 0.1,
    },
    "seeds": [1, 2],
    "dataset": {
        "kind": "gaussian_blobs",
        "classes": 8,
        "per_class": 500,
        "test_per_class": 100,
        "dim": 32,
        "spread": 0.35,
        "seed": 1,
    },
    "few_shot_fraction": 1.0,
    "loss_flags": {"vcl": True, "soft_vcl": True, "icl": True, "soft_icl": True},
    "distill": {"lmcl": True, "logit_kd": True, "uniform_gate": False},
    "export_embeddings": False,
    "out_dir": "runs/run",
    "dtype": "float64",
}


@dataclass(frozen=True)
class TrainConfig:
    raw: dict[str, Any]

    def __getattr__(self, key):
        try:
            return self.raw[key]
        except KeyError:
            raise AttributeError(key) from None

    @property
    def num_stages(self) -> int:
        return len(self.raw["stage_widths"])

    @property
    def meta_config(self) -> MetaLoopConfig:
        m = self.raw["meta"]
        eta = m["eta"] if m["eta"] is not None else self.raw["optimizer"]["lr"]
        lr_pi = m["lr_pi"] if m["lr_pi"] is not None else 0.1 * self.raw["optimizer"]["lr"]
        return MetaLoopConfig(k_inner=m["k_inner"], eta=eta, period=m["period"], lr_pi=lr_pi)

    def to_json(self) -> str:
        return json.dumps(self.raw, indent=2, sort_keys=True)


def _merge_strict(defaults: dict, given: dict, path: str = "") -> dict:
    out = copy.deepcopy(defaults)
    for key, value in given.items():
        where = f"{path}.{key}" if path else key
        if key not in defaults:
            raise ConfigError(f"unknown config key: {where}")
        if isinstance(defaults[key], dict) and defaults[key] and not isinstance(value, dict):
            raise ConfigError(f"{where} must be an object")
        if isinstance(defaults[key], dict) and defaults[key]:
            out[key] = _merge_strict(defaults[key], value, where)
        else:
            out[key] = copy.deepcopy(value)
    return out


def _parse_value(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text  # bare strings are allowed


def apply_overrides(raw: dict, overrides: list[str]) -> dict:
    """key=value pairs with dotted paths into the document, e.g. optimizer.lr=0.1."""
    out = copy.deepcopy(raw)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override must look like key=value, got {item!r}")
        dotted, _, text = item.partition("=")
        node = out
        parts = dotted.split(".")
        for p in parts[:-1]:
            if not isinstance(node, dict) or p not in node:
                raise ConfigError(f"override names unknown config key: {dotted}")
            node = node[p]
        if not isinstance(node, dict) or parts[-1] not in node:
            raise ConfigError(f"override names unknown config key: {dotted}")
        node[parts[-1]] = _parse_value(text)
    return out


def _validate(raw: dict) -> None:
    if raw["num_networks"] < 2:
        raise ConfigError("mutual learning needs num_networks >= 2")
    if len(raw["seeds"]) != raw["num_networks"]:
        raise ConfigError("need exactly one seed per network")
    if len(set(raw["seeds"])) != len(raw["seeds"]):
        raise ConfigError("network seeds must be pairwise distinct")
    if len(raw["stage_widths"]) < 2 or any(w <= 0 for w in raw["stage_widths"]):
        raise ConfigError("stage_widths must list >= 2 positive widths")
    if raw["mining"] not in ("batch", "memory"):
        raise ConfigError(f"unknown mining mode {raw['mining']!r}")
    if raw["matching"] not in ("one_to_one", "all_to_all", "weighted"):
        raise ConfigError(f"unknown matching mode {raw['matching']!r}")
    if raw["mining"] == "batch" and raw["batch_size"] % 2 != 0:
        raise ConfigError("batch mining needs an even batch_size")
    if raw["mining"] == "memory" and raw["num_negatives"] > raw["bank_capacity"]:
        raise ConfigError("num_negatives cannot exceed bank_capacity")
    for key in ("tau", "kd_temperature", "batch_size", "epochs", "num_negatives", "bank_capacity"):
        if raw[key] is not None and (not isinstance(raw[key], (int, float)) or raw[key] <= 0):
            raise ConfigError(f"{key} must be positive")
    if raw["alpha"] < 0 or raw["beta"] < 0:
        raise ConfigError("alpha and beta must be non-negative")
    if not 0 < raw["few_shot_fraction"] <= 1:
        raise ConfigError("few_shot_fraction must be in (0, 1]")
    if raw["optimizer"]["schedule"] not in ("cosine", "step"):
        raise ConfigError("schedule must be cosine or step")
    if raw["dtype"] not in ("float64", "float32"):
        raise ConfigError("dtype must be float64 or float32")
    if raw["mining"] == "batch" and raw["num_negatives"] != raw["batch_size"] - 2:
        raise ConfigError("batch mining fixes num_negatives = batch_size - 2")


def resolve_config(document: dict | None = None, overrides: list[str] | None = None) -> TrainConfig:
    raw = _merge_strict(DEFAULTS, document or {})
    if overrides:
        raw = apply_overrides(raw, overrides)
    _validate(raw)
    return TrainConfig(raw)


def load_config(path: str | Path | None, overrides: list[str] | None = None) -> TrainConfig:
    document = {}
    if path is not None:
        text = Path(path).read_text()
        try:
            document = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: not valid JSON ({e})") from None
    return resolve_config(document, overrides)
