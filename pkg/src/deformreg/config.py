"""Run configuration: one JSON document covering architecture, loss
weighting, training schedule and paths, schema-validated with exact-path
error messages."""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Optional

import jsonschema

from .errors import ConfigError
from .losses import LossConfig, Reduction, SmoothVariant
from .engine import TrainConfig, TrainMode
from .regnet import ArchConfig

_WEIGHTS = {
    "oneOf": [
        {"type": "number", "minimum": 0},
        {"type": "array", "items": {"type": "number", "minimum": 0}, "minItems": 1},
    ]
}

RUN_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["arch", "train"],
    "properties": {
        "arch": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "levels": {"type": "integer", "minimum": 2},
                "base_channels": {"type": "integer", "minimum": 1},
                "input_hw": {
                    "type": "array",
                    "items": {"type": "integer", "minimum": 8},
                    "minItems": 2,
                    "maxItems": 2,
                },
                "leaky_slope": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
            },
        },
        "loss": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "alpha": _WEIGHTS,
                "beta": _WEIGHTS,
                "gamma": _WEIGHTS,
                "smooth_variant": {"enum": ["normal", "edge"]},
                "reduction": {"enum": ["sum", "mean"]},
            },
        },
        "train": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "mode": {"enum": ["unsupervised", "supervised"]},
                "batch_size": {"type": "integer", "minimum": 1},
                "initial_lr": {"type": "number", "exclusiveMinimum": 0},
                "halve_after_epochs": {"type": "integer", "minimum": 1},
                "extra_epochs": {"type": "integer", "minimum": 0},
                "seed": {"type": "integer", "minimum": 0},
                "weight_decay": {"type": "number", "minimum": 0},
            },
        },
        "paths": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "dataset": {"type": "string"},
                "output": {"type": "string"},
                "checkpoint": {"type": "string"},
            },
        },
    },
}


@dataclass
class RunConfig:
    arch: ArchConfig
    loss: LossConfig
    train: TrainConfig
    dataset_path: Optional[str] = None
    output_dir: Optional[str] = None
    checkpoint_path: Optional[str] = None


def _expand_weights(value, levels):
    if isinstance(value, (int, float)):
        return [float(value)] * levels
    return [float(v) for v in value]


def load_run_config(path):
    """Parse and validate a run-config JSON file into a RunConfig."""
    try:
        with open(path) as f:
            doc = json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON: {e}")
    validator = jsonschema.Draft202012Validator(RUN_SCHEMA)
    errors = sorted(validator.iter_errors(doc), key=lambda e: e.json_path)
    if errors:
        first = errors[0]
        raise ConfigError(f"{path}: {first.json_path}: {first.message}")

    arch_doc = doc.get("arch", {})
    if "input_hw" in arch_doc:
        arch_doc = dict(arch_doc, input_hw=tuple(arch_doc["input_hw"]))
    arch = ArchConfig(**arch_doc)

    loss_doc = doc.get("loss", {})
    alpha = _expand_weights(loss_doc.get("alpha", 1.0), arch.levels)
    beta = _expand_weights(loss_doc.get("beta", 0.05), arch.levels)
    gamma = loss_doc.get("gamma")
    if gamma is not None:
        gamma = _expand_weights(gamma, arch.levels)
    for name, values in (("alpha", alpha), ("beta", beta), ("gamma", gamma)):
        if values is not None and len(values) != arch.levels:
            raise ConfigError(
                f"{path}: $.loss.{name}: {len(values)} weights for {arch.levels} scales"
            )
    loss = LossConfig(
        alpha=alpha,
        beta=beta,
        gamma=gamma,
        smooth_variant=SmoothVariant(loss_doc.get("smooth_variant", "edge")),
        reduction=Reduction("mean" if loss_doc.get("reduction", "mean") == "mean" else "sum"),
    )

    train_doc = dict(doc.get("train", {}))
    mode = TrainMode(train_doc.pop("mode", "unsupervised"))
    train = TrainConfig(mode=mode, loss=loss, **train_doc)

    paths = doc.get("paths", {})
    return RunConfig(
        arch=arch,
        loss=loss,
        train=train,
        dataset_path=paths.get("dataset"),
        output_dir=paths.get("output"),
        checkpoint_path=paths.get("checkpoint"),
    )
