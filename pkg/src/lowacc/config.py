"""Run configuration: a JSON file validated against a closed schema.

Unknown keys and type mismatches are rejected before any data or model is
touched. Every field has a default, so ``{}`` is a valid configuration.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import jsonschema

from .errors import ConfigError
from .nn.train import TrainConfig
from .sparsity import PruneSchedule

_BITS = {"type": "integer", "minimum": 2, "maximum": 16}
_ACC = {"type": "integer", "minimum": 2, "maximum": 64}

SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "preset": {"enum": ["mlp1", "mlp2", "convnet"]},
        "hidden": {"type": "integer", "minimum": 1},
        "w_bits": _BITS,
        "x_bits": _BITS,
        "data": {
            "type": "object",
            "additionalProperties": False,
            "properties": {k: {"type": "string"} for k in
                           ("train_images", "train_labels", "test_images", "test_labels")},
        },
        "train": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "schedule": {"enum": ["ptoq", "qtop"]},
                "epochs": {"type": "integer", "minimum": 0},
                "qat_epochs": {"type": "integer", "minimum": 0},
                "lr": {"type": "number", "exclusiveMinimum": 0},
                "momentum": {"type": "number", "minimum": 0, "maximum": 1},
                "weight_decay": {"type": "number", "minimum": 0},
                "batch_size": {"type": "integer", "minimum": 1},
                "lr_schedule": {"enum": ["constant", "cosine"]},
                "prune": {
                    "type": ["object", "null"],
                    "additionalProperties": False,
                    "required": ["target"],
                    "properties": {
                        "target": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                        "interval": {"type": "integer", "minimum": 1},
                        "increment": {"type": "number", "exclusiveMinimum": 0},
                        "m": {"type": "integer", "minimum": 1},
                    },
                },
            },
        },
        "model": {"type": "string"},
        "p_grid": {"type": "array", "items": _ACC, "minItems": 1},
        "policies": {"type": "array", "minItems": 1, "items": {
            "type": "string",
            "pattern": r"^(exact|saturate|wrap|resolve|sorted|sorted_tiled[0-9]*)(_clip)?$"}},
        "tile": {"type": "integer", "minimum": 1},
        "max_rounds": {"type": "integer", "minimum": 0},
        "format": {"enum": ["csv", "jsonl"]},
        "sweep": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "bits": {"type": "array", "minItems": 1,
                         "items": {"type": "array", "items": _BITS, "minItems": 2, "maxItems": 2}},
                "sparsities": {"type": "array", "minItems": 1,
                               "items": {"type": "number", "minimum": 0, "exclusiveMaximum": 1}},
            },
        },
        "out": {"type": "string"},
        "seed": {"type": "integer", "minimum": 0},
    },
}

DEFAULT_DATA = {
    "train_images": "data/mnist/train-images-idx3-ubyte.gz",
    "train_labels": "data/mnist/train-labels-idx1-ubyte.gz",
    "test_images": "data/mnist/t10k-images-idx3-ubyte.gz",
    "test_labels": "data/mnist/t10k-labels-idx1-ubyte.gz",
}


@dataclass
class RunConfig:
    preset: str = "mlp1"
    hidden: int = 784
    w_bits: int = 8
    x_bits: int = 8
    data: dict = field(default_factory=lambda: dict(DEFAULT_DATA))
    train: dict = field(default_factory=dict)
    model: str = ""
    p_grid: list = field(default_factory=lambda: list(range(12, 25)))
    policies: list = field(default_factory=lambda: ["exact", "saturate", "resolve", "sorted"])
    tile: int = 256
    max_rounds: int = 8
    format: str = "csv"
    sweep: dict = field(default_factory=dict)
    out: str = "out"
    seed: int = 0

    def train_config(self, sparsity: float | None = None) -> TrainConfig:
        d = dict(self.train)
        prune = d.pop("prune", None)
        if sparsity is not None:
            prune = dict(prune or {}, target=sparsity) if sparsity > 0 else None
        try:
            return TrainConfig(prune=PruneSchedule(**prune) if prune else None, seed=self.seed, **d)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid train settings: {exc}") from exc


def parse_config(obj: dict) -> RunConfig:
    try:
        jsonschema.validate(obj, SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"config error at {where}: {exc.message}") from exc
    obj = dict(obj)
    obj["data"] = dict(DEFAULT_DATA, **obj.get("data", {}))
    cfg = RunConfig(**obj)
    cfg.train_config()
    return cfg


def load_config(path) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        obj = json.loads(text)
    except ValueError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(obj, dict):
        raise ConfigError("config must be a JSON object")
    return parse_config(obj)
