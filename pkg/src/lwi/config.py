"""Experiment configuration files (JSON), their schema and the two profiles.

Every key is optional. ``profile`` picks the training defaults ("desk" for
small CPU runs, "paper" for the original large-scale schedule); anything
given under ``train`` overrides the profile. A single top-level ``seed``
drives data generation and training.
"""
from __future__ import annotations

import copy
import json
from dataclasses import asdict
from pathlib import Path

import jsonschema

from .align import FusionConfig, LayerPolicy
from .continual import RunConfig
from .data import Dataset, SyntheticSpec, TaskStream, gen_synthetic, load_csv, load_idx, split_classes
from .errors import ConfigError
from .matching import MatchConfig
from .netcore import TrainConfig

PROFILES = {
    "desk": {
        "epochs": 30,
        "batch_size": 64,
        "lr": 0.05,
        "lr_decay_epochs": [20],
        "lr_decay_factor": 0.1,
        "momentum": 0.9,
        "lambda_kd": 1.0,
        "kd_temperature": 2.0,
        "kd_mode": "output",
    },
    "paper": {
        "epochs": 200,
        "batch_size": 64,
        "lr": 0.1,
        "lr_decay_epochs": [80, 120],
        "lr_decay_factor": 0.1,
        "momentum": 0.9,
        "lambda_kd": 1.0,
        "kd_temperature": 2.0,
        "kd_mode": "output",
    },
}

_POS_INT = {"type": "integer", "minimum": 1}
_NUM = {"type": "number"}

SCHEMA = {
    "$schema": "http://json-schema.org/draft-07/schema#",
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "profile": {"enum": sorted(PROFILES)},
        "seed": {"type": "integer"},
        "output_dir": {"type": "string"},
        "strategy": {"enum": ["lwi", "all_max", "finetune"]},
        "top_k": _POS_INT,
        "model": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"hidden": {"type": "array", "items": _POS_INT, "minItems": 1}},
        },
        "data": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "source": {"enum": ["synthetic", "idx", "csv"]},
                "synthetic": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {
                        "dim": _POS_INT,
                        "classes_per_task": _POS_INT,
                        "tasks": _POS_INT,
                        "samples_per_class": _POS_INT,
                        "cluster_spread": {"type": "number", "exclusiveMinimum": 0},
                        "separation": {"type": "number", "exclusiveMinimum": 0},
                        "test_fraction": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                    },
                },
                "idx": {
                    "type": "object",
                    "additionalProperties": False,
                    "required": ["train_images", "train_labels", "tasks"],
                    "properties": {
                        "train_images": {"type": "string"},
                        "train_labels": {"type": "string"},
                        "test_images": {"type": "string"},
                        "test_labels": {"type": "string"},
                        "tasks": _POS_INT,
                        "test_fraction": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                        "shuffle_classes": {"type": "boolean"},
                    },
                },
                "csv": {
                    "type": "object",
                    "additionalProperties": False,
                    "required": ["path", "label_column", "tasks"],
                    "properties": {
                        "path": {"type": "string"},
                        "label_column": {"type": "string"},
                        "tasks": _POS_INT,
                        "test_fraction": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                        "shuffle_classes": {"type": "boolean"},
                    },
                },
            },
        },
        "train": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "epochs": _POS_INT,
                "batch_size": _POS_INT,
                "lr": {"type": "number", "minimum": 0},
                "lr_decay_epochs": {"type": "array", "items": {"type": "integer", "minimum": 0}},
                "lr_decay_factor": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                "momentum": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                "lambda_kd": {"type": "number", "minimum": 0},
                "kd_temperature": {"type": "number", "exclusiveMinimum": 0},
                "kd_mode": {"enum": ["none", "output"]},
            },
        },
        "fusion": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "k": {"oneOf": [{"type": "number", "minimum": 0, "maximum": 1}, {"const": "equal_weight"}]},
                "n_deep": {"type": "integer", "minimum": 0},
                "metric": {"enum": ["euclidean", "cosine"]},
                "mode": {"enum": ["soft", "hard"]},
                "old_heads": {"enum": ["fuse", "carry"]},
                "tau": {"type": "number", "exclusiveMinimum": 0},
                "tau_min": {"type": "number", "exclusiveMinimum": 0},
                "max_iters": _POS_INT,
                "marginal_tol": {"type": "number", "exclusiveMinimum": 0},
            },
        },
    },
}

DEFAULTS = {
    "profile": "desk",
    "seed": 0,
    "output_dir": "lwi_run",
    "strategy": "lwi",
    "top_k": 10,
    "model": {"hidden": [64, 64]},
    "data": {"source": "synthetic"},
}


def _format_error(err: jsonschema.ValidationError) -> str:
    where = "/".join(str(p) for p in err.absolute_path) or "<root>"
    return f"{where}: {err.message}"


def validate(doc) -> None:
    validator = jsonschema.Draft7Validator(SCHEMA)
    errors = sorted(validator.iter_errors(doc), key=lambda e: list(map(str, e.absolute_path)))
    if errors:
        raise ConfigError("invalid config:\n  " + "\n  ".join(_format_error(e) for e in errors))


def load_config(path) -> dict:
    """Read, validate and complete a config file.

    Relative data and output paths are resolved against the file's
    directory. The returned dict is fully populated (defaults filled in).
    """
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from None
    return resolve(doc, base_dir=path.parent)


def resolve(doc: dict, base_dir=".") -> dict:
    validate(doc)
    cfg = copy.deepcopy(DEFAULTS)
    for key, value in doc.items():
        if isinstance(value, dict) and isinstance(cfg.get(key), dict):
            cfg[key].update(copy.deepcopy(value))
        else:
            cfg[key] = copy.deepcopy(value)
    train = dict(PROFILES[cfg["profile"]])
    train.update(cfg.get("train", {}))
    cfg["train"] = train

    spec_defaults = {k: v for k, v in asdict(SyntheticSpec()).items() if k != "seed"}
    data = cfg["data"]
    if data["source"] == "synthetic":
        data["synthetic"] = {**spec_defaults, **data.get("synthetic", {})}
    elif data["source"] not in data:
        raise ConfigError(f"data/source is {data['source']!r} but no data/{data['source']} section is given")

    base = Path(base_dir)
    for section, keys in (("idx", ("train_images", "train_labels", "test_images", "test_labels")),
                          ("csv", ("path",))):
        if section in data:
            for key in keys:
                if key in data[section]:
                    data[section][key] = str(base / data[section][key])
    cfg["output_dir"] = str(base / cfg["output_dir"])

    fusion_defaults = {
        "k": FusionConfig().k,
        **{k: v for k, v in asdict(LayerPolicy()).items()},
        "old_heads": "fuse",
        **{k: v for k, v in asdict(MatchConfig()).items() if k != "rescale"},
    }
    cfg["fusion"] = {**fusion_defaults, **cfg.get("fusion", {})}
    n_layers = len(cfg["model"]["hidden"])
    if cfg["fusion"]["n_deep"] > n_layers:
        raise ConfigError(f"fusion/n_deep: {cfg['fusion']['n_deep']} exceeds {n_layers} feature layers")
    return cfg


def build_stream(cfg: dict) -> TaskStream:
    data = cfg["data"]
    seed = cfg["seed"]
    source = data["source"]
    if source == "synthetic":
        return gen_synthetic(SyntheticSpec(seed=seed, **data["synthetic"]))
    if source == "idx":
        d = data["idx"]
        train = load_idx(d["train_images"], d["train_labels"])
        test = None
        if "test_images" in d or "test_labels" in d:
            if not ("test_images" in d and "test_labels" in d):
                raise ConfigError("data/idx: test_images and test_labels must be given together")
            test = load_idx(d["test_images"], d["test_labels"])
            n_classes = max(train.class_count, test.class_count)
            train = Dataset(train.features, train.labels, n_classes)
            test = Dataset(test.features, test.labels, n_classes)
        return split_classes(train, d["tasks"], test=test, test_fraction=d.get("test_fraction", 0.2),
                             shuffle_classes=d.get("shuffle_classes", False), seed=seed)
    d = data["csv"]
    full = load_csv(d["path"], d["label_column"])
    return split_classes(full, d["tasks"], test_fraction=d.get("test_fraction", 0.2),
                         shuffle_classes=d.get("shuffle_classes", False), seed=seed)


def fusion_config(f: dict) -> FusionConfig:
    return FusionConfig(
        k=f["k"],
        policy=LayerPolicy(n_deep=f["n_deep"], metric=f["metric"], mode=f["mode"]),
        match=MatchConfig(tau=f["tau"], tau_min=f["tau_min"], max_iters=f["max_iters"],
                          marginal_tol=f["marginal_tol"]),
        old_heads=f["old_heads"],
    )


def run_config(cfg: dict) -> RunConfig:
    t = dict(cfg["train"])
    t["lr_decay_epochs"] = tuple(t["lr_decay_epochs"])
    return RunConfig(
        train=TrainConfig(seed=cfg["seed"], **t),
        fusion=fusion_config(cfg["fusion"]),
        strategy=cfg["strategy"],
        hidden=tuple(cfg["model"]["hidden"]),
    )
