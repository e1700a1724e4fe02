"""Experiment configuration: JSON schema, defaults, environment overrides, run ids."""

from __future__ import annotations

import copy
import hashlib
import json
import os
from dataclasses import fields

import jsonschema

from .errors import ConfigurationError
from .trainer import TrainConfig

ENV_PREFIX = "QUZO_"

_FORMAT = {"type": ["string", "null"]}
_TRAIN_TYPES = {
    "steps": {"type": "integer", "minimum": 0},
    "lr": {"type": "number", "minimum": 0},
    "lr_schedule": {"enum": ["constant", "linear"]},
    "epsilon": {"type": "number", "exclusiveMinimum": 0},
    "queries": {"type": "integer", "minimum": 1},
    "batch_size": {"type": "integer", "minimum": 1},
    "weight_format": _FORMAT,
    "act_format": _FORMAT,
    "perturbation_format": _FORMAT,
    "optimizer": {"enum": ["quzo", "quzo-rge1", "ste-fo", "mezo-fp"]},
    "accumulation_steps": {"type": "integer", "minimum": 1},
    "seed": {"type": "integer", "minimum": 0},
    "target": {"enum": ["full", "lora"]},
    "lora_rank": {"type": "integer", "minimum": 1},
    "lora_alpha": {"type": "number"},
    "lora_format": _FORMAT,
    "weight_decay": {"type": "number", "minimum": 0},
    "headroom": {"type": "number", "exclusiveMinimum": 0},
    "eval_every": {"type": "integer", "minimum": 0},
    "verify_recovery": {"type": "boolean"},
    "spike_guard": {"type": "number", "exclusiveMinimum": 0},
}
assert set(_TRAIN_TYPES) == {f.name for f in fields(TrainConfig)}


def _obj(props: dict) -> dict:
    return {"type": "object", "properties": props, "additionalProperties": False}


SCHEMA = _obj({
    "task": {"enum": ["two-gaussians", "xor-clusters", "token-copy"]},
    "seed": {"type": "integer", "minimum": 0},
    "out": {"type": ["string", "null"]},
    "threads": {"type": "integer", "minimum": 1},
    "data": _obj({
        "path": {"type": ["string", "null"]},
        "n": {"type": "integer", "minimum": 1},
        "seed": {"type": ["integer", "null"], "minimum": 0},
        "dim": {"type": "integer", "minimum": 1},
        "margin": {"type": "number"},
        "vocab": {"type": "integer", "minimum": 2},
        "seq_len": {"type": "integer", "minimum": 1},
    }),
    "model": _obj({
        "kind": {"enum": ["mlp", "encoder", None]},
        "checkpoint": {"type": ["string", "null"]},
        "hidden": {"type": "array", "items": {"type": "integer", "minimum": 1}},
        "activation": {"enum": ["relu", "gelu"]},
        "d_model": {"type": "integer", "minimum": 1},
        "heads": {"type": "integer", "minimum": 1},
        "blocks": {"type": "integer", "minimum": 1, "maximum": 2},
    }),
    "train": _obj(_TRAIN_TYPES),
    "bias_sweep": _obj({
        "bits": {"type": "array", "items": {"enum": [3, 4, 8]}, "minItems": 1},
        "n": {"type": "integer", "minimum": 1},
        "epsilon": {"type": "number", "exclusiveMinimum": 0},
        "batch_size": {"type": "integer", "minimum": 1},
    }),
    "dtype_search": _obj({
        "candidates": {"type": "array", "items": {"type": "string"}, "minItems": 1},
        "granularity": {"enum": ["per-tensor", "per-channel"]},
    }),
    "mem_report": _obj({
        "batch_elems": {"type": ["integer", "null"], "minimum": 1},
    }),
})

DEFAULTS = {
    "task": "two-gaussians",
    "seed": 0,
    "out": None,
    "threads": 1,
    "data": {"path": None, "n": 1000, "seed": None, "dim": 2, "margin": 4.0, "vocab": 8, "seq_len": 8},
    "model": {"kind": None, "checkpoint": None, "hidden": [32], "activation": "relu",
              "d_model": 64, "heads": 4, "blocks": 1},
    "train": {f.name: f.default for f in fields(TrainConfig)},
    "bias_sweep": {"bits": [3, 4, 8], "n": 1000, "epsilon": 1e-3, "batch_size": 16},
    "dtype_search": {"candidates": ["INT4", "FP4"], "granularity": "per-channel"},
    "mem_report": {"batch_elems": None},
}


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def validate(cfg: dict):
    try:
        jsonschema.validate(cfg, SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(map(str, exc.absolute_path)) or "<root>"
        raise ConfigurationError(f"config error at {where}: {exc.message}") from None


def env_overrides(environ=None) -> dict:
    """``QUZO_TRAIN__LR=0.01`` becomes ``{"train": {"lr": 0.01}}``; values parse as JSON when they can."""
    environ = os.environ if environ is None else environ
    out: dict = {}
    for key, raw in sorted(environ.items()):
        if not key.startswith(ENV_PREFIX):
            continue
        path = key[len(ENV_PREFIX):].lower().split("__")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = out
        for p in path[:-1]:
            node = node.setdefault(p, {})
        node[path[-1]] = value
    return out


def load_config(path=None, overrides=None, environ=None) -> dict:
    """Defaults, then the JSON file, then environment, then ``overrides``; validated."""
    user: dict = {}
    if path is not None:
        try:
            with open(path) as fh:
                user = json.load(fh)
        except FileNotFoundError:
            raise ConfigurationError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(user, dict):
            raise ConfigurationError(f"{path}: top level must be an object")
    validate(user)
    cfg = _merge(DEFAULTS, user)
    cfg = _merge(cfg, env_overrides(environ))
    cfg = _merge(cfg, overrides or {})
    validate(cfg)
    # one seed drives everything unless a section pins its own
    cfg["train"]["seed"] = cfg["seed"] if "seed" not in user.get("train", {}) else cfg["train"]["seed"]
    if cfg["model"]["kind"] is None:
        cfg["model"]["kind"] = "encoder" if cfg["task"] == "token-copy" else "mlp"
    if cfg["data"]["seed"] is None:
        cfg["data"]["seed"] = cfg["seed"]
    return cfg


def canonical(cfg: dict) -> str:
    return json.dumps(cfg, sort_keys=True, separators=(",", ":"))


def run_id(cfg: dict, command: str) -> str:
    """sha1 of the command and the canonical config; where the run is written and how many threads it uses do not count."""
    numeric = {k: v for k, v in cfg.items() if k not in ("out", "threads")}
    return hashlib.sha1(f"{command}\n{canonical(numeric)}".encode()).hexdigest()


def train_config(cfg: dict) -> TrainConfig:
    return TrainConfig.from_dict(cfg["train"])
