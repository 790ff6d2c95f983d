"""JSON run configuration: strict key checking and fully resolved defaults."""
from __future__ import annotations

import copy
import inspect
import json
from dataclasses import MISSING, fields
from pathlib import Path
from typing import Any, Dict, Optional

from .data import generate_linear_oracle, generate_vortex_street
from .losses import LossWeights
from .model import ModelConfig
from .trainer import EVAL_SCHEMES, TrainConfig

COMMANDS = ("generate", "train", "eval", "check-integrators", "gradcheck")

GENERATORS = {
    "linear_oracle": generate_linear_oracle,
    "vortex_street": generate_vortex_street,
}


class ConfigError(ValueError):
    pass


def _defaults_of(func, skip=()) -> Dict[str, Any]:
    out = {}
    for name, p in inspect.signature(func).parameters.items():
        if name in skip:
            continue
        out[name] = p.default if p.default is not inspect.Parameter.empty else None
    return out


def _jsonable(v):
    if isinstance(v, tuple):
        return [_jsonable(x) for x in v]
    if isinstance(v, list):
        return [_jsonable(x) for x in v]
    if isinstance(v, dict):
        return {k: _jsonable(x) for k, x in v.items()}
    return v


def _dataclass_defaults(cls, skip=()) -> Dict[str, Any]:
    out = {}
    for f in fields(cls):
        if f.name in skip:
            continue
        if f.default is not MISSING:
            out[f.name] = f.default
    return _jsonable(out)


SECTIONS = {
    "generator": None,  # resolved from the chosen kind
    "dataset": {"train": None, "test": None},
    "model": _dataclass_defaults(ModelConfig, skip=("n_d",)),
    "train": {k: v for k, v in _dataclass_defaults(TrainConfig).items() if k != "loss"},
    "loss": _dataclass_defaults(LossWeights),
    "eval": {"horizon": 8, "scheme": "rk4", "stride": 1},
    "integrators": {"n_steps": 60, "step_sizes": [0.05, 0.1, 0.2], "t_end": 2.0, "align_every": 0.2},
    "gradcheck": {"tolerance": 1e-4, "h": 1e-5, "eps": 1e-6, "n_windows": 2,
                  "n_d": 6, "nz": 3, "horizon": 2, "hidden": [4], "rank": 2, "hyper_hidden": 3,
                  "embed_count": 3},
}
TOP_LEVEL = {"command": None, "out": "run", "seed": None, "checkpoint": None, "stop_epoch": None}

REQUIRED = {
    "generate": [("generator", "kind")],
    "train": [("dataset", "train")],
    "eval": [("dataset", "test"), ("checkpoint",)],
    "check-integrators": [("dataset", "test"), ("checkpoint",)],
    "gradcheck": [],
}


def _check_keys(given: dict, allowed, where: str):
    unknown = sorted(set(given) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")


def resolve(raw: Dict[str, Any], command: str, seed: Optional[int] = None, out: Optional[str] = None) -> Dict[str, Any]:
    """Validate ``raw`` for ``command`` and return a copy with every default filled in."""
    if command not in COMMANDS:
        raise ConfigError(f"unknown command {command!r}")
    if not isinstance(raw, dict):
        raise ConfigError("configuration must be a JSON object")
    _check_keys(raw, list(TOP_LEVEL) + list(SECTIONS), "configuration")
    if raw.get("command") not in (None, command):
        raise ConfigError(f"configuration is for command {raw['command']!r}, not {command!r}")
    cfg = {k: copy.deepcopy(raw.get(k, v)) for k, v in TOP_LEVEL.items()}
    cfg["command"] = command
    for name, defaults in SECTIONS.items():
        given = raw.get(name, {})
        if not isinstance(given, dict):
            raise ConfigError(f"section {name!r} must be an object")
        if name == "generator":
            cfg[name] = _resolve_generator(given) if given or command == "generate" else None
            continue
        _check_keys(given, defaults, f"section {name!r}")
        section = copy.deepcopy(defaults)
        section.update(copy.deepcopy(given))
        cfg[name] = section
    for path in REQUIRED[command]:
        node = cfg
        for key in path:
            node = node.get(key) if isinstance(node, dict) else None
        if node is None:
            raise ConfigError(f"missing required key {'.'.join(path)!r} for command {command!r}")
    if seed is not None:
        cfg["seed"] = seed
    if cfg["seed"] is not None:
        cfg["train"]["seed"] = cfg["seed"]
        cfg["model"]["seed"] = cfg["seed"]
        if cfg["generator"] is not None:
            cfg["generator"]["seed"] = cfg["seed"]
    if out is not None:
        cfg["out"] = out
    if cfg["eval"]["scheme"] == "midpoint":
        cfg["eval"]["scheme"] = "implicit_midpoint"
    if cfg["eval"]["scheme"] not in EVAL_SCHEMES:
        raise ConfigError(f"eval.scheme must be one of {EVAL_SCHEMES}")
    try:
        LossWeights(**cfg["loss"])
        TrainConfig(**cfg["train"], loss=LossWeights(**cfg["loss"]))
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    return cfg


def _resolve_generator(given: dict) -> dict:
    kind = given.get("kind")
    if kind is None:
        raise ConfigError("missing required key 'generator.kind'")
    if kind not in GENERATORS:
        raise ConfigError(f"unknown generator kind {kind!r}; expected one of {sorted(GENERATORS)}")
    defaults = _jsonable(_defaults_of(GENERATORS[kind], skip=("split",)))
    allowed = ["kind", "splits"] + list(defaults)
    _check_keys(given, allowed, "section 'generator'")
    out = {"kind": kind, "splits": {"dataset": 0}}
    out.update(defaults)
    out.update(copy.deepcopy(given))
    if not isinstance(out["splits"], dict) or not out["splits"]:
        raise ConfigError("generator.splits must map output names to split indices")
    return out


def load(path, command: str, seed: Optional[int] = None, out: Optional[str] = None) -> Dict[str, Any]:
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"configuration file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"configuration is not valid JSON: {exc}") from None
    return resolve(raw, command, seed=seed, out=out)


def dumps(cfg: Dict[str, Any]) -> str:
    return json.dumps(cfg, indent=2, sort_keys=True)
