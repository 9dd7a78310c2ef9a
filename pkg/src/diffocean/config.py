"""Run configuration: strict YAML sections, dotted overrides, stable hashing."""
from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path

import yaml

from .errors import ConfigError

DEFAULTS: dict = {
    "grid": {"n_lat": 16, "n_lon": 32, "lat_span": [-80.0, 80.0], "mask": "data"},
    "channels": {"levels": 1},
    "physics": {"nu_momentum": 1000.0, "nu_tracer": 500.0, "n_substeps": 4, "dt": 600.0},
    "corrector": {"base_channels": 8, "n_down": 2, "n_heads": 2, "d_model": 16, "residual": False,
                  "activation": "silu", "zero_init_output": False},
    "train": {"lr": 1e-4, "weight_decay": 1e-5, "batch_size": 2, "steps": 100, "seed": 0,
              "clip": 1.0, "variant": "hybrid", "log_every": 100, "checkpoint_every": 0},
    "data": {
        "path": None,
        "split": [10, 1, 3],
        "synthetic": {"n_steps": 600, "seed": 0, "nu_momentum": 1000.0, "nu_tracer": 500.0,
                      "land": "none", "subgrid": False, "max_wavenumber": 3,
                      "velocity_scale": 0.3, "forcing_period_days": 10.0,
                      "start_date": "1993-01-01"},
    },
    "eval": {"leads": [0, 10, 20, 40], "starts": None, "ablations": False, "dump_frames": False},
    "gradcheck": {"n_weights": 64, "step": 1e-5, "seed": 0, "sample": 0},
}

VARIANTS = ("hybrid", "physics", "corrector")
MASK_SOURCES = ("data", "none")


def _merge(base: dict, new: dict, path="") -> dict:
    out = copy.deepcopy(base)
    for key, val in new.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[key], dict):
            if not isinstance(val, dict):
                raise ConfigError(f"config key {where!r} must be a mapping")
            out[key] = _merge(base[key], val, where + ".")
        else:
            out[key] = val
    return out


def _parse_scalar(text: str):
    try:
        return yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse override value {text!r}: {exc}") from None


def apply_overrides(cfg: dict, overrides) -> dict:
    """Apply ``section.key=value`` strings; values are parsed as YAML scalars."""
    cfg = copy.deepcopy(cfg)
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        parts = key.strip().split(".")
        node = cfg
        for p in parts[:-1]:
            if not isinstance(node.get(p), dict):
                raise ConfigError(f"unknown config key {key!r}")
            node = node[p]
        if parts[-1] not in node or isinstance(node[parts[-1]], dict):
            raise ConfigError(f"unknown config key {key!r}")
        node[parts[-1]] = _parse_scalar(raw)
    return cfg


def _validate(cfg: dict) -> dict:
    def need(cond, msg):
        if not cond:
            raise ConfigError(msg)

    g, p, t = cfg["grid"], cfg["physics"], cfg["train"]
    need(isinstance(g["n_lat"], int) and isinstance(g["n_lon"], int), "grid sizes must be integers")
    need(len(g["lat_span"]) == 2, "grid.lat_span must be [south, north]")
    need(g["mask"] in MASK_SOURCES, f"grid.mask must be one of {MASK_SOURCES}")
    need(isinstance(cfg["channels"]["levels"], int) and cfg["channels"]["levels"] >= 1,
         "channels.levels must be a positive integer")
    need(p["dt"] > 0 and p["n_substeps"] >= 1, "physics.dt and physics.n_substeps must be positive")
    need(p["nu_momentum"] > 0 and p["nu_tracer"] > 0, "diffusivity inits must be positive")
    need(t["variant"] in VARIANTS, f"train.variant must be one of {VARIANTS}")
    need(t["batch_size"] >= 1 and t["steps"] >= 0, "train.batch_size >= 1 and train.steps >= 0")
    need(t["lr"] >= 0 and t["weight_decay"] >= 0, "train.lr and train.weight_decay must be >= 0")
    need(all(isinstance(l, int) and l >= 0 for l in cfg["eval"]["leads"]),
         "eval.leads must be non-negative integers")
    need(len(cfg["data"]["split"]) == 3, "data.split must hold three weights")
    return cfg


def load_config(path=None, overrides=None) -> dict:
    """flag > file > default."""
    cfg = DEFAULTS
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        try:
            loaded = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: invalid YAML: {exc}") from None
        if not isinstance(loaded, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        cfg = _merge(DEFAULTS, loaded)
    return _validate(apply_overrides(cfg, overrides))


def config_hash(cfg: dict) -> str:
    """Hash of the sections that define the model and its training data."""
    keep = {k: cfg[k] for k in ("grid", "channels", "physics", "corrector", "data")}
    blob = json.dumps(keep, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def dump_config(cfg: dict) -> str:
    return yaml.safe_dump(cfg, sort_keys=True)
