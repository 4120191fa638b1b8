"""Run configuration: a YAML file validated against a closed schema.

Unknown keys anywhere in the file are rejected before any work starts, so
misspelled settings fail fast instead of silently using defaults.  See
`example-config.yaml` in the repository root for a fully annotated file.
"""

from __future__ import annotations

from pathlib import Path

import yaml

from .core import HyperParams
from .simgen import SimConfig

__all__ = ["ConfigError", "load_config", "hyper_from_config",
           "sim_from_config", "method_grids", "DEFAULT_GRIDS", "METHODS"]


class ConfigError(ValueError):
    pass


METHODS = ("pair", "sirtv", "pool", "vr", "rvr", "tr", "rtr")

DEFAULT_GRIDS = {
    "pair": {
        "r_components": [2, 3, 4],
        "lambda_tv": [0.01, 0.1, 1.0, 10.0],
        "gamma_sip": [0.01, 0.1, 1.0, 10.0],
        "tau": [0.3, 0.5, 0.7],
    },
    "sirtv": {"lambda_tv": [0.01, 0.1, 1.0, 10.0, 100.0]},
    "pool": {"lambda_tv": [0.01, 0.1, 1.0, 10.0, 100.0]},
    "rvr": {"alpha": [0.01, 0.1, 1.0, 10.0, 100.0]},
    "tr": {"rank": [1, 2, 3, 4, 5]},
    "rtr": {"rank": [1, 2, 3, 4, 5], "alpha": [0.01, 0.1, 1.0, 10.0, 100.0]},
}

_NUM = (int, float)

# key -> (type_check, default); None default means "optional, absent"
_SCHEMA = {
    "seed": (int, 0),
    "jobs": (int, 1),
    "deterministic": (bool, False),
    "out": (str, "out"),
    "method": (str, "pair"),
    "methods": (list, ["pair"]),
    "sim": {
        "setting": (str, "S1"),
        "n_per_source": (int, 300),
        "t_sources": (int, 3),
        "r_components": (int, 3),
        "d_covariates": (int, 5),
        "rows": (int, 64),
        "cols": (int, 64),
        "noise_sd": (_NUM, 1.0),
        "intercept": (bool, False),
        "component_size": (int, 16),
        "component_amplitude": (_NUM, 1.0),
        "image_source": (str, "gaussian"),
        "image_path": ((str, type(None)), None),
    },
    "data": {
        "train": ((str, type(None)), None),
        "val": ((str, type(None)), None),
        "test": ((str, type(None)), None),
        "truth": ((str, type(None)), None),
        "params": ((str, type(None)), None),
    },
    "hyper": {
        "r_components": (int, 3),
        "lambda_tv": (_NUM, 0.1),
        "gamma_sip": (_NUM, 1.0),
        "tau": (_NUM, 0.5),
        "learning_rate": (_NUM, 0.01),
        "max_epochs": (int, 500),
        "patience": (int, 20),
        "inner_steps": (int, 50),
        "init_sd": (_NUM, 0.01),
    },
    "grids": {
        "pair": (dict, None),
        "sirtv": (dict, None),
        "pool": (dict, None),
        "rvr": (dict, None),
        "tr": (dict, None),
        "rtr": (dict, None),
    },
    "replicate": {
        "n_reps": (int, 10),
    },
    "options": {
        "vr_marginal": (bool, False),
        "pool_stage_indicator": (bool, False),
        "heatmap_scale": (str, "symmetric"),
        "figures": (bool, True),
    },
    "export": {
        "input": ((str, type(None)), None),
        "field": (str, "coefficients"),
        "index": (int, 0),
        "output": ((str, type(None)), None),
        "scale": (str, "minmax"),
    },
}

_GRID_KEYS = {
    "pair": {"r_components", "lambda_tv", "gamma_sip", "tau"},
    "sirtv": {"lambda_tv"},
    "pool": {"lambda_tv"},
    "rvr": {"alpha"},
    "tr": {"rank"},
    "rtr": {"rank", "alpha"},
}


def _apply_schema(raw: dict, schema: dict, path: str) -> dict:
    out = {}
    unknown = set(raw) - set(schema)
    if unknown:
        raise ConfigError(f"unknown config key(s) at {path or 'top level'}: "
                          + ", ".join(sorted(unknown)))
    for key, rule in schema.items():
        where = f"{path}.{key}" if path else key
        if isinstance(rule, dict):
            sub = raw.get(key) or {}  # a bare section key parses as null
            if not isinstance(sub, dict):
                raise ConfigError(f"{where} must be a mapping")
            out[key] = _apply_schema(sub, rule, where)
        else:
            expected, default = rule
            value = raw.get(key, default)
            if value is None and default is None:
                out[key] = None
                continue
            if expected is int and isinstance(value, bool):
                raise ConfigError(f"{where} must be an integer")
            if not isinstance(value, expected):
                raise ConfigError(f"{where} has the wrong type: {value!r}")
            out[key] = value
    return out


def _validate_semantics(cfg: dict) -> None:
    if not 0 <= cfg["seed"] < 2**64:
        raise ConfigError("seed must be a 64-bit unsigned integer")
    if cfg["jobs"] < 1:
        raise ConfigError("jobs must be at least 1")
    if cfg["method"] not in METHODS:
        raise ConfigError(f"unknown method {cfg['method']!r}")
    if not cfg["methods"]:
        raise ConfigError("methods list is empty")
    for m in cfg["methods"]:
        if m not in METHODS:
            raise ConfigError(f"unknown method {m!r} in methods list")
    if cfg["replicate"]["n_reps"] < 1:
        raise ConfigError("replicate.n_reps must be at least 1")
    if cfg["sim"]["image_source"] not in ("gaussian", "from_files"):
        raise ConfigError("sim.image_source must be 'gaussian' or 'from_files'")
    if cfg["options"]["heatmap_scale"] not in ("minmax", "symmetric"):
        raise ConfigError("options.heatmap_scale must be 'minmax' or 'symmetric'")
    if cfg["export"]["scale"] not in ("minmax", "symmetric"):
        raise ConfigError("export.scale must be 'minmax' or 'symmetric'")
    for method, grid in cfg["grids"].items():
        if grid is None:
            continue
        unknown = set(grid) - _GRID_KEYS[method]
        if unknown:
            raise ConfigError(f"unknown grid key(s) for {method}: "
                              + ", ".join(sorted(unknown)))
        for key, values in grid.items():
            if not isinstance(values, list) or not values:
                raise ConfigError(f"grids.{method}.{key} must be a nonempty list")


def load_config(path) -> dict:
    """Parse and validate a YAML run configuration."""
    text = Path(path).read_text()
    raw = yaml.safe_load(text)
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError("config file must contain a mapping")
    cfg = _apply_schema(raw, _SCHEMA, "")
    _validate_semantics(cfg)
    return cfg


def hyper_from_config(cfg: dict, seed: int) -> HyperParams:
    h = cfg["hyper"]
    return HyperParams(
        r_components=h["r_components"],
        lambda_tv=float(h["lambda_tv"]),
        gamma_sip=float(h["gamma_sip"]),
        tau=float(h["tau"]),
        learning_rate=float(h["learning_rate"]),
        max_epochs=h["max_epochs"],
        patience=h["patience"],
        inner_steps=h["inner_steps"],
        init_sd=float(h["init_sd"]),
        seed=seed,
    )


def sim_from_config(cfg: dict, seed: int) -> SimConfig:
    s = cfg["sim"]
    return SimConfig(
        setting=s["setting"],
        n_per_source=s["n_per_source"],
        t_sources=s["t_sources"],
        r_components=s["r_components"],
        d=s["d_covariates"],
        p=s["rows"],
        q=s["cols"],
        noise_sd=float(s["noise_sd"]),
        intercept=s["intercept"],
        component_size=s["component_size"],
        component_amplitude=float(s["component_amplitude"]),
        seed=seed,
    )


def method_grids(cfg: dict, method: str) -> dict:
    """Configured grid for a method, falling back to the default ranges."""
    grid = cfg["grids"].get(method)
    out = dict(DEFAULT_GRIDS[method])
    if grid:
        out.update({k: list(v) for k, v in grid.items()})
    return out
