"""Experiment configuration: defaults, JSON schema, dotted overrides."""

from __future__ import annotations

import copy
import json

import jsonschema

__all__ = ["DEFAULT_CONFIG", "SCHEMA", "ConfigError", "load_config", "apply_override", "validate"]


class ConfigError(ValueError):
    pass


DEFAULT_CONFIG = {
    "model": {
        "name": "square_integral",
        "theta0": 2.0,
        "z": 1.0,
        "n_steps": 1000,
        "lambda_scale": 0.01,
        "p": 3,
        "grid_n": 100,
        "t_max": 0.5,
        "t_points": 5,
    },
    "sampling": {"N": 250, "N_list": [50, 250, 1250], "replicates": 20, "seed": 0},
    "prior": {"lower": [1.0], "upper": [3.0]},
    "grid": {"lower": [1.0], "upper": [3.0], "nodes": [801]},
    "mc": {"paths_per_node": 2000, "dt": 1e-4, "n_fields": 100, "quad_grid": 21},
    "fisher": {
        "n_outer": 10000,
        "n_inner": 10000,
        "theta0_grid": [0.5, 2.0, 5.0, 10.0, 20.0, 40.0, 70.0],
        "derivative_mode": "analytic",
        "shared_inner": True,
    },
    "output": {"directory": "."},
}

_num = {"type": "number"}
_pos = {"type": "number", "exclusiveMinimum": 0}
_posint = {"type": "integer", "minimum": 1}
_vec = {"type": "array", "items": _num, "minItems": 1}


def _section(props, required=()):
    return {"type": "object", "properties": props, "additionalProperties": False, "required": list(required)}


SCHEMA = _section({
    "model": _section({
        "name": {"enum": ["square_integral", "schrodinger", "parabolic"]},
        "theta0": _num,
        "z": _pos,
        "n_steps": _posint,
        "lambda_scale": _pos,
        "p": {"type": "integer", "minimum": 1, "maximum": 16},
        "grid_n": {"type": "integer", "minimum": 2},
        "t_max": _pos,
        "t_points": _posint,
    }, ["name", "theta0"]),
    "sampling": _section({
        "N": _posint,
        "N_list": {"type": "array", "items": _posint, "minItems": 1},
        "replicates": _posint,
        "seed": {"type": "integer", "minimum": 0, "maximum": 2**64 - 1},
    }),
    "prior": _section({"lower": _vec, "upper": _vec}),
    "grid": _section({"lower": _vec, "upper": _vec,
                      "nodes": {"type": "array", "items": _posint, "minItems": 1}}),
    "mc": _section({"paths_per_node": _posint, "dt": _pos, "n_fields": {"type": "integer", "minimum": 2},
                    "quad_grid": {"type": "integer", "minimum": 3}}),
    "fisher": _section({
        "n_outer": {"type": "integer", "minimum": 2},
        "n_inner": {"type": "integer", "minimum": 2},
        "theta0_grid": _vec,
        "derivative_mode": {"enum": ["analytic", "central"]},
        "shared_inner": {"type": "boolean"},
    }),
    "output": _section({"directory": {"type": "string"}}),
})


def _merge(base, update, path=""):
    for k, v in update.items():
        if isinstance(v, dict) and isinstance(base.get(k), dict):
            _merge(base[k], v, f"{path}{k}.")
        else:
            base[k] = v
    return base


def validate(cfg):
    try:
        jsonschema.validate(cfg, SCHEMA)
    except jsonschema.ValidationError as exc:
        where = ".".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"config error at {where}: {exc.message}") from None
    model = cfg["model"]
    if model["name"] == "square_integral" and model["p"] > 3:
        raise ConfigError("square_integral supports p <= 3")
    for sec in ("prior", "grid"):
        if len(cfg[sec]["lower"]) != len(cfg[sec]["upper"]):
            raise ConfigError(f"{sec}.lower and {sec}.upper differ in length")
        if any(hi <= lo for lo, hi in zip(cfg[sec]["lower"], cfg[sec]["upper"])):
            raise ConfigError(f"{sec} box must have positive width")
    if len(cfg["grid"]["nodes"]) != len(cfg["grid"]["lower"]):
        raise ConfigError("grid.nodes must give one count per axis")
    return cfg


def apply_override(cfg, assignment):
    """Apply ``a.b.c=value``; the value is parsed as JSON when possible."""
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} is not of the form key=value")
    key, raw = assignment.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    parts = key.strip().split(".")
    node = cfg
    for p in parts[:-1]:
        if not isinstance(node.get(p), dict):
            raise ConfigError(f"unknown config section {key!r}")
        node = node[p]
    if parts[-1] not in node and node is cfg:
        raise ConfigError(f"unknown config section {key!r}")
    node[parts[-1]] = value
    return cfg


def load_config(path=None, overrides=()):
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path is not None:
        with open(path) as fh:
            try:
                user = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"config file is not valid JSON: {exc}") from None
        if not isinstance(user, dict):
            raise ConfigError("config file must hold a JSON object")
        # unknown keys are caught by the schema after merging
        _merge(cfg, user)
    for ov in overrides:
        apply_override(cfg, ov)
    return validate(cfg)
