"""Scenario configuration: YAML (or JSON) text validated against a schema.

Every matrix is given row-major as nested lists.  Missing optional keys are
filled from :data:`DEFAULTS` so the resolved configuration can be echoed in
the run manifest.
"""
from __future__ import annotations

import copy
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import jsonschema
import numpy as np
import yaml

from .errors import ConfigError, MastrackError

_matrix = {"type": "array", "minItems": 1,
           "items": {"type": "array", "minItems": 1, "items": {"type": "number"}}}
_vector = {"type": "array", "minItems": 1, "items": {"type": "number"}}
_pos = {"type": "number", "exclusiveMinimum": 0}
_scalar_or_list = {"oneOf": [_pos, {"type": "array", "minItems": 1, "items": _pos}]}

SCHEMA: dict = {
    "type": "object",
    "required": ["plant", "topologies", "schedule"],
    "additionalProperties": False,
    "properties": {
        "name": {"type": "string"},
        "plant": {
            "type": "object",
            "required": ["A", "B", "C"],
            "additionalProperties": False,
            "properties": {
                "A": _matrix, "B": _matrix, "C": _matrix,
                "nonlinearity": {
                    "type": "object", "required": ["name"],
                    "properties": {"name": {"type": "string"}},
                },
                "lipschitz": {"type": "number", "minimum": 0},
            },
        },
        "topologies": {
            "type": "object",
            "required": ["graphs"],
            "additionalProperties": False,
            "properties": {
                "graphs": {
                    "type": "array", "minItems": 1,
                    "items": {
                        "type": "object", "required": ["adjacency", "leader_links"],
                        "additionalProperties": False,
                        "properties": {"adjacency": _matrix, "leader_links": _vector},
                    },
                },
                "switching": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {
                        "dwell": _pos,
                        "order": {"type": "array", "minItems": 1, "items": {"type": "integer", "minimum": 1}},
                        "dwells": {"type": "array", "minItems": 1, "items": _pos},
                        "indices": {"type": "array", "minItems": 1, "items": {"type": "integer", "minimum": 1}},
                        "epsilon_bounds": {"type": "array", "minItems": 2, "maxItems": 2, "items": _pos},
                    },
                },
            },
        },
        "schedule": {
            "type": "object",
            "required": ["w", "delta"],
            "additionalProperties": False,
            "properties": {
                "w": _pos,
                "delta": _scalar_or_list,
                "h": _scalar_or_list,
                "mode": {"enum": ["two-mode", "three-mode"]},
            },
        },
        "synthesis": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "beta": _pos, "l": _pos, "rho": _pos,
                "max_iter": {"type": "integer", "minimum": 1},
                "tol": _pos,
                "best_effort": {"type": "boolean"},
                "observer_floor": _pos,
                "observer_gain_cap": _pos,
                "t_hat": {"type": "number"},
                "fixture": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {"P1": _matrix, "P2": _matrix, "K": _matrix, "G_obs": _matrix},
                },
            },
        },
        "simulation": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "step": {"type": "number"},
                "horizon": {"type": "number"},
                "seed": {"type": "integer", "minimum": 0},
                "leader": _vector,
                "followers": _matrix,
                "estimates": _matrix,
                "record_every": {"type": "integer", "minimum": 1},
                "tolerance": _pos,
            },
        },
        "output": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "directory": {"type": "string"},
                "plots": {"type": "boolean"},
                "trace": {"type": "boolean"},
            },
        },
        "sweep": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "deltas": {"type": "array", "minItems": 1, "items": _pos},
                "horizon": _pos,
                "tolerance": _pos,
                "workers": {"type": "integer", "minimum": 1},
            },
        },
        "leader_term_sign": {"enum": [1, -1]},
        "neighbor_term_sign": {"enum": [1, -1]},
    },
}

DEFAULTS: dict = {
    "name": "scenario",
    "plant": {"nonlinearity": {"name": "zero"}},
    "schedule": {"mode": "two-mode"},
    "synthesis": {"beta": 0.01, "l": 0.02, "rho": 0.2, "max_iter": 5000, "tol": 1e-6,
                  "best_effort": False, "observer_floor": 1.0, "observer_gain_cap": 50.0,
                  "t_hat": 0.0},
    "simulation": {"step": 1e-3, "horizon": 100.0, "seed": 0, "record_every": 1, "tolerance": 1e-2},
    "output": {"directory": "out", "plots": True, "trace": True},
    "sweep": {"deltas": [0.5, 1.0, 1.5, 2.0, 2.5, 3.0, 3.5, 4.0, 4.5], "tolerance": 1e-2, "workers": 1},
    "leader_term_sign": 1,
    "neighbor_term_sign": 1,
}

OUT_DIR_ENV = "MASTRACK_OUT_DIR"


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _path(err: jsonschema.ValidationError) -> str:
    return "/".join(str(p) for p in err.absolute_path) or "<root>"


def validate(raw: Any) -> dict:
    """Schema-check ``raw``, fill defaults and cross-check dimensions; returns the resolved dict."""
    if not isinstance(raw, dict):
        raise ConfigError("configuration must be a mapping at the top level")
    validator = jsonschema.Draft7Validator(SCHEMA)
    errors = sorted(validator.iter_errors(raw), key=lambda e: list(e.absolute_path))
    if errors:
        msgs = "; ".join(f"{_path(e)}: {e.message}" for e in errors[:5])
        raise ConfigError(f"schema validation failed: {msgs}")
    cfg = _merge(DEFAULTS, raw)
    _cross_check(cfg)
    return cfg


def _shape(x) -> tuple:
    try:
        return np.asarray(x, dtype=float).shape
    except ValueError:
        raise ConfigError("ragged matrix in configuration") from None


def _cross_check(cfg: dict) -> None:
    p = cfg["plant"]
    A, B, C = _shape(p["A"]), _shape(p["B"]), _shape(p["C"])
    if len(A) != 2 or A[0] != A[1]:
        raise ConfigError(f"plant/A must be square, got {A}")
    n = A[0]
    if len(B) != 2 or B[0] != n:
        raise ConfigError(f"plant/B must have {n} rows, got {B}")
    if len(C) != 2 or C[1] != n:
        raise ConfigError(f"plant/C must have {n} columns, got {C}")
    graphs = cfg["topologies"]["graphs"]
    N = _shape(graphs[0]["adjacency"])
    if len(N) != 2 or N[0] != N[1]:
        raise ConfigError("topologies/graphs/0/adjacency must be square")
    N = N[0]
    for k, g in enumerate(graphs):
        if _shape(g["adjacency"]) != (N, N) or _shape(g["leader_links"]) != (N,):
            raise ConfigError(f"topologies/graphs/{k}: every graph needs {N} followers")
    sw = cfg["topologies"].get("switching", {})
    if ("dwells" in sw) != ("indices" in sw):
        raise ConfigError("topologies/switching: 'dwells' and 'indices' go together")
    for idx in list(sw.get("order", [])) + list(sw.get("indices", [])):
        if idx > len(graphs):
            raise ConfigError(f"topologies/switching: index {idx} exceeds the {len(graphs)} graphs")
    sim = cfg["simulation"]
    if not sim["step"] > 0:
        raise ConfigError("simulation/step must be positive")
    if not sim["horizon"] > 0:
        raise ConfigError("simulation/horizon must be positive")
    if "leader" in sim and _shape(sim["leader"]) != (n,):
        raise ConfigError(f"simulation/leader must have {n} entries")
    for key in ("followers", "estimates"):
        if key in sim and _shape(sim[key]) != (N, n):
            raise ConfigError(f"simulation/{key} must be {N}x{n}")
    fx = cfg["synthesis"].get("fixture", {})
    m, z = B[1], C[0]
    expect = {"P1": (n, n), "P2": (n, n), "K": (m, n), "G_obs": (n, z)}
    for key, shp in expect.items():
        if key in fx and _shape(fx[key]) != shp:
            raise ConfigError(f"synthesis/fixture/{key} must be {shp[0]}x{shp[1]}")
    sched = cfg["schedule"]
    if (sched["mode"] == "three-mode") != ("h" in sched):
        raise ConfigError("schedule: 'h' is required exactly for mode three-mode")


def load(path: str | os.PathLike) -> dict:
    """Read and validate a configuration file."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read configuration {path}: {exc}") from None
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse configuration {path}: {exc}") from None
    return validate(raw)


def output_directory(cfg: dict, flag: str | None = None) -> Path:
    """Flag beats environment variable beats config file."""
    if flag:
        return Path(flag)
    env = os.environ.get(OUT_DIR_ENV)
    if env:
        return Path(env)
    return Path(cfg["output"]["directory"])


@dataclass
class ScenarioParts:
    """Objects built from a resolved configuration."""

    plant: Any
    topologies: tuple
    switching: Any
    comm: Any
    initial: Any
    signs: Any


def build(cfg: dict, seed: int | None = None, horizon: float | None = None,
          comm=None) -> ScenarioParts:
    """Turn a resolved config into model objects; structural errors surface as ConfigError."""
    from .dynamics import (CommSchedule, PlantModel, ProtocolSigns, SystemState,
                           default_initial_state, make_nonlinearity)
    from .graph import SwitchingSchedule, build_topology

    try:
        p = cfg["plant"]
        A = np.asarray(p["A"], dtype=float)
        nl = dict(p["nonlinearity"])
        f = make_nonlinearity(nl.pop("name"), A.shape[0], **nl)
        lip = float(p.get("lipschitz", f.lipschitz))
        plant = PlantModel(A, np.asarray(p["B"], dtype=float), np.asarray(p["C"], dtype=float), f, lip)
        tops = tuple(build_topology(g["adjacency"], g["leader_links"]) for g in cfg["topologies"]["graphs"])
        sched = cfg["schedule"]
        if comm is None:
            comm = CommSchedule(float(sched["w"]), _tuple_or_float(sched["delta"]),
                                _tuple_or_float(sched.get("h")), sched["mode"])
        sim = cfg["simulation"]
        T = float(horizon if horizon is not None else sim["horizon"])
        sw = cfg["topologies"].get("switching", {})
        if "dwells" in sw:
            eps = tuple(sw["epsilon_bounds"]) if "epsilon_bounds" in sw else None
            switching = SwitchingSchedule.from_dwells(tops, sw["dwells"], sw["indices"], T, eps)
        else:
            switching = SwitchingSchedule.cyclic(tops, float(sw.get("dwell", comm.w)), T, sw.get("order"))
        rng = np.random.default_rng(sim["seed"] if seed is None else seed)
        n, N = plant.n, tops[0].n_followers
        init = default_initial_state(n, N, rng, sim.get("leader"))
        if "followers" in sim or "estimates" in sim:
            init = SystemState(init.leader,
                               np.asarray(sim.get("followers", init.followers), dtype=float),
                               np.asarray(sim.get("estimates", init.estimates), dtype=float))
        signs = ProtocolSigns(int(cfg["leader_term_sign"]), int(cfg["neighbor_term_sign"]))
    except MastrackError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc
    return ScenarioParts(plant, tops, switching, comm, init, signs)


def _tuple_or_float(x):
    if x is None:
        return None
    if isinstance(x, (list, tuple)):
        return tuple(float(v) for v in x)
    return float(x)
