"""Experiment configuration: JSON schema, validation and object construction."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import jsonschema
import numpy as np

from . import coeffs
from .solver import SolverConfig

SCHEMA_VERSION = "homdefect/1"

_number = {"type": "number"}
_pos = {"type": "number", "exclusiveMinimum": 0}
_named = {
    "type": "object",
    "properties": {"name": {"type": "string"}, "params": {"type": "object"}},
    "required": ["name"],
    "additionalProperties": False,
}

SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "additionalProperties": False,
    "required": ["schema", "dim", "coefficient"],
    "properties": {
        "schema": {"const": SCHEMA_VERSION},
        "dim": {"enum": [1, 2]},
        "n": {"type": "integer", "minimum": 1},
        "domain": {"type": "array", "items": {"type": "array", "items": _number, "minItems": 2, "maxItems": 2},
                   "minItems": 1, "maxItems": 2},
        "mesh": {"type": "object", "additionalProperties": False,
                 "properties": {"m": {"type": "integer", "minimum": 2}}},
        "cell": {"type": "object", "additionalProperties": False,
                 "properties": {"m": {"oneOf": [{"type": "integer", "minimum": 2}, {"const": "matched"}]},
                                "sample_density": {"type": "integer", "minimum": 8}}},
        "coefficient": {
            "type": "object",
            "additionalProperties": False,
            "required": ["name"],
            "properties": {
                "name": {"enum": ["constant", "laminate", "checkerboard", "trig", "table"]},
                "params": {"type": "object"},
                "coupling": {"type": "array", "items": {"type": "array", "items": _number}},
            },
        },
        "defect": {"oneOf": [{"type": "null"}, {
            "type": "object",
            "additionalProperties": False,
            "required": ["name"],
            "properties": {"name": {"enum": ["ball", "ball_relative", "gaussian"]}, "params": {"type": "object"}},
        }]},
        "nonlinearity": {
            "type": "object",
            "additionalProperties": False,
            "required": ["name"],
            "properties": {"name": {"enum": ["zero", "linear", "cubic", "drift_cubic", "sine", "coupled"]},
                           "params": {"type": "object"}},
        },
        "eps": _pos,
        "ladder": {"type": "array", "items": _pos, "minItems": 1},
        "variant": {"enum": ["smoothed-2D", "plain-2D", "plain-scalar"]},
        "solver": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "tol": _pos,
                "max_iter": {"type": "integer", "minimum": 1},
                "damping": {"type": "boolean"},
                "monitor_window": {"type": "integer", "minimum": 1},
                "growth_limit": _pos,
                "rho_tol": _pos,
            },
        },
        "fit": {"type": "object", "additionalProperties": False,
                "properties": {"exclude_largest": {"type": "boolean"},
                               "min_points": {"type": "integer", "minimum": 2}}},
        "resolution_floor": _pos,
        "allow_underresolved": {"type": "boolean"},
        "probe": {"type": "object", "additionalProperties": False,
                  "properties": {"delta": {"type": "number", "minimum": 0},
                                 "trials": {"type": "integer", "minimum": 1}}},
        "field": {"type": "object", "additionalProperties": False,
                  "properties": {"kind": {"enum": ["smooth", "spike"]}, "exponent": _pos}},
        "target": {"oneOf": [{"type": "null"}, {
            "type": "object", "additionalProperties": False, "required": ["kind"],
            "properties": {"kind": {"enum": ["bump", "sine"]}, "amplitude": _number}}]},
        "seed": {"type": "integer", "minimum": 0},
        "output": {"type": "string"},
        "plot": {"type": "boolean"},
        "export_matrix": {"type": "boolean"},
    },
}


class ConfigError(ValueError):
    """Invalid experiment configuration."""


def _path_of(err: jsonschema.ValidationError) -> str:
    parts = [str(p) for p in err.absolute_path]
    return "/".join(parts) if parts else "<root>"


def validate(raw: dict) -> None:
    """Schema check; messages name the offending key."""
    validator = jsonschema.Draft202012Validator(SCHEMA)
    errors = sorted(validator.iter_errors(raw), key=lambda e: list(e.absolute_path))
    if errors:
        msgs = []
        for e in errors:
            if e.validator == "additionalProperties":
                extra = sorted(set(e.instance) - set(e.schema.get("properties", {})))
                msgs.append(f"unknown key(s) {', '.join(repr(k) for k in extra)} at {_path_of(e)}")
            else:
                msgs.append(f"{_path_of(e)}: {e.message}")
        raise ConfigError("; ".join(msgs))


@dataclass(eq=False)
class ExperimentConfig:
    raw: dict
    dim: int
    n: int
    extents: tuple
    mesh_m: int
    cell_m: int | str
    sample_density: int
    a: coeffs.PeriodicCoefficient
    b: coeffs.DefectCoefficient | None
    nl: coeffs.Nonlinearity | None
    eps: float | None
    ladder: list
    variant: str
    solver: SolverConfig
    exclude_largest: bool
    min_points: int
    resolution_floor: float
    allow_underresolved: bool
    probe_delta: float
    probe_trials: int
    field_kind: str
    field_exponent: float
    seed: int
    output: str
    plot: bool
    export_matrix: bool
    target: dict | None = None

    def spec(self):
        from .study import ProblemSpec, bump_target, sine_target

        target = None
        if self.target:
            make = bump_target if self.target["kind"] == "bump" else sine_target
            target = make(self.extents, float(self.target.get("amplitude", 1.0)), self.n)
        return ProblemSpec(self.a, self.nl, self.dim, self.extents, self.mesh_m, self.cell_m, self.b,
                           self.variant, self.solver, self.resolution_floor, self.allow_underresolved,
                           self.exclude_largest, self.min_points, target)

    def mesh_h(self) -> float:
        spacing = [(hi - lo) / self.mesh_m for lo, hi in self.extents]
        return float(np.sqrt(np.sum(np.square(spacing))))


def build(raw: dict, base_dir: Path | None = None) -> ExperimentConfig:
    validate(raw)
    dim = raw["dim"]
    n = raw.get("n", 1)
    domain = raw.get("domain", [[-0.5, 0.5]] * dim)
    if len(domain) != dim:
        raise ConfigError(f"domain: expected {dim} intervals, got {len(domain)}")
    extents = tuple((float(lo), float(hi)) for lo, hi in domain)
    if any(hi <= lo for lo, hi in extents):
        raise ConfigError("domain: degenerate interval")
    cpar = dict(raw["coefficient"].get("params", {}))
    name = raw["coefficient"]["name"]
    if name == "table" and base_dir is not None and "path" in cpar:
        p = Path(cpar["path"])
        cpar["path"] = str(p if p.is_absolute() else base_dir / p)
    try:
        a = coeffs.make_coefficient(name, dim, n=n, coupling=raw["coefficient"].get("coupling"), **cpar)
    except (TypeError, ValueError, KeyError, OSError) as exc:
        raise ConfigError(f"coefficient: {exc}") from exc
    b = None
    if raw.get("defect"):
        try:
            b = coeffs.make_defect(raw["defect"]["name"], a, **raw["defect"].get("params", {}))
        except (TypeError, ValueError, KeyError) as exc:
            raise ConfigError(f"defect: {exc}") from exc
    nl = None
    if raw.get("nonlinearity"):
        try:
            nl = coeffs.make_nonlinearity(raw["nonlinearity"]["name"], n=n, **raw["nonlinearity"].get("params", {}))
        except (TypeError, ValueError, KeyError) as exc:
            raise ConfigError(f"nonlinearity: {exc}") from exc
    solver = SolverConfig(**raw.get("solver", {}))
    fit = raw.get("fit", {})
    probe = raw.get("probe", {})
    fld = raw.get("field", {})
    cfg = ExperimentConfig(
        raw=raw, dim=dim, n=n, extents=extents,
        mesh_m=raw.get("mesh", {}).get("m", 256),
        cell_m=raw.get("cell", {}).get("m", 64),
        sample_density=raw.get("cell", {}).get("sample_density", 64),
        a=a, b=b, nl=nl,
        eps=raw.get("eps"),
        ladder=list(raw.get("ladder", [])),
        variant=raw.get("variant", "plain-2D"),
        solver=solver,
        exclude_largest=fit.get("exclude_largest", True),
        min_points=fit.get("min_points", 4),
        resolution_floor=float(raw.get("resolution_floor", 8.0)),
        allow_underresolved=bool(raw.get("allow_underresolved", False)),
        probe_delta=float(probe.get("delta", 0.1)),
        probe_trials=int(probe.get("trials", 8)),
        field_kind=fld.get("kind", "smooth"),
        field_exponent=float(fld.get("exponent", 0.25)),
        seed=int(raw.get("seed", 0)),
        output=raw.get("output", "out"),
        plot=bool(raw.get("plot", True)),
        export_matrix=bool(raw.get("export_matrix", False)),
        target=raw.get("target"),
    )
    if cfg.ladder and any(y >= x for x, y in zip(cfg.ladder, cfg.ladder[1:])):
        raise ConfigError("ladder: eps values must be strictly decreasing")
    _check_resolution(cfg)
    return cfg


def _check_resolution(cfg: ExperimentConfig) -> None:
    scales = list(cfg.ladder) + ([cfg.eps] if cfg.eps else [])
    oscillating = cfg.b is not None or not cfg.a.is_constant
    if not scales or not oscillating or cfg.allow_underresolved:
        return
    h = cfg.mesh_h() if cfg.dim == 2 else (cfg.extents[0][1] - cfg.extents[0][0]) / cfg.mesh_m
    eps_min = min(scales)
    if h > eps_min / cfg.resolution_floor * (1 + 1e-12):
        raise ConfigError(f"mesh: h={h:.4g} exceeds eps_min/{cfg.resolution_floor:g}={eps_min / cfg.resolution_floor:.4g}; "
                          "refine mesh.m or set allow_underresolved")


def load(path) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    return build(raw, path.parent)
