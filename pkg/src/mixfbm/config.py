"""Run configuration: a TOML file checked against a JSON schema before use.

Example::

    seed = 7

    [model]
    H = 0.7
    T = 1.0
    n_steps = 200
    drift = "bump"
    effect = { family = "gaussian", mean = 1.0, variance = 0.25 }

    [data]
    N = 200

    [estimator]
    method = "known_var"

    [study]
    R = 500

    [output]
    dir = "out"
"""

from __future__ import annotations

import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import jsonschema

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .errors import ConfigError
from .kernel import DEFAULT_METHOD, DEFAULT_TOLERANCE, METHODS
from .mcstudy import ESTIMATORS, StudyConfig
from .sim import (
    DegenerateEffect,
    EffectDistribution,
    GaussianEffect,
    LinearMultiplier,
    TabulatedDensity,
    TimeGrid,
    parse_drift,
)

_NUM = {"type": "number"}
_POS = {"type": "number", "exclusiveMinimum": 0}
_COUNT = {"type": "integer", "minimum": 1}

_EFFECT = {
    "type": "object",
    "required": ["family"],
    "properties": {
        "family": {"enum": ["gaussian", "degenerate", "tabulated"]},
        "mean": _NUM,
        "variance": {"type": "number", "minimum": 0},
        "value": _NUM,
        "nodes": {"type": "array", "items": _NUM, "minItems": 1},
        "weights": {"type": "array", "items": {"type": "number", "minimum": 0}, "minItems": 1},
    },
    "additionalProperties": False,
    "allOf": [
        {
            "if": {"properties": {"family": {"const": "gaussian"}}},
            "then": {"required": ["mean", "variance"]},
        },
        {"if": {"properties": {"family": {"const": "degenerate"}}}, "then": {"required": ["value"]}},
        {"if": {"properties": {"family": {"const": "tabulated"}}}, "then": {"required": ["nodes", "weights"]}},
    ],
}

SCHEMA = {
    "type": "object",
    "required": ["model"],
    "additionalProperties": False,
    "properties": {
        "seed": {"type": "integer", "minimum": 0, "maximum": 2**64 - 1},
        "model": {
            "type": "object",
            "required": ["H", "T", "n_steps", "drift", "effect"],
            "additionalProperties": False,
            "properties": {
                "H": {"type": "number", "minimum": 0.5, "exclusiveMaximum": 1},
                "T": _POS,
                "n_steps": _COUNT,
                "drift": {"type": "string"},
                "drift_table": {
                    "type": "object",
                    "required": ["x", "y"],
                    "additionalProperties": False,
                    "properties": {
                        "x": {"type": "array", "items": _NUM, "minItems": 2},
                        "y": {"type": "array", "items": _NUM, "minItems": 2},
                    },
                },
                "x0": _NUM,
                "effect": _EFFECT,
            },
        },
        "data": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"N": _COUNT, "path": {"type": "string"}},
        },
        "solver": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"tolerance": _POS, "method": {"enum": list(METHODS)}},
        },
        "estimator": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "method": {"enum": list(ESTIMATORS)},
                "sigma2": {"type": "number", "minimum": 0},
                "sigma2_max": _POS,
                "init": {"type": "array", "items": _NUM, "minItems": 2, "maxItems": 2},
            },
        },
        "study": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "R": {"type": "integer", "minimum": 2},
                "N": _COUNT,
                "limit_subjects": {"type": "integer", "minimum": 0},
                "fisher_subjects": {"type": "integer", "minimum": 0},
            },
        },
        "output": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"dir": {"type": "string"}},
        },
    },
}

_VALIDATOR = jsonschema.Draft202012Validator(SCHEMA)


def _key(path) -> str:
    return ".".join(str(p) for p in path)


def _describe(err: jsonschema.ValidationError) -> str:
    where = list(err.absolute_path)
    if err.validator == "required":
        missing = [k for k in err.validator_value if k not in err.instance]
        return "; ".join(f"missing required key {_key(where + [k])}" for k in missing)
    if err.validator == "additionalProperties":
        allowed = set(err.schema.get("properties", {}))
        extra = sorted(k for k in err.instance if k not in allowed)
        return "; ".join(f"unknown key {_key(where + [k])}" for k in extra)
    return f"{_key(where) or '<root>'}: {err.message}"


def validate(doc: dict) -> None:
    errors = sorted(_VALIDATOR.iter_errors(doc), key=lambda e: (list(map(str, e.absolute_path)), e.message))
    if errors:
        raise ConfigError("invalid configuration: " + "; ".join(_describe(e) for e in errors))


@dataclass
class RunConfig:
    grid: TimeGrid
    H: float
    drift: LinearMultiplier
    effect: EffectDistribution
    x0: float = 0.0
    seed: int = 0
    N: Optional[int] = None
    data_path: Optional[Path] = None
    tolerance: float = DEFAULT_TOLERANCE
    kernel_method: str = DEFAULT_METHOD
    estimator: str = "known_var"
    sigma2: Optional[float] = None
    sigma2_max: float = 100.0
    init: Optional[tuple] = None
    study: dict = field(default_factory=dict)
    output_dir: Optional[Path] = None
    raw: dict = field(default_factory=dict, repr=False)

    @property
    def known_sigma2(self) -> float:
        """Variance used by the known-variance estimator."""
        if self.sigma2 is not None:
            return self.sigma2
        if isinstance(self.effect, GaussianEffect):
            return self.effect.variance
        if isinstance(self.effect, DegenerateEffect):
            return 0.0
        raise ConfigError("estimator.sigma2 is required for a tabulated effect")

    def study_config(self) -> StudyConfig:
        if "R" not in self.study:
            raise ConfigError("missing required key study.R")
        N = self.study.get("N", self.N)
        if N is None:
            raise ConfigError("missing required key study.N (or data.N)")
        try:
            return StudyConfig(
                H=self.H,
                T=self.grid.T,
                n_steps=self.grid.n_steps,
                drift=self.drift,
                effect=self.effect,
                N=N,
                R=self.study["R"],
                seed=self.seed,
                estimator=self.estimator,
                sigma2_known=self.sigma2,
                x0=self.x0,
                limit_subjects=self.study.get("limit_subjects", 20000),
                fisher_subjects=self.study.get("fisher_subjects", 0),
                kernel_method=self.kernel_method,
                kernel_tolerance=self.tolerance,
                sigma2_max=self.sigma2_max,
                output_dir=self.output_dir,
            )
        except ValueError as exc:
            raise ConfigError(str(exc)) from None


def _effect(spec: dict) -> EffectDistribution:
    fam = spec["family"]
    if fam == "gaussian":
        return GaussianEffect(spec["mean"], spec["variance"])
    if fam == "degenerate":
        return DegenerateEffect(spec["value"])
    return TabulatedDensity(tuple(spec["nodes"]), tuple(spec["weights"]))


def from_dict(doc: dict) -> RunConfig:
    validate(doc)
    m = doc["model"]
    try:
        grid = TimeGrid(m["T"], m["n_steps"])
        if m["drift"] == "tabulated":
            if "drift_table" not in m:
                raise ConfigError("missing required key model.drift_table")
            drift = LinearMultiplier("tabulated", table=(m["drift_table"]["x"], m["drift_table"]["y"]))
        else:
            drift = parse_drift(m["drift"])
        effect = _effect(m["effect"])
    except ValueError as exc:
        raise ConfigError(f"model: {exc}") from None
    data = doc.get("data", {})
    solver = doc.get("solver", {})
    est = doc.get("estimator", {})
    out = doc.get("output", {})
    return RunConfig(
        grid=grid,
        H=float(m["H"]),
        drift=drift,
        effect=effect,
        x0=float(m.get("x0", 0.0)),
        seed=int(doc.get("seed", 0)),
        N=data.get("N"),
        data_path=Path(data["path"]) if "path" in data else None,
        tolerance=float(solver.get("tolerance", DEFAULT_TOLERANCE)),
        kernel_method=solver.get("method", DEFAULT_METHOD),
        estimator=est.get("method", "known_var"),
        sigma2=est.get("sigma2"),
        sigma2_max=float(est.get("sigma2_max", 100.0)),
        init=tuple(est["init"]) if "init" in est else None,
        study=dict(doc.get("study", {})),
        output_dir=Path(out["dir"]) if "dir" in out else None,
        raw=doc,
    )


def load(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: invalid TOML ({exc})") from None
    return from_dict(doc)
