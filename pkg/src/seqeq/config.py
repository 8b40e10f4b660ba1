"""YAML run configuration: schema validation plus construction of the
environment and solver/verifier settings."""

from __future__ import annotations

from dataclasses import fields

import jsonschema
import yaml

from .environments import make_environment
from .game import ContractViolation
from .solver import SolverConfig
from .verifier import VerifierConfig

__all__ = ["RunConfig", "load_config", "CONFIG_SCHEMA"]

_SOLVER_PROPS = {f.name: {"type": "number" if f.type in ("int", "float") else "boolean"}
                 for f in fields(SolverConfig)}
_VERIFIER_PROPS = {f.name: {"type": "number" if f.type in ("int", "float") else "boolean"}
                   for f in fields(VerifierConfig)}

CONFIG_SCHEMA = {
    "type": "object",
    "required": ["environment"],
    "additionalProperties": False,
    "properties": {
        "environment": {
            "type": "object",
            "required": ["kind"],
            "additionalProperties": False,
            "properties": {
                "kind": {"enum": ["sequential_sales", "split_award"]},
                "params": {"type": "object"},
            },
        },
        "solver": {"type": "object", "additionalProperties": False,
                   "properties": _SOLVER_PROPS},
        "verifier": {"type": "object", "additionalProperties": False,
                     "properties": _VERIFIER_PROPS},
    },
}


class RunConfig:
    def __init__(self, raw: dict):
        self.raw = raw
        env_spec = raw["environment"]
        self.env = make_environment(env_spec["kind"], **env_spec.get("params", {}))
        solver_kwargs = dict(raw.get("solver", {}))
        for f in fields(SolverConfig):
            if f.name in solver_kwargs and f.type == "int":
                solver_kwargs[f.name] = int(solver_kwargs[f.name])
        self.solver = SolverConfig(**solver_kwargs)
        verifier_kwargs = dict(raw.get("verifier", {}))
        for f in fields(VerifierConfig):
            if f.name in verifier_kwargs and f.type == "int":
                verifier_kwargs[f.name] = int(verifier_kwargs[f.name])
        self.verifier = VerifierConfig(**verifier_kwargs)


def load_config(path) -> RunConfig:
    with open(path) as fh:
        raw = yaml.safe_load(fh)
    if not isinstance(raw, dict):
        raise ContractViolation("configuration file must contain a mapping")
    try:
        jsonschema.validate(raw, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        raise ContractViolation(f"invalid configuration: {exc.message}") from exc
    try:
        return RunConfig(raw)
    except TypeError as exc:
        raise ContractViolation(f"invalid configuration: {exc}") from exc
