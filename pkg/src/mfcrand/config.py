"""Experiment configuration: JSON files checked against a bundled schema."""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from .controls import LambdaFamily, default_lambda_family, random_lambda_family
from .instances import Instance, build_instance, micro_instances
from .randomisation import (IntensityControl, constant_intensity, count_intensity,
                            mark_parity_intensity, node_intensity, per_step_intensity)

DEFAULTS = {
    "random_instances": {"count": 0, "seed": 2024},
    "lambda": {"family": "default", "mass": 1.0, "alt_seed": 7},
    "solver": {"levels": [2.0**j for j in range(9)], "alpha": 0},
    "mc": {"N": 200, "replications": 200, "budget": 4, "nu": [{"name": "constant", "c": 1.0}]},
    "girsanov": {"paths": 100000, "mass": 0.04, "nu": [{"name": "constant", "c": 1.0}]},
    "approx": {"deltas": [0.2, 0.1], "controls": 10, "replications": 10000, "eps": 0.1,
               "nbar": 1e6},
    "example": {"M": 200, "conventions": ["min", "max"], "threshold": 0.1},
    "tolerances": {"equivalence": 1e-8, "monotone": 1e-12, "bellman": 1e-6, "dpp": 1e-6,
                   "exact_weight": 1e-10, "sigmas": 3.0},
}


class ConfigError(ValueError):
    """Schema or semantic problem in a configuration, with the offending key path."""

    def __init__(self, path: str, message: str) -> None:
        super().__init__(f"{path}: {message}")
        self.path = path
        self.message = message


def schema() -> dict:
    return json.loads(resources.files("mfcrand").joinpath("data/config.schema.json").read_text())


def bundled_config_path() -> Path:
    return Path(str(resources.files("mfcrand").joinpath("data/micro.json")))


def _key_path(err: jsonschema.ValidationError) -> str:
    parts = [str(p) for p in err.absolute_path]
    if err.validator == "required":
        present = set(err.instance) if isinstance(err.instance, dict) else set()
        missing = [k for k in err.validator_value if k not in present]
        parts.append(missing[0] if missing else "?")
    elif err.validator == "additionalProperties" and isinstance(err.instance, dict):
        allowed = set(err.schema.get("properties", {}))
        extra = sorted(k for k in err.instance if k not in allowed)
        if extra:
            parts.append(extra[0])
    return ".".join(parts) if parts else "<root>"


def validate(data: dict) -> None:
    validator = jsonschema.Draft7Validator(schema())
    errors = sorted(validator.iter_errors(data), key=lambda e: (list(e.absolute_path), e.message))
    if errors:
        err = errors[0]
        raise ConfigError(_key_path(err), err.message)


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


@dataclass
class ExperimentConfig:
    """Validated configuration with defaults filled in."""

    raw: dict
    data: dict

    @property
    def seed(self) -> int:
        return int(self.data["seed"])

    @property
    def tol(self) -> dict:
        return self.data["tolerances"]

    def section(self, name: str) -> dict:
        return self.data[name]

    def instance(self) -> Instance:
        spec = self.data["instance"]
        try:
            return build_instance(spec.get("name", "instance"), spec["steps"], spec["horizon"],
                                  spec["actions"], spec["coefficients"], spec["reward"], spec["xi"],
                                  spec.get("g_probs"))
        except KeyError as exc:
            raise ConfigError("instance.coefficients.family / instance.reward.family",
                              f"unknown family {exc}") from exc
        except (TypeError, ValueError) as exc:
            raise ConfigError("instance", str(exc)) from exc

    def instances(self) -> list[Instance]:
        extra = self.data["random_instances"]
        return [self.instance()] + micro_instances(extra["count"], extra["seed"])

    def lambda_families(self, inst: Instance) -> tuple[LambdaFamily, LambdaFamily]:
        """The configured family and a second, different one for independence checks."""
        spec = self.data["lambda"]
        k = inst.actions.size
        alt = random_lambda_family(inst.tree, k, np.random.default_rng(spec["alt_seed"]), spec["mass"])
        if spec["family"] == "random":
            main = random_lambda_family(inst.tree, k, np.random.default_rng(self.seed), spec["mass"])
        else:
            main = default_lambda_family(inst.tree, k, spec["mass"])
        return main, alt

    def intensities(self, section: str, nb: int = 2) -> list[IntensityControl]:
        return [make_intensity(spec, f"{section}.nu.{i}", nb)
                for i, spec in enumerate(self.data[section]["nu"])]


def make_intensity(spec: dict, path: str = "nu", nb: int = 2) -> IntensityControl:
    name = spec["name"]
    try:
        if name == "constant":
            return constant_intensity(spec["c"])
        if name == "per_step":
            return per_step_intensity(spec["values"])
        if name == "mark_parity":
            return mark_parity_intensity(spec["even"], spec["odd"])
        if name == "count_parity":
            return count_intensity(spec["even"], spec["odd"])
        if name == "node":
            return node_intensity(spec["values"], nb)
    except KeyError as exc:
        raise ConfigError(f"{path}.{exc.args[0]}", "is a required property") from exc
    raise ConfigError(f"{path}.name", f"unknown intensity family {name!r}")


def load_config(path: str | Path, seed: int | None = None) -> ExperimentConfig:
    """Read, validate and complete a configuration file."""
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigError("<file>", f"cannot read {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError("<file>", f"invalid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("<root>", "configuration must be an object")
    validate(raw)
    data = _merge(DEFAULTS, raw)
    if seed is not None:
        data["seed"] = int(seed)
    if len(data["instance"]["xi"]) != len(data["instance"].get("g_probs") or data["instance"]["xi"]):
        raise ConfigError("instance.g_probs", "needs one probability per initial atom")
    return ExperimentConfig(raw, data)
