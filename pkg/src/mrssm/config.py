"""Flat run configuration with dotted keys.

A run is described by one JSON object such as ``{"train.beta": 1.0,
"sim.gain": 10}``. Keys not listed in :data:`DEFAULTS` are rejected, values
are coerced to the type of the default, and ``--set key=value`` overrides
are applied on top. The resolved mapping is written next to every output.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import fields
from pathlib import Path
from typing import Any, Iterable, Mapping

from .evaluation import EvalConfig
from .model import ModelConfig
from .simulator import DEFAULT_WEIGHTS, SimConfig, default_modalities
from .training import TrainingConfig


class ConfigError(ValueError):
    pass


def _section(prefix: str, cls, skip=()) -> dict[str, Any]:
    inst = cls()
    return {f"{prefix}.{f.name}": getattr(inst, f.name) for f in fields(cls) if f.name not in skip}


DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "data.n_train": 200,
    "data.n_val": 20,
    "data.length": 200,
    **_section("sim", SimConfig),
    "model.deter_dim": 64,
    "model.stoch_dim": 16,
    "model.embed_dim": 64,
    "model.hidden_dim": 64,
    "model.image_channels": (8, 16, 32),
    **{f"model.{name}_weight": w for name, w in DEFAULT_WEIGHTS.items()},
    **_section("train", TrainingConfig, skip=("seed",)),
    **_section("eval", EvalConfig, skip=("subsets",)),
    "eval.subsets": (("lin_vel", "ang_vel", "accel", "image"), ("lin_vel", "ang_vel", "accel"), ("image",), ()),
}


def _coerce(key: str, value, default):
    try:
        if isinstance(default, bool):
            if isinstance(value, str):
                if value.lower() not in ("true", "false", "1", "0"):
                    raise ValueError(value)
                return value.lower() in ("true", "1")
            return bool(value)
        if isinstance(default, int):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            return int(value)
        if isinstance(default, float):
            return float(value)
        if isinstance(default, str):
            return str(value)
        if isinstance(default, tuple):
            if isinstance(value, str):
                value = json.loads(value)
            if not isinstance(value, (list, tuple)):
                raise ValueError(value)
            return _to_tuple(value)
    except (TypeError, ValueError, json.JSONDecodeError) as e:
        raise ConfigError(f"{key}: cannot use {value!r} ({e})") from None
    return value


def _to_tuple(v):
    return tuple(_to_tuple(x) for x in v) if isinstance(v, (list, tuple)) else v


class RunConfig:
    """Validated flat mapping from dotted key to value."""

    def __init__(self, values: Mapping[str, Any] | None = None):
        self.values = dict(DEFAULTS)
        if values:
            self.update(values)

    def update(self, values: Mapping[str, Any]) -> "RunConfig":
        unknown = sorted(set(values) - set(DEFAULTS))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        for k, v in values.items():
            self.values[k] = _coerce(k, v, DEFAULTS[k])
        # build every section once so invalid combinations fail early
        self.sim_config()
        self.training_config()
        self.eval_config()
        self.model_config()
        return self

    def __getitem__(self, key):
        return self.values[key]

    @classmethod
    def load(cls, path=None, overrides: Iterable[str] = ()) -> "RunConfig":
        values: dict[str, Any] = {}
        if path is not None:
            try:
                values = json.loads(Path(path).read_text())
            except json.JSONDecodeError as e:
                raise ConfigError(f"{path}: invalid JSON ({e})") from None
            if not isinstance(values, dict):
                raise ConfigError(f"{path}: expected a JSON object of dotted keys")
        for item in overrides:
            key, sep, raw = item.partition("=")
            if not sep:
                raise ConfigError(f"--set expects key=value, got {item!r}")
            key = key.strip()
            try:
                values[key] = json.loads(raw)
            except json.JSONDecodeError:
                values[key] = raw
        try:
            return cls(values)
        except ConfigError:
            raise
        except (TypeError, ValueError) as e:
            raise ConfigError(str(e)) from None

    def to_dict(self) -> dict[str, Any]:
        return {k: self.values[k] for k in sorted(self.values)}

    def write(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    def digest(self, keys: Iterable[str] | None = None) -> str:
        d = self.to_dict() if keys is None else {k: self.values[k] for k in sorted(keys)}
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    def _pick(self, prefix: str) -> dict[str, Any]:
        n = len(prefix) + 1
        return {k[n:]: v for k, v in self.values.items() if k.startswith(prefix + ".")}

    def sim_config(self) -> SimConfig:
        return SimConfig(**self._pick("sim"))

    def training_config(self, elbo: str | None = None) -> TrainingConfig:
        d = self._pick("train")
        if elbo is not None:
            d["elbo_variant"] = elbo
        return TrainingConfig(seed=self.values["seed"], **d)

    def eval_config(self) -> EvalConfig:
        d = self._pick("eval")
        d["subsets"] = tuple(tuple(s) for s in d["subsets"])
        return EvalConfig(**d)

    def model_config(self) -> ModelConfig:
        d = self._pick("model")
        weights = {name: d.pop(f"{name}_weight") for name in DEFAULT_WEIGHTS}
        mods = default_modalities(self.values["sim.image_size"], weights)
        return ModelConfig(mods, **d)

    def data_keys(self) -> list[str]:
        return [k for k in self.values if k == "seed" or k.startswith(("sim.", "data."))]

    def train_keys(self) -> list[str]:
        return self.data_keys() + [k for k in self.values if k.startswith(("model.", "train."))]
