"""Simulation configuration: JSON file plus deep-merged overrides."""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any

from .rtcontrol import RtParams, ServoParams
from .simkit import NS_PER_MS, JitterModel

DEFAULTS: dict[str, Any] = {
    "clock_mode": "virtual",
    "seed": 0,
    "dof": 7,
    "client_phase_ms": 3.0,
    "jitter": {"base_ms": 22.0, "tail_prob": 0.1, "tail_extra_ms": 5.0},
    "return_jitter": {"base_ms": 1.0, "tail_prob": 0.0, "tail_extra_ms": 0.0},
    "servo": {"omega_n": 40.0, "zeta": 1.0, "velocity_feedforward": True},
    "periods": {"control_ms": 5.0, "motor_ms": 1.0},
    "experiment": {},
}


class ConfigError(ValueError):
    pass


def merge(base: dict, override: dict, path: str = "") -> dict:
    """Deep-merge ``override`` into a copy of ``base``; unknown keys are errors.

    The free-form ``experiment`` section accepts any keys.
    """
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}.{key}" if path else key
        if key not in base and path != "experiment":
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base.get(key), dict) and key in base:
            if not isinstance(value, dict):
                raise ConfigError(f"{where!r} must be an object")
            out[key] = merge(base[key], value, where)
        else:
            out[key] = copy.deepcopy(value)
    return out


@dataclass(frozen=True)
class SimConfig:
    raw: dict

    @classmethod
    def from_dict(cls, overrides: dict | None = None) -> SimConfig:
        cfg = cls(merge(DEFAULTS, overrides or {}))
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: str | Path | None, overrides: dict | None = None) -> SimConfig:
        data: dict = {}
        if path is not None:
            try:
                data = json.loads(Path(path).read_text())
            except json.JSONDecodeError as exc:
                raise ConfigError(f"invalid JSON in {path}: {exc}") from exc
            if not isinstance(data, dict):
                raise ConfigError("config root must be an object")
        merged = merge(DEFAULTS, data)
        return cls.from_dict(merge(merged, overrides or {}))

    def with_overrides(self, overrides: dict) -> SimConfig:
        return SimConfig.from_dict(merge(self.raw, overrides))

    def validate(self) -> None:
        if self.clock_mode not in ("virtual", "wall"):
            raise ConfigError(f"clock_mode must be 'virtual' or 'wall', got {self.clock_mode!r}")
        if not isinstance(self.raw["seed"], int) or self.raw["seed"] < 0:
            raise ConfigError("seed must be a non-negative integer")
        if not isinstance(self.raw["dof"], int) or self.raw["dof"] < 1:
            raise ConfigError("dof must be a positive integer")
        try:
            self.jitter()
            self.return_jitter()
            self.rt_params()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    @property
    def clock_mode(self) -> str:
        return self.raw["clock_mode"]

    @property
    def seed(self) -> int:
        return self.raw["seed"]

    @property
    def dof(self) -> int:
        return self.raw["dof"]

    @property
    def client_phase_ns(self) -> int:
        return int(round(self.raw["client_phase_ms"] * NS_PER_MS))

    @property
    def experiment(self) -> dict:
        return self.raw["experiment"]

    def jitter(self, seed: int | None = None) -> JitterModel:
        return JitterModel(**self.raw["jitter"], seed=self.seed if seed is None else seed)

    def return_jitter(self, seed: int | None = None) -> JitterModel:
        return JitterModel(**self.raw["return_jitter"], seed=self.seed if seed is None else seed)

    def servo(self) -> ServoParams:
        return ServoParams(**self.raw["servo"])

    def rt_params(self) -> RtParams:
        periods = self.raw["periods"]
        control = int(round(periods["control_ms"] * NS_PER_MS))
        motor = int(round(periods["motor_ms"] * NS_PER_MS))
        if control <= 0 or motor <= 0:
            raise ValueError("periods must be > 0")
        return RtParams(control_period_ns=control, motor_period_ns=motor, dof=self.dof, servo=self.servo())

    def to_json(self) -> str:
        return json.dumps(self.raw, indent=2, sort_keys=True)
