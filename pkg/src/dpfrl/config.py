"""Training configuration: defaults, flat-file parsing, and echo."""
from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, fields

from .errors import ConfigError

VARIANTS = ("dpfrl", "dpfrl-mean", "dpfrl-grumerge", "dpfrl-generative", "gru")

SEED_ENV_VAR = "DPFRL_SEED"


@dataclass
class TrainConfig:
    """Every knob of a single training run, with the benchmark defaults."""

    variant: str = "dpfrl"
    seed: int = 1
    total_env_steps: int = 1_000_000
    envs: int = 16
    n_steps: int = 5
    gamma: float = 0.99
    lambda_v: float = 0.5
    lambda_h: float = 0.01
    lr: float = 1e-4
    rms_alpha: float = 0.99
    rms_eps: float = 1e-5
    clip: float = 0.5
    alpha: float = 0.9
    K: int = 30
    H: int = 128
    m: int = 3
    noise_len: int = 0
    sigma_min: float = 1e-3
    max_step: float = 1.0
    dtype: str = "float32"
    deterministic_filter: bool = False
    deterministic_env: bool = False
    checkpoint_interval: int = 2500
    dump_particles: bool = False
    reward_map: str = ""
    start_x: float = -8.5
    start_y: float = -8.5
    goal_x: float = 7.0
    goal_y: float = 7.0

    def validate(self) -> "TrainConfig":
        if self.variant not in VARIANTS:
            raise ConfigError(
                f"unknown variant {self.variant!r}; valid tags: {', '.join(VARIANTS)}"
            )
        positive = [
            "total_env_steps", "envs", "n_steps", "lr", "rms_alpha", "rms_eps",
            "clip", "K", "H", "max_step", "checkpoint_interval",
        ]
        for name in positive:
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("gamma", "lambda_v", "lambda_h", "m", "noise_len", "sigma_min"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative, got {getattr(self, name)}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must be in [0, 1], got {self.alpha}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")
        if self.variant in ("dpfrl", "dpfrl-generative") and self.m < 1:
            raise ConfigError(f"variant {self.variant} needs m >= 1, got {self.m}")
        return self

    @property
    def obs_dim(self) -> int:
        return 2 + self.noise_len


_FIELDS = {f.name: f for f in fields(TrainConfig)}


def _parse_value(name: str, raw: str):
    ftype = _FIELDS[name].type
    raw = raw.strip()
    try:
        if ftype == "bool":
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if ftype == "int":
            return int(raw)
        if ftype == "float":
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"config key {name!r}: cannot parse {raw!r} as {ftype}")


def load_config(path: str, overrides: dict | None = None) -> TrainConfig:
    """Parse a flat `key = value` file ('' for pure defaults).

    Unknown keys are hard errors. `overrides` (from CLI flags) are applied
    after the file; the DPFRL_SEED environment variable wins over both.
    """
    values: dict = {}
    if path:
        if not os.path.exists(path):
            raise ConfigError(f"config file not found: {path}")
        with open(path) as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
                key, raw = line.split("=", 1)
                key = key.strip()
                if key not in _FIELDS:
                    raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
                values[key] = _parse_value(key, raw)
    if overrides:
        for key, val in overrides.items():
            if key not in _FIELDS:
                raise ConfigError(f"unknown config key {key!r}")
            values[key] = val if not isinstance(val, str) else _parse_value(key, val)
    cfg = TrainConfig(**values)
    env_seed = os.environ.get(SEED_ENV_VAR)
    if env_seed is not None:
        try:
            cfg.seed = int(env_seed)
        except ValueError:
            raise ConfigError(f"{SEED_ENV_VAR}={env_seed!r} is not an integer")
    return cfg.validate()


def echo_config(cfg: TrainConfig, path: str) -> None:
    """Write the effective config so that loading it reproduces `cfg`."""
    lines = []
    for f in fields(TrainConfig):
        val = getattr(cfg, f.name)
        if isinstance(val, bool):
            val = "true" if val else "false"
        elif isinstance(val, float):
            val = repr(val)
        lines.append(f"{f.name} = {val}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def config_dict(cfg: TrainConfig) -> dict:
    return dataclasses.asdict(cfg)
