"""Run configuration: flat ``key = value`` files with typed, validated keys."""

from __future__ import annotations

import dataclasses
import re
from dataclasses import dataclass, fields

import numpy as np


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # data
    data_format: str = "idx"
    images: str = ""
    labels: str = ""
    pgm_dir: str = ""
    resize: int = 0
    limit: int = 0
    train_count: int = 0
    test_count: int = 0
    project_split: str = "test"
    # architecture
    filters: str = "10x5,8x5,5x5"
    embedding_dim: int = 100
    rows: int = 20
    cols: int = 30
    # schedules and loss weights
    sigma0: float = 10.0
    alpha: float = 2000.0
    eta0: float = 0.3
    gamma: float = 0.5
    beta: float = 1e-6
    squared_reg: bool = True
    # iteration counts (mini-batch steps; map steps are single presentations)
    ae_iterations: int = 500
    finetune_iterations: int = 500
    som_iterations: int = 10000
    joint_iterations: int = 500
    batch_size: int = 256
    ae_lr: float = 0.3
    joint_lr: float = 0.001
    seed: int = 0
    out: str = "runs/dnm"

    def validate(self) -> "RunConfig":
        positive = ("embedding_dim", "rows", "cols", "sigma0", "alpha", "eta0", "batch_size")
        for name in positive:
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        non_negative = ("resize", "limit", "train_count", "test_count", "gamma", "beta", "ae_iterations",
                        "finetune_iterations", "som_iterations", "joint_iterations", "ae_lr", "joint_lr")
        for name in non_negative:
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative, got {getattr(self, name)}")
        if self.data_format not in ("idx", "pgm"):
            raise ConfigError(f"data_format must be 'idx' or 'pgm', got {self.data_format!r}")
        if self.project_split not in ("train", "test", "all"):
            raise ConfigError(f"project_split must be train, test or all, got {self.project_split!r}")
        return self

    def echo(self) -> str:
        return "".join(f"{f.name} = {_format(getattr(self, f.name))}\n" for f in fields(self))

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes).validate()


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        if value.is_integer() and abs(value) < 1e15:
            return str(int(value))
        # shortest round-trip form with a bare exponent: 1e-06 -> 1e-6
        return re.sub(r"e([+-])0*(\d)", r"e\1\2", repr(value)).replace("e+", "e")
    return str(value)


FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def coerce(key: str, raw: str):
    """Convert a raw string to the declared type of ``key``."""
    if key not in FIELD_TYPES:
        raise ConfigError(f"unknown config key {key!r}")
    kind = FIELD_TYPES[key]
    raw = raw.strip()
    try:
        if kind == "bool":
            low = raw.lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(f"bad value for {key} ({kind}): {raw!r}") from None
    return raw


def parse_config(text: str, source: str = "<config>") -> dict:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        try:
            values[key] = coerce(key, raw)
        except ConfigError as exc:
            raise ConfigError(f"{source}:{lineno}: {exc}") from None
    return values


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Defaults, then the file at ``path``, then ``overrides`` (already typed)."""
    values = {}
    if path:
        with open(path) as f:
            values.update(parse_config(f.read(), str(path)))
    for key, value in (overrides or {}).items():
        if key not in FIELD_TYPES:
            raise ConfigError(f"unknown config key {key!r}")
        values[key] = value
    return RunConfig(**values).validate()


# Phase offsets mixed into the global seed so every phase owns a stream.
PHASES = {"split": 1, "init": 2, "layerwise": 3, "finetune": 4, "som_init": 5, "som": 6, "joint": 7}


def phase_rng(seed: int, phase: str) -> np.random.Generator:
    return np.random.default_rng([seed, PHASES[phase]])


def phase_seed(seed: int, phase: str) -> int:
    return int(np.random.SeedSequence([seed, PHASES[phase]]).generate_state(1)[0])
