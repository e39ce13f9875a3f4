"""Experiment configuration as a flat ``key = value`` text file.

Blank lines and ``#`` comments are ignored. Tuples are comma separated.
Unknown keys are rejected by name.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class StrategySpec:
    association: str  # "game" | "random" | "nearest"
    share_extractor: bool
    bandwidth: str  # "optimal" | "equal"


STRATEGIES = {
    "proposed": StrategySpec("game", True, "optimal"),
    "s1": StrategySpec("random", True, "optimal"),
    "s2": StrategySpec("nearest", True, "optimal"),
    "s3": StrategySpec("random", False, "optimal"),
    "random-equal": StrategySpec("random", True, "equal"),
    "random-opt": StrategySpec("random", True, "optimal"),
    "nearest-equal": StrategySpec("nearest", True, "equal"),
    "nearest-opt": StrategySpec("nearest", True, "optimal"),
}


@dataclass(frozen=True)
class ExperimentConfig:
    # system size and training
    n_uavs: int = 10
    n_tasks: int = 2
    rounds: int = 60
    local_steps: int = 5
    batch_size: int = 500
    eta: float = 0.01
    lam: float = 1.0
    varpi: float = 0.8
    kappa: float = 0.8
    delta: tuple = (1,)
    shapley_every: int = 1
    # radio and geometry
    bandwidth_hz: float = 2e6
    n0_dbm_hz: float = -174.0
    altitude: float = 100.0
    radius: float = 500.0
    p_max: float = 0.1
    e_max: float = 1.0
    los_a: float = 9.61
    los_b: float = 0.16
    eta_los_db: float = 1.0
    eta_nlos_db: float = 20.0
    carrier_hz: float = 2e9
    bits_per_param: int = 32
    # computation
    f_min_hz: float = 1e9
    f_max_hz: float = 2e9
    c_min: float = 1e3
    c_max: float = 2e4
    energy_coeff: float = 1e-28
    # model and data
    arch: str = "conv"
    data: str = "synthetic"
    idx_images: str = ""
    idx_labels: str = ""
    n_samples: int = 10000
    alpha1: float = 1.0
    alpha2: float = 1.0
    val_per_ev: int = 500
    strict_data: bool = False
    # run control
    strategy: str = "proposed"
    timing_only: bool = False
    checkpoint_every: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"strategy: unknown value {self.strategy!r}")
        if self.arch not in ("small", "conv"):
            raise ConfigError(f"arch: unknown value {self.arch!r}")
        if self.data not in ("synthetic", "idx"):
            raise ConfigError(f"data: unknown value {self.data!r}")
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError("lam: must lie in [0, 1]")
        if self.n_uavs < 1 or self.n_tasks < 1:
            raise ConfigError("n_uavs, n_tasks: must be positive")
        if self.eta <= 0:
            raise ConfigError("eta: must be positive")
        if len(self.delta) not in (1, self.n_tasks):
            raise ConfigError("delta: give one value or one per task")
        if sum(self.deltas) > self.n_uavs:
            raise ConfigError("delta: minimum cluster sizes exceed the number of UAVs")

    @property
    def deltas(self) -> tuple:
        return tuple(self.delta) * self.n_tasks if len(self.delta) == 1 else tuple(self.delta)

    @property
    def strategy_spec(self) -> StrategySpec:
        return STRATEGIES[self.strategy]

    def replace(self, **kw) -> "ExperimentConfig":
        return dataclasses.replace(self, **kw)


TIGHT_ENERGY = {"e_max": 0.03}

_FIELDS = {f.name: f for f in fields(ExperimentConfig)}


def _parse_value(name: str, text: str):
    default = _FIELDS[name].default
    text = text.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            return tuple(int(v) for v in text.split(",") if v.strip())
        return text
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {text!r}") from None


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


def apply_overrides(config: ExperimentConfig, pairs: dict) -> ExperimentConfig:
    values = {}
    for key, text in pairs.items():
        name = key.strip().replace("-", "_")
        if name not in _FIELDS:
            raise ConfigError(f"{key}: unknown configuration key")
        values[name] = _parse_value(name, text) if isinstance(text, str) else text
    return config.replace(**values)


def parse_config(text: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    pairs = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = line.split("=", 1)
        pairs[key.strip()] = value
    return apply_overrides(base or ExperimentConfig(), pairs)


def serialize_config(config: ExperimentConfig) -> str:
    return "".join(f"{f.name} = {_format_value(getattr(config, f.name))}\n" for f in fields(config))


def load_config(path) -> ExperimentConfig:
    return parse_config(Path(path).read_text())
