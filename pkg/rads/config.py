"""Run configuration and the key=value file format used for config and trace mappings."""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field, fields, replace
from enum import StrEnum
from pathlib import Path
from typing import Any

from rads.errors import ConfigError
from rads.occ import REFERENCE_SPREAD
from rads.timeseries import Metric
from rads.wtsa import EntropyScope, FeatureMode

logger = logging.getLogger(__name__)

STORE_ENV_VAR = "RADS_STORE"
SAMPLES_PER_WINDOW = 12


class MetricSelection(StrEnum):
    CPU = "cpu"
    NET = "net"
    BOTH = "both"

    @property
    def metrics(self) -> tuple[Metric, ...]:
        if self is MetricSelection.CPU:
            return (Metric.CPU_PERCENT,)
        if self is MetricSelection.NET:
            return (Metric.NET_KBPS,)
        return (Metric.CPU_PERCENT, Metric.NET_KBPS)


@dataclass(frozen=True)
class RunConfig:
    """Settings shared by training, online detection and evaluation.

    window_len of None means 12 samples at whatever cadence the input has,
    i.e. 60 s at the 5 s lab cadence and one hour on 5-minute traces. The
    detection period always equals the window length; the optimiser runs
    every optimiser_windows detection periods.
    """

    window_len: float | None = None
    optimiser_windows: int = 5
    warmup_windows: int = 5
    spt_minutes: float = 30.0
    mode: FeatureMode = FeatureMode.AVG_SD
    seed: int = 0
    store: Path | None = None
    metric: MetricSelection = MetricSelection.BOTH
    parallelism: int = field(default_factory=lambda: os.cpu_count() or 1)
    speed: float | None = None
    reference_spread: float = REFERENCE_SPREAD
    entropy_scope: EntropyScope = EntropyScope.WINDOW

    def __post_init__(self) -> None:
        if self.window_len is not None and self.window_len <= 0:
            raise ConfigError(f"window length must be positive, got {self.window_len}")
        if self.optimiser_windows < 1:
            raise ConfigError("the optimiser period must be a positive multiple of the detection period")
        if self.warmup_windows < 0:
            raise ConfigError("warm-up cannot be negative")
        if self.spt_minutes <= 0:
            raise ConfigError(f"stability period threshold must be positive, got {self.spt_minutes}")
        if self.parallelism < 1:
            raise ConfigError(f"parallelism must be at least 1, got {self.parallelism}")
        if self.speed is not None and self.speed <= 0:
            raise ConfigError(f"replay speed must be positive, got {self.speed}")
        if self.reference_spread < 1.0:
            raise ConfigError(f"reference spread must be at least 1, got {self.reference_spread}")

    def resolve_window_len(self, sample_interval: float) -> float:
        return self.window_len if self.window_len is not None else SAMPLES_PER_WINDOW * sample_interval

    def with_overrides(self, **overrides: Any) -> RunConfig:
        """Copy with every non-None override applied."""
        return replace(self, **{k: v for k, v in overrides.items() if v is not None})

    def with_environment(self) -> RunConfig:
        store = os.environ.get(STORE_ENV_VAR)
        if store:
            logger.debug(f"{STORE_ENV_VAR} overrides the model store with {store}")
            return replace(self, store=Path(store))
        return self


def load_key_value_file(path: Path) -> dict[str, str]:
    """Parse a key=value file: blank lines and '#' comments skipped, values unquoted.

    Raises:
        ConfigError: If the file cannot be read.
    """
    config: dict[str, str] = {}
    try:
        with open(path, "r", encoding="utf-8") as f:
            for line in f:
                line = line.strip()
                if line and "=" in line and not line.startswith("#"):
                    key, value = line.split("=", 1)
                    config[key.strip()] = value.strip().strip("\"'")
    except OSError as e:
        raise ConfigError(f"cannot read {path} ({type(e).__name__}): {e}") from e
    return config


_CONVERTERS = {
    "window_len": float,
    "optimiser_windows": int,
    "warmup_windows": int,
    "spt_minutes": float,
    "mode": FeatureMode.from_flag,
    "seed": int,
    "store": Path,
    "metric": MetricSelection,
    "parallelism": int,
    "speed": float,
    "reference_spread": float,
    "entropy_scope": EntropyScope,
}


def config_from_mapping(values: dict[str, str], base: RunConfig | None = None) -> RunConfig:
    """Apply string settings (from a key=value file) on top of base."""
    known = {f.name for f in fields(RunConfig)}
    overrides: dict[str, Any] = {}
    for key, raw in values.items():
        name = key.lower().replace("-", "_")
        if name not in known:
            raise ConfigError(f"unknown setting {key!r}")
        try:
            overrides[name] = _CONVERTERS[name](raw)
        except ValueError as e:
            raise ConfigError(f"bad value for {key}: {raw!r} ({e})") from e
    return replace(base or RunConfig(), **overrides)
