"""Window-based time series analysis.

Turns a raw series into the normalized training set the one-class model
learns from, and turns the latest window into a test instance normalized
against that training set.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from enum import StrEnum

import numpy as np

from rads.errors import ConfigError, DataFormatError, InsufficientDataError
from rads.timeseries import (
    RawSeries,
    WindowBin,
    entropy,
    normalize_or_zero,
    partition_windows,
    window_stats,
)

logger = logging.getLogger(__name__)

POSITIVE = "positive"
SPIKE_POINT = 1.0
# Slack for the [0, 1] check on real instances
_RANGE_TOLERANCE = 1e-12


class FeatureMode(StrEnum):
    AVERAGE_ONLY = "average_only"
    ENTROPY_ONLY = "entropy_only"
    AVG_SD = "avg_sd"

    @property
    def dimension(self) -> int:
        return 2 if self is FeatureMode.AVG_SD else 1

    @property
    def adds_spike_instances(self) -> bool:
        return self is not FeatureMode.ENTROPY_ONLY

    @property
    def flag(self) -> str:
        return _FLAG_FOR_MODE[self]

    @classmethod
    def from_flag(cls, value: str) -> FeatureMode:
        """Accept either the CLI spelling (avg, entropy, avg-sd) or the enum value."""
        normalized = value.strip().lower()
        for mode, flag in _FLAG_FOR_MODE.items():
            if normalized in (flag, mode.value):
                return mode
        raise ConfigError(f"unknown feature mode {value!r}; expected one of avg, entropy, avg-sd")


_FLAG_FOR_MODE = {
    FeatureMode.AVERAGE_ONLY: "avg",
    FeatureMode.ENTROPY_ONLY: "entropy",
    FeatureMode.AVG_SD: "avg-sd",
}


class EntropyScope(StrEnum):
    """Which raw range a window's values are normalized against before sub-binning."""

    WINDOW = "window"
    TRAINING = "training"


@dataclass(frozen=True)
class FeatureInstance:
    features: tuple[float, ...]
    label: str = POSITIVE
    artificial: bool = False
    raw: tuple[float, ...] = ()


@dataclass(frozen=True)
class FeatureBounds:
    """Training-time normalization bounds reused at test time."""

    minimum: tuple[float, ...]
    maximum: tuple[float, ...]
    raw_min: float
    raw_max: float

    def __post_init__(self) -> None:
        if len(self.minimum) != len(self.maximum):
            raise DataFormatError("feature bounds have mismatched dimensions")
        if any(lo > hi for lo, hi in zip(self.minimum, self.maximum)):
            raise DataFormatError(f"feature minimum {self.minimum} exceeds maximum {self.maximum}")

    def normalize(self, raw: np.ndarray) -> np.ndarray:
        return np.array(
            [normalize_or_zero(float(value), lo, hi) for value, lo, hi in zip(raw, self.minimum, self.maximum)]
        )

    def to_dict(self) -> dict:
        return {
            "minimum": list(self.minimum),
            "maximum": list(self.maximum),
            "raw_min": self.raw_min,
            "raw_max": self.raw_max,
        }

    @classmethod
    def from_dict(cls, data: dict) -> FeatureBounds:
        return cls(
            tuple(float(v) for v in data["minimum"]),
            tuple(float(v) for v in data["maximum"]),
            float(data["raw_min"]),
            float(data["raw_max"]),
        )


@dataclass(frozen=True, eq=False)
class TrainingMatrix:
    """Normalized positive instances for one (vm, metric, mode).

    Real instances are held as an (n, d) array; artificial spike instances are
    all-ones and only counted.
    """

    real: np.ndarray
    artificial_count: int
    bounds: FeatureBounds
    mode: FeatureMode
    entropy_scope: EntropyScope = EntropyScope.WINDOW

    def __post_init__(self) -> None:
        real = np.atleast_2d(np.asarray(self.real, dtype=float))
        if real.shape[1] != self.mode.dimension:
            raise DataFormatError(f"{self.mode} expects {self.mode.dimension} feature(s), got {real.shape[1]}")
        if np.any(real < -_RANGE_TOLERANCE) or np.any(real > 1 + _RANGE_TOLERANCE):
            raise DataFormatError("real training instances must lie in [0, 1]")
        if self.artificial_count < 0:
            raise DataFormatError("artificial_count cannot be negative")
        real.flags.writeable = False
        object.__setattr__(self, "real", real)

    @property
    def per_feature_min(self) -> tuple[float, ...]:
        return self.bounds.minimum

    @property
    def per_feature_max(self) -> tuple[float, ...]:
        return self.bounds.maximum

    @property
    def artificial(self) -> np.ndarray:
        return np.full((self.artificial_count, self.mode.dimension), SPIKE_POINT)

    @property
    def positives(self) -> np.ndarray:
        return np.vstack([self.real, self.artificial])

    @property
    def instances(self) -> list[FeatureInstance]:
        real = [FeatureInstance(tuple(float(v) for v in row)) for row in self.real]
        spikes = [FeatureInstance((SPIKE_POINT,) * self.mode.dimension, artificial=True)] * self.artificial_count
        return real + spikes


def raw_features(
    bin: WindowBin,
    mode: FeatureMode,
    *,
    entropy_scope: EntropyScope = EntropyScope.WINDOW,
    raw_range: tuple[float, float] | None = None,
) -> np.ndarray:
    """The mode's un-normalized feature vector for one window."""
    if mode is FeatureMode.ENTROPY_ONLY:
        if entropy_scope is EntropyScope.TRAINING:
            if raw_range is None:
                raise DataFormatError("training-scope entropy needs the training raw range")
            low, high = raw_range
        else:
            values = bin.array()
            low, high = float(values.min()), float(values.max())
        return np.array([entropy(bin, low, high)])
    summary = window_stats(bin)
    if mode is FeatureMode.AVERAGE_ONLY:
        return np.array([summary.avg])
    return np.array([summary.avg, summary.sd])


def build_training_set(
    series: RawSeries,
    mode: FeatureMode,
    window_len: float,
    *,
    entropy_scope: EntropyScope = EntropyScope.WINDOW,
) -> TrainingMatrix:
    """Build the normalized training set for one series.

    Each complete window becomes one instance; every feature dimension is
    min-max normalized across the windows. Average and avg/sd modes add one
    all-ones spike instance per window.

    Raises:
        InsufficientDataError: If the series holds fewer than 2 complete windows.
    """
    windows = partition_windows(series, window_len)
    if len(windows) < 2:
        raise InsufficientDataError(
            f"{series.vm_id}/{series.metric}: need at least 2 complete windows to train, got {len(windows)}"
        )
    raw_range = (float(series.values.min()), float(series.values.max()))
    raw = np.vstack(
        [raw_features(w, mode, entropy_scope=entropy_scope, raw_range=raw_range) for w in windows]
    )
    lows, highs = raw.min(axis=0), raw.max(axis=0)
    real = np.column_stack(
        [normalize_or_zero(raw[:, d], float(lows[d]), float(highs[d])) for d in range(raw.shape[1])]
    )
    bounds = FeatureBounds(
        tuple(float(v) for v in lows),
        tuple(float(v) for v in highs),
        raw_range[0],
        raw_range[1],
    )
    artificial_count = len(windows) if mode.adds_spike_instances else 0
    logger.debug(
        f"{series.vm_id}/{series.metric}: {len(windows)} windows, mode {mode}, "
        f"bounds {bounds.minimum}..{bounds.maximum}, {artificial_count} spike instances"
    )
    return TrainingMatrix(real, artificial_count, bounds, mode, entropy_scope)


def build_test_instance(
    last_window: WindowBin,
    matrix_bounds: FeatureBounds,
    mode: FeatureMode,
    *,
    entropy_scope: EntropyScope = EntropyScope.WINDOW,
) -> FeatureInstance:
    """Normalize the latest window against the training bounds.

    In avg/sd mode a window whose average and sd both exceed the training
    maxima is replaced by the spike point (1, 1). Nothing else is clamped.
    """
    raw = raw_features(
        last_window,
        mode,
        entropy_scope=entropy_scope,
        raw_range=(matrix_bounds.raw_min, matrix_bounds.raw_max),
    )
    normalized = matrix_bounds.normalize(raw)
    if mode is FeatureMode.AVG_SD and normalized[0] > 1.0 and normalized[1] > 1.0:
        logger.debug(f"window ending {last_window.window_end}: ({normalized[0]:.3f}, {normalized[1]:.3f}) -> spike point")
        normalized = np.full(2, SPIKE_POINT)
    return FeatureInstance(tuple(float(v) for v in normalized), raw=tuple(float(v) for v in raw))
