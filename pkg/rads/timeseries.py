"""Statistics over raw metric series.

Everything here is a pure function over immutable inputs: windowing, window
statistics, min-max normalization, windowed entropy and IQR spike flags.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import StrEnum
from typing import Sequence

import numpy as np
from scipy import stats

from rads.errors import (
    DataFormatError,
    DegenerateRangeError,
    EmptyInputError,
    InsufficientDataError,
)

logger = logging.getLogger(__name__)

ENTROPY_SUB_BINS = 10
IQR_FENCE = 1.5


class Metric(StrEnum):
    CPU_PERCENT = "cpu_percent"
    NET_KBPS = "net_kbps"


@dataclass(frozen=True, eq=False)
class RawSeries:
    """Ordered samples of one metric for one VM.

    Args:
        vm_id: VM identifier as it appears in the input.
        metric: Which metric the values measure.
        timestamps: Seconds since epoch, strictly increasing.
        values: Non-negative readings in metric units.
        sample_interval: Nominal cadence in seconds.
    """

    vm_id: str
    metric: Metric
    timestamps: np.ndarray
    values: np.ndarray
    sample_interval: float

    def __post_init__(self) -> None:
        timestamps = np.asarray(self.timestamps, dtype=float)
        values = np.asarray(self.values, dtype=float)
        if timestamps.shape != values.shape or timestamps.ndim != 1:
            raise DataFormatError(
                f"{self.vm_id}/{self.metric}: timestamps {timestamps.shape} and values {values.shape} do not line up"
            )
        if self.sample_interval <= 0:
            raise DataFormatError(f"{self.vm_id}/{self.metric}: sample_interval must be positive, got {self.sample_interval}")
        if np.any(np.diff(timestamps) <= 0):
            bad = int(np.flatnonzero(np.diff(timestamps) <= 0)[0]) + 1
            raise DataFormatError(
                f"{self.vm_id}/{self.metric}: timestamps not strictly increasing at sample {bad} (t={timestamps[bad]})"
            )
        if not np.all(np.isfinite(values)) or np.any(values < 0):
            raise DataFormatError(f"{self.vm_id}/{self.metric}: values must be finite and non-negative")
        timestamps.flags.writeable = False
        values.flags.writeable = False
        object.__setattr__(self, "timestamps", timestamps)
        object.__setattr__(self, "values", values)

    def __len__(self) -> int:
        return len(self.values)

    def slice_time(self, start: float | None = None, end: float | None = None) -> RawSeries:
        """Samples with start <= t < end as a new series."""
        mask = np.ones(len(self), dtype=bool)
        if start is not None:
            mask &= self.timestamps >= start
        if end is not None:
            mask &= self.timestamps < end
        return RawSeries(self.vm_id, self.metric, self.timestamps[mask], self.values[mask], self.sample_interval)


@dataclass(frozen=True)
class WindowBin:
    window_start: float
    window_end: float
    values: tuple[float, ...] = field(repr=False)

    def __post_init__(self) -> None:
        if not self.values:
            raise EmptyInputError(f"window [{self.window_start}, {self.window_end}) has no samples")

    def array(self) -> np.ndarray:
        return np.asarray(self.values, dtype=float)


@dataclass(frozen=True)
class WindowStats:
    avg: float
    sd: float


def samples_per_window(window_len: float, sample_interval: float) -> int:
    """Number of samples a complete window holds.

    Raises:
        DataFormatError: If window_len is not a whole multiple of the cadence.
    """
    ratio = window_len / sample_interval
    count = int(round(ratio))
    if count < 1 or abs(ratio - count) > 1e-9:
        raise DataFormatError(
            f"window length {window_len}s is not a multiple of the sample interval {sample_interval}s"
        )
    return count


def partition_windows(series: RawSeries, window_len: float) -> list[WindowBin]:
    """Split a series into contiguous windows aligned to its first sample.

    Windows that do not hold exactly window_len / sample_interval samples are
    dropped; on a regular series that is only the trailing remainder.

    Raises:
        EmptyInputError: If the series has no samples.
        DataFormatError: If window_len is not a multiple of the cadence.
    """
    if len(series) == 0:
        raise EmptyInputError(f"{series.vm_id}/{series.metric}: cannot window an empty series")
    expected = samples_per_window(window_len, series.sample_interval)

    origin = float(series.timestamps[0])
    slots = np.floor((series.timestamps - origin) / window_len + 1e-9).astype(int)
    bins: list[WindowBin] = []
    dropped = 0
    for slot in np.unique(slots):
        members = series.values[slots == slot]
        if len(members) != expected:
            dropped += 1
            continue
        start = origin + slot * window_len
        bins.append(WindowBin(start, start + window_len, tuple(float(v) for v in members)))
    if dropped:
        logger.debug(f"{series.vm_id}/{series.metric}: dropped {dropped} incomplete window(s)")
    return bins


def window_stats(bin: WindowBin) -> WindowStats:
    """Mean and sample standard deviation (n-1 divisor) of a window."""
    values = bin.array()
    if len(values) == 1:
        return WindowStats(float(values[0]), 0.0)
    return WindowStats(float(np.mean(values)), float(np.std(values, ddof=1)))


def min_max_normalize(x, x_min: float, x_max: float):
    """Scale x by (x - x_min) / (x_max - x_min) without clamping.

    Accepts a scalar or an array. Values outside the range map outside [0, 1].

    Raises:
        DegenerateRangeError: If x_max == x_min. Callers map the value to 0.0.
        DataFormatError: If x_max < x_min.
    """
    if x_max < x_min:
        raise DataFormatError(f"normalization range is inverted: min {x_min} > max {x_max}")
    if x_max == x_min:
        raise DegenerateRangeError(f"normalization range collapses at {x_min}")
    if np.ndim(x):
        return (np.asarray(x, dtype=float) - x_min) / (x_max - x_min)
    return (float(x) - x_min) / (x_max - x_min)


def normalize_or_zero(x, x_min: float, x_max: float):
    """min_max_normalize with the degenerate range mapped to 0.0."""
    try:
        return min_max_normalize(x, x_min, x_max)
    except DegenerateRangeError:
        return np.zeros_like(np.asarray(x, dtype=float)) if np.ndim(x) else 0.0


def entropy(bin: WindowBin, x_min: float, x_max: float) -> float:
    """Shannon entropy in nats of a window's values over 10 equal sub-bins.

    Values are normalized against [x_min, x_max], clamped into [0, 1] and
    counted into the sub-bins [0.0, 0.1), ..., [0.9, 1.0]. A degenerate range
    puts every value into the first sub-bin, so the result is 0.
    """
    values = bin.array()
    positions = np.clip(normalize_or_zero(values, x_min, x_max), 0.0, 1.0)
    slots = np.minimum((positions * ENTROPY_SUB_BINS).astype(int), ENTROPY_SUB_BINS - 1)
    counts = np.bincount(slots, minlength=ENTROPY_SUB_BINS)
    return float(stats.entropy(counts))


def iqr_spike_flags(values: Sequence[float]) -> list[int]:
    """Indices of values strictly above the upper Tukey fence Q3 + 1.5 * IQR.

    Quartiles use linear interpolation between order statistics.

    Raises:
        InsufficientDataError: With fewer than 4 values.
    """
    data = np.asarray(values, dtype=float)
    if len(data) < 4:
        raise InsufficientDataError(f"IQR spike detection needs at least 4 values, got {len(data)}")
    q1, q3 = np.percentile(data, [25, 75])
    fence = q3 + IQR_FENCE * (q3 - q1)
    return [int(i) for i in np.flatnonzero(data > fence)]
