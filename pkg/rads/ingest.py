"""Reading metric traces: canonical CSV, external traces, VM selection and replay."""

from __future__ import annotations

import io
import logging
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Iterator, Mapping, Sequence

import numpy as np
import pandas as pd

from rads.config import load_key_value_file
from rads.detector import SampleStream
from rads.errors import (
    DataFormatError,
    EmptyInputError,
    InsufficientDataError,
    MappingError,
    OrderingError,
)
from rads.timeseries import Metric, RawSeries, iqr_spike_flags

logger = logging.getLogger(__name__)

CANONICAL_COLUMNS = ["vm_id", "timestamp", "cpu_percent", "net_kbps"]
NUMERIC_COLUMNS = CANONICAL_COLUMNS[1:]
_TIME_UNITS = {"s": 1.0, "sec": 1.0, "seconds": 1.0, "ms": 1000.0, "milliseconds": 1000.0}


@dataclass(frozen=True)
class MetricRecord:
    vm_id: str
    timestamp: float
    cpu_percent: float
    net_kbps: float

    def value(self, metric: Metric) -> float:
        return self.cpu_percent if metric is Metric.CPU_PERCENT else self.net_kbps


def decode_text(data: bytes | str) -> str:
    """UTF-8 text of an input file, byte-order mark dropped.

    Raises:
        DataFormatError: If the bytes are not UTF-8.
        EmptyInputError: If there is nothing but whitespace.
    """
    try:
        text = data.decode("utf-8-sig") if isinstance(data, bytes) else data
    except UnicodeDecodeError as e:
        raise DataFormatError(f"input is not UTF-8: byte 0x{e.object[e.start]:02x} at offset {e.start}") from e
    if not text.strip():
        raise EmptyInputError("input is empty")
    return text


def _data_lines(mask: pd.Series) -> list[int]:
    # +2: one for the header, one for 1-based numbering
    return [int(i) + 2 for i in mask[mask].index]


def _check_order(vm_ids: pd.Series, timestamps: pd.Series) -> None:
    for vm_id, stamps in timestamps.groupby(vm_ids, sort=False):
        backwards = stamps.diff() < 0
        if backwards.any():
            line = _data_lines(backwards)[0]
            raise OrderingError(f"line {line}: timestamp for {vm_id} goes backwards ({stamps[backwards].iloc[0]})")


def parse_canonical_csv(data: bytes | str) -> list[MetricRecord]:
    """Parse ``vm_id,timestamp,cpu_percent,net_kbps`` rows.

    Raises:
        EmptyInputError: If there is nothing to parse.
        DataFormatError: On a wrong header or non-numeric/negative fields (with line numbers).
        OrderingError: If a VM's timestamps go backwards.
    """
    text = decode_text(data)
    try:
        frame = pd.read_csv(io.StringIO(text), dtype=str, keep_default_na=False, skipinitialspace=True)
    except (pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise DataFormatError(f"unreadable CSV ({type(e).__name__}): {e}") from e
    if [c.strip() for c in frame.columns] != CANONICAL_COLUMNS:
        raise DataFormatError(f"missing header: expected {','.join(CANONICAL_COLUMNS)}, got {','.join(frame.columns)}")
    if frame.empty:
        return []

    numeric = frame[NUMERIC_COLUMNS].apply(pd.to_numeric, errors="coerce")
    bad = numeric.isna().any(axis=1) | ~np.isfinite(numeric).all(axis=1) | (numeric < 0).any(axis=1)
    bad |= frame["vm_id"].fillna("").str.strip().eq("")
    if bad.any():
        lines = _data_lines(bad)
        shown = ", ".join(str(n) for n in lines[:10])
        raise DataFormatError(f"invalid fields on line(s) {shown}{' ...' if len(lines) > 10 else ''}")

    vm_ids = frame["vm_id"].str.strip()
    _check_order(vm_ids, numeric["timestamp"])
    return [
        MetricRecord(vm, float(ts), float(cpu), float(net))
        for vm, ts, cpu, net in zip(vm_ids, numeric["timestamp"], numeric["cpu_percent"], numeric["net_kbps"])
    ]


def read_canonical_csv(path: Path) -> list[MetricRecord]:
    return parse_canonical_csv(Path(path).read_bytes())


def emit_canonical_csv(records: Iterable[MetricRecord]) -> str:
    rows = [(r.vm_id, r.timestamp, r.cpu_percent, r.net_kbps) for r in records]
    frame = pd.DataFrame(rows, columns=CANONICAL_COLUMNS)
    return frame.to_csv(index=False, lineterminator="\n")


@dataclass(frozen=True)
class TraceMapping:
    """Where the metrics live in an external per-VM trace file."""

    cpu_col: str
    net_rx_col: str
    net_tx_col: str
    ts_col: str
    delimiter: str = ";"
    ts_unit: str = "seconds"

    def __post_init__(self) -> None:
        if self.ts_unit not in _TIME_UNITS:
            raise MappingError(f"unknown timestamp unit {self.ts_unit!r}; expected seconds or milliseconds")

    @classmethod
    def from_mapping(cls, values: Mapping[str, str]) -> TraceMapping:
        try:
            return cls(
                cpu_col=values["cpu_col"],
                net_rx_col=values["net_rx_col"],
                net_tx_col=values["net_tx_col"],
                ts_col=values["ts_col"],
                delimiter=values.get("delimiter", ";").replace("\\t", "\t"),
                ts_unit=values.get("ts_unit", "seconds"),
            )
        except KeyError as e:
            raise MappingError(f"trace mapping lacks {e.args[0]!r}") from e

    @classmethod
    def from_file(cls, path: Path) -> TraceMapping:
        return cls.from_mapping(load_key_value_file(path))


def parse_external_trace(data: bytes | str, mapping: TraceMapping, vm_id: str) -> list[MetricRecord]:
    """Read one VM's external trace; network traffic is received + transmitted.

    Raises:
        MappingError: If a mapped column is missing.
        DataFormatError: On non-numeric values.
    """
    text = decode_text(data)
    try:
        frame = pd.read_csv(io.StringIO(text), sep=mapping.delimiter, engine="python", dtype=str)
    except pd.errors.ParserError as e:
        raise DataFormatError(f"{vm_id}: unreadable trace ({type(e).__name__}): {e}") from e
    frame.columns = [str(c).strip() for c in frame.columns]
    wanted = [mapping.ts_col, mapping.cpu_col, mapping.net_rx_col, mapping.net_tx_col]
    missing = [c for c in wanted if c not in frame.columns]
    if missing:
        raise MappingError(f"{vm_id}: trace has no column(s) {missing}; available: {list(frame.columns)}")

    numeric = frame[wanted].apply(lambda col: pd.to_numeric(col.str.strip(), errors="coerce"))
    bad = numeric.isna().any(axis=1)
    if bad.any():
        raise DataFormatError(f"{vm_id}: non-numeric values on line(s) {_data_lines(bad)[:10]}")

    timestamps = numeric[mapping.ts_col] / _TIME_UNITS[mapping.ts_unit]
    net = numeric[mapping.net_rx_col] + numeric[mapping.net_tx_col]
    _check_order(pd.Series(vm_id, index=frame.index), timestamps)
    return [
        MetricRecord(vm_id, float(ts), float(cpu), float(kbps))
        for ts, cpu, kbps in zip(timestamps, numeric[mapping.cpu_col], net)
    ]


def infer_sample_interval(timestamps: Sequence[float]) -> float:
    """Median gap between consecutive distinct timestamps."""
    stamps = np.unique(np.asarray(timestamps, dtype=float))
    if len(stamps) < 2:
        raise InsufficientDataError("need at least 2 timestamps to infer a sample interval")
    return float(np.median(np.diff(stamps)))


def group_by_vm(records: Iterable[MetricRecord]) -> dict[str, list[MetricRecord]]:
    grouped: dict[str, list[MetricRecord]] = {}
    for record in records:
        grouped.setdefault(record.vm_id, []).append(record)
    return grouped


def to_series(records: Sequence[MetricRecord], metric: Metric, sample_interval: float | None = None) -> RawSeries:
    """One VM's records as a RawSeries of the chosen metric."""
    if not records:
        raise EmptyInputError("no records to build a series from")
    vm_ids = {r.vm_id for r in records}
    if len(vm_ids) > 1:
        raise DataFormatError(f"records span several VMs: {sorted(vm_ids)}")
    timestamps = [r.timestamp for r in records]
    interval = sample_interval or infer_sample_interval(timestamps)
    return RawSeries(records[0].vm_id, metric, np.asarray(timestamps), np.asarray([r.value(metric) for r in records]), interval)


@dataclass(frozen=True)
class SelectionThresholds:
    cpu_percent: float = 10.0
    net_kbps: float = 100.0


@dataclass(frozen=True)
class VmSelection:
    cpu: tuple[str, ...]
    net: tuple[str, ...]
    cpu_spike_share: float
    net_spike_share: float


def has_spike(series: RawSeries) -> bool:
    try:
        return bool(iqr_spike_flags(series.values))
    except InsufficientDataError:
        return False


def select_vms(
    traces: Mapping[str, Mapping[Metric, RawSeries]],
    thresholds: SelectionThresholds = SelectionThresholds(),
) -> VmSelection:
    """Keep VMs that are busy enough and show at least one IQR spike, per metric.

    Also reports, per metric, the share of VMs with any spike at all.
    """
    selected: dict[Metric, list[str]] = {Metric.CPU_PERCENT: [], Metric.NET_KBPS: []}
    spiky: dict[Metric, int] = {Metric.CPU_PERCENT: 0, Metric.NET_KBPS: 0}
    seen: dict[Metric, int] = {Metric.CPU_PERCENT: 0, Metric.NET_KBPS: 0}
    limits = {Metric.CPU_PERCENT: thresholds.cpu_percent, Metric.NET_KBPS: thresholds.net_kbps}

    for vm_id, by_metric in traces.items():
        for metric, series in by_metric.items():
            if len(series) == 0:
                continue
            seen[metric] += 1
            spikes = has_spike(series)
            spiky[metric] += spikes
            if spikes and float(np.mean(series.values)) > limits[metric]:
                selected[metric].append(vm_id)

    def share(metric: Metric) -> float:
        return spiky[metric] / seen[metric] if seen[metric] else 0.0

    selection = VmSelection(
        cpu=tuple(selected[Metric.CPU_PERCENT]),
        net=tuple(selected[Metric.NET_KBPS]),
        cpu_spike_share=share(Metric.CPU_PERCENT),
        net_spike_share=share(Metric.NET_KBPS),
    )
    logger.info(
        f"selected {len(selection.cpu)} VM(s) for CPU and {len(selection.net)} for network; "
        f"spike share cpu {selection.cpu_spike_share:.0%}, net {selection.net_spike_share:.0%}"
    )
    return selection


@dataclass(frozen=True)
class ReplaySplit:
    """Training and test spans in seconds from the first record."""

    train_seconds: float
    test_seconds: float


@dataclass(frozen=True)
class Replay:
    training: RawSeries
    test: SampleStream


def paced(
    pairs: list[tuple[float, float]], speed: float | None, sleep: Callable[[float], object]
) -> Iterator[tuple[float, float]]:
    """Yield samples, sleeping so they arrive at `speed` times real time."""
    previous: float | None = None
    for timestamp, value in pairs:
        if speed is not None and previous is not None:
            sleep((timestamp - previous) / speed)
        previous = timestamp
        yield timestamp, value


def replay(
    records: Sequence[MetricRecord],
    split: ReplaySplit,
    *,
    metric: Metric,
    speed: float | None = None,
    sleep: Callable[[float], object] = time.sleep,
) -> Replay:
    """Split one VM's records into a training series and a paced test stream.

    speed is a multiple of real time; None replays as fast as possible.

    Raises:
        EmptyInputError: If either span holds no samples.
    """
    series = to_series(records, metric)
    start = float(series.timestamps[0])
    boundary = start + split.train_seconds
    training = series.slice_time(start, boundary)
    test = series.slice_time(boundary, boundary + split.test_seconds)
    if len(training) == 0 or len(test) == 0:
        raise EmptyInputError(
            f"{series.vm_id}: split {split.train_seconds}s/{split.test_seconds}s leaves "
            f"{len(training)} training and {len(test)} test samples"
        )
    pairs = list(zip(test.timestamps.tolist(), test.values.tolist()))
    stream = SampleStream(series.vm_id, metric, series.sample_interval, paced(pairs, speed, sleep))
    logger.info(f"{series.vm_id}/{metric}: replaying {len(training)} training + {len(test)} test samples")
    return Replay(training, stream)
