"""Scoring harness: align verdicts with ground truth and compare feature modes."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import pandas as pd

from rads.config import RunConfig
from rads.detector import DetectionResult, Verdict
from rads.errors import GridMismatchError, InsufficientDataError
from rads.ingest import ReplaySplit
from rads.occ import OccLabel, OccModel, occ_classify, train_occ
from rads.simulator import LabeledSeries, TruthWindow
from rads.timeseries import RawSeries, WindowBin, partition_windows
from rads.wtsa import FeatureMode, build_test_instance, build_training_set

logger = logging.getLogger(__name__)

REPORT_COLUMNS = ["mode", "tp", "fp", "fn", "tn", "precision", "recall", "f1", "fpr"]


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __post_init__(self) -> None:
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise ValueError(f"confusion counts cannot be negative: {self}")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def __add__(self, other: ConfusionCounts) -> ConfusionCounts:
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn)


@dataclass(frozen=True)
class MetricsReport:
    precision: float
    recall: float
    f1: float
    fpr: float
    counts: ConfusionCounts
    mode: FeatureMode | None = None
    train_seconds: float = 0.0
    detect_seconds: float = 0.0


def _grid_key(window_end: float) -> float:
    return round(float(window_end), 6)


def confusion(verdicts: Iterable[DetectionResult], truth: Sequence[TruthWindow]) -> ConfusionCounts:
    """Tally verdicts against truth window by window; anomaly is the positive class.

    Raises:
        GridMismatchError: If the two do not cover the same windows.
    """
    labels = {_grid_key(w.window_end): w.label for w in truth}
    flagged: dict[float, Verdict] = {}
    for result in verdicts:
        key = _grid_key(result.window_end)
        if key in flagged:
            raise GridMismatchError(f"two verdicts for the window ending at {result.window_end}")
        flagged[key] = result.verdict

    if flagged.keys() != labels.keys():
        missing = sorted(labels.keys() - flagged.keys())
        extra = sorted(flagged.keys() - labels.keys())
        raise GridMismatchError(
            f"verdicts and truth cover different windows: {len(missing)} unscored (first {missing[:3]}), "
            f"{len(extra)} unlabelled (first {extra[:3]})"
        )

    tp = fp = fn = tn = 0
    for key, label in labels.items():
        predicted = flagged[key] is Verdict.ANOMALY
        actual = label is Verdict.ANOMALY
        if predicted and actual:
            tp += 1
        elif predicted:
            fp += 1
        elif actual:
            fn += 1
        else:
            tn += 1
    return ConfusionCounts(tp, fp, fn, tn)


def _ratio(numerator: float, denominator: float) -> float:
    # 0/0 counts as 0
    if denominator == 0:
        return 0.0
    return numerator / denominator


def metrics(counts: ConfusionCounts) -> MetricsReport:
    precision = _ratio(counts.tp, counts.tp + counts.fp)
    recall = _ratio(counts.tp, counts.tp + counts.fn)
    return MetricsReport(
        precision=precision,
        recall=recall,
        f1=_ratio(2 * precision * recall, precision + recall),
        fpr=_ratio(counts.fp, counts.fp + counts.tn),
        counts=counts,
    )


def score_windows(model: OccModel, windows: Sequence[WindowBin], series: RawSeries) -> list[DetectionResult]:
    """Classify every window with a fixed model."""
    results = []
    for window in windows:
        instance = build_test_instance(window, model.bounds, model.mode, entropy_scope=model.entropy_scope)
        label = occ_classify(model, instance.features)
        results.append(
            DetectionResult(
                vm_id=series.vm_id,
                metric=series.metric,
                window_end=window.window_end,
                verdict=Verdict.NORMAL if label is OccLabel.POSITIVE else Verdict.ANOMALY,
                features=instance.raw,
            )
        )
    return results


@dataclass(frozen=True)
class _ModeRun:
    counts: ConfusionCounts
    train_seconds: float
    detect_seconds: float
    windows: int


def _run_mode(scenario: LabeledSeries, mode: FeatureMode, config: RunConfig) -> _ModeRun:
    series = scenario.series
    started = time.perf_counter()
    matrix = build_training_set(
        scenario.training, mode, scenario.window_len, entropy_scope=config.entropy_scope
    )
    model = train_occ(matrix, config.seed, reference_spread=config.reference_spread)
    trained = time.perf_counter()

    windows = partition_windows(series.slice_time(start=scenario.training_end), scenario.window_len)
    results = score_windows(model, windows, series)
    detected = time.perf_counter()
    return _ModeRun(confusion(results, scenario.truth), trained - started, detected - trained, len(windows))


def compare_modes(
    scenarios: LabeledSeries | Sequence[LabeledSeries],
    modes: Sequence[FeatureMode],
    config: RunConfig,
) -> dict[FeatureMode, MetricsReport]:
    """Train and score every mode on identical data; counts are summed over scenarios.

    Each scenario trains on its windows before training_end and is scored on
    the labelled windows after it.
    """
    if isinstance(scenarios, LabeledSeries):
        scenarios = [scenarios]
    reports: dict[FeatureMode, MetricsReport] = {}
    for mode in modes:
        counts = ConfusionCounts()
        train_seconds = detect_seconds = 0.0
        windows = 0
        for scenario in scenarios:
            run = _run_mode(scenario, mode, config)
            counts += run.counts
            train_seconds += run.train_seconds
            detect_seconds += run.detect_seconds
            windows += run.windows
        report = replace(
            metrics(counts),
            mode=mode,
            train_seconds=train_seconds,
            detect_seconds=detect_seconds / windows if windows else 0.0,
        )
        logger.info(
            f"{mode}: tp {counts.tp} fp {counts.fp} fn {counts.fn} tn {counts.tn}, "
            f"f1 {report.f1:.2f} fpr {report.fpr:.2f}"
        )
        reports[mode] = report
    return reports


def normal_truth(series: RawSeries, window_len: float) -> tuple[TruthWindow, ...]:
    """All-normal labels for every complete window of an attack-free series."""
    return tuple(TruthWindow(w.window_end, Verdict.NORMAL) for w in partition_windows(series, window_len))


def _split_labeled(series: RawSeries, split: ReplaySplit, window_len: float) -> LabeledSeries:
    start = float(series.timestamps[0])
    boundary = start + split.train_seconds
    span = series.slice_time(start, boundary + split.test_seconds)
    test = span.slice_time(start=boundary)
    if len(test) == 0:
        raise InsufficientDataError(f"{series.vm_id}/{series.metric}: no samples after the training span")
    return LabeledSeries(span, normal_truth(test, window_len), window_len, boundary)


def trace_fpr(
    series_by_vm: Mapping[str, RawSeries],
    split: ReplaySplit,
    modes: Sequence[FeatureMode],
    config: RunConfig,
) -> dict[str, dict[FeatureMode, MetricsReport]]:
    """Per-VM reports on replayed traces. Traces carry no attacks, so every flag is a false positive."""
    reports: dict[str, dict[FeatureMode, MetricsReport]] = {}
    for vm_id, series in series_by_vm.items():
        window_len = config.resolve_window_len(series.sample_interval)
        try:
            reports[vm_id] = compare_modes(_split_labeled(series, split, window_len), modes, config)
        except InsufficientDataError as e:
            logger.warning(f"skipping {vm_id}: {e}")
    return reports


def trend_share(
    reports: Mapping[str, Mapping[FeatureMode, MetricsReport]],
    better: FeatureMode = FeatureMode.AVG_SD,
    baseline: FeatureMode = FeatureMode.AVERAGE_ONLY,
) -> float:
    """Fraction of VMs where `better` has an FPR no higher than `baseline`."""
    comparable = [r for r in reports.values() if better in r and baseline in r]
    if not comparable:
        return 0.0
    wins = sum(r[better].fpr <= r[baseline].fpr for r in comparable)
    return wins / len(comparable)


def training_duration_sweep(
    series: RawSeries,
    durations: Sequence[float],
    *,
    test_seconds: float,
    mode: FeatureMode,
    config: RunConfig,
) -> dict[float, MetricsReport]:
    """FPR on a fixed held-out tail as the training span before it grows.

    The tail is the last test_seconds of the series; each duration trains on
    that many seconds immediately before it.
    """
    window_len = config.resolve_window_len(series.sample_interval)
    end = float(series.timestamps[-1]) + series.sample_interval
    boundary = end - test_seconds
    tail = series.slice_time(start=boundary)
    truth = normal_truth(tail, window_len)
    sweep: dict[float, MetricsReport] = {}
    for duration in sorted(durations):
        scenario = LabeledSeries(series.slice_time(boundary - duration), truth, window_len, boundary)
        try:
            sweep[duration] = compare_modes(scenario, [mode], config)[mode]
        except InsufficientDataError as e:
            logger.warning(f"training span {duration:g}s too short: {e}")
    return sweep


def report_frame(reports: Mapping[FeatureMode, MetricsReport], *, timings: bool = False) -> pd.DataFrame:
    rows = []
    for mode, report in reports.items():
        c = report.counts
        row = {
            "mode": mode.flag,
            "tp": c.tp,
            "fp": c.fp,
            "fn": c.fn,
            "tn": c.tn,
            "precision": report.precision,
            "recall": report.recall,
            "f1": report.f1,
            "fpr": report.fpr,
        }
        if timings:
            row["train_s"] = report.train_seconds
            row["detect_ms"] = report.detect_seconds * 1000.0
        rows.append(row)
    columns = REPORT_COLUMNS + (["train_s", "detect_ms"] if timings else [])
    return pd.DataFrame(rows, columns=columns)


def format_report_table(reports: Mapping[FeatureMode, MetricsReport]) -> str:
    return report_frame(reports, timings=True).to_string(index=False, float_format=lambda v: f"{v:.3f}")


def write_report_csv(reports: Mapping[FeatureMode, MetricsReport], path: Path) -> None:
    report_frame(reports).to_csv(path, index=False, float_format="%.6f", lineterminator="\n")
    logger.info(f"wrote {len(reports)} report row(s) to {path}")
