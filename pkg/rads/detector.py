"""The online runtime: per-window detection and the training optimiser.

Every (vm, metric) pair runs an independent VmPipeline. The pipeline stays
idle for the warm-up, then classifies each closed window and runs the
training optimiser every few windows. The optimiser retrains whenever the
last period produced an anomaly verdict and declares training complete once
the stability period reaches its threshold; only then are alerts emitted.
"""

from __future__ import annotations

import json
import logging
import math
import sys
import threading
import time
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field, replace
from enum import StrEnum
from pathlib import Path
from typing import Callable, Iterable, Iterator, Sequence, TextIO

import numpy as np

from rads.config import RunConfig
from rads.errors import NotTrainedError, OrderingError, RadsError
from rads.model_store import ModelKey, ModelRecord, ModelStore
from rads.occ import OccLabel, OccModel, occ_classify, train_occ
from rads.timeseries import Metric, RawSeries, WindowBin, samples_per_window
from rads.wtsa import build_test_instance, build_training_set

logger = logging.getLogger(__name__)

GAP_WARNING_WINDOWS = 2


class TrainingStatus(StrEnum):
    FIRST_RUN = "first_run"
    RUNNING = "running"
    STOPPED = "stopped"
    COMPLETED = "completed"


class Verdict(StrEnum):
    NORMAL = "normal"
    ANOMALY = "anomaly"


@dataclass(frozen=True)
class DetectionResult:
    vm_id: str
    metric: Metric
    window_end: float
    verdict: Verdict
    features: tuple[float, ...]
    alert_emitted: bool = False


@dataclass
class VmTrainingState:
    """Training optimiser state for one (vm, metric); owned by a single pipeline."""

    vm_id: str
    metric: Metric
    status: TrainingStatus = TrainingStatus.FIRST_RUN
    stability_period: float = 0.0
    adr_buffer: list[DetectionResult] = field(default_factory=list)
    model_version: int = 0
    spt: float = 30.0
    adr_capacity: int = 5

    def __post_init__(self) -> None:
        if not 0.0 <= self.stability_period <= self.spt:
            raise ValueError(f"stability period {self.stability_period} outside [0, {self.spt}]")

    def snapshot(self) -> dict:
        return {
            "status": self.status.value,
            "stability_period": self.stability_period,
            "model_version": self.model_version,
            "spt": self.spt,
        }


@dataclass(frozen=True)
class TrainingEvent:
    """What one optimiser tick did."""

    vm_id: str
    metric: Metric
    minute: float
    status: TrainingStatus
    retrained: bool
    stability_period: float
    model_version: int


@dataclass(frozen=True)
class TickOutcome:
    state: VmTrainingState
    model: OccModel | None
    retrained: bool


Trainer = Callable[[RawSeries], OccModel]


def detect(state: VmTrainingState, model: OccModel | None, last_window: WindowBin) -> DetectionResult:
    """Classify the latest complete window and record the verdict in the ADR buffer.

    Raises:
        NotTrainedError: If no model has been trained for this pipeline yet.
    """
    if model is None or model.mode is None or model.bounds is None:
        raise NotTrainedError(f"{state.vm_id}/{state.metric}: no trained model")
    instance = build_test_instance(last_window, model.bounds, model.mode, entropy_scope=model.entropy_scope)
    label = occ_classify(model, instance.features)
    verdict = Verdict.NORMAL if label is OccLabel.POSITIVE else Verdict.ANOMALY
    result = DetectionResult(
        vm_id=state.vm_id,
        metric=state.metric,
        window_end=last_window.window_end,
        verdict=verdict,
        features=instance.raw,
        alert_emitted=verdict is Verdict.ANOMALY and state.status is TrainingStatus.COMPLETED,
    )
    if state.status is not TrainingStatus.COMPLETED:
        state.adr_buffer.append(result)
        del state.adr_buffer[: -state.adr_capacity]
    logger.debug(f"{state.vm_id}/{state.metric} window ending {last_window.window_end}: {verdict}")
    return result


def training_tick(
    state: VmTrainingState,
    history: RawSeries,
    trainer: Trainer,
    *,
    period_minutes: float = 5.0,
) -> TickOutcome:
    """One pass of the training optimiser.

    Retrains on the full history on the first run or when the buffer holds an
    anomaly. Otherwise a period with checked windows extends the stability
    period, completing training at the threshold, and a period with none
    leaves it unchanged. The ADR buffer is cleared on every path.
    """
    if state.status is TrainingStatus.COMPLETED:
        return TickOutcome(state, None, False)

    anomalous = any(r.verdict is Verdict.ANOMALY for r in state.adr_buffer)
    if state.status is TrainingStatus.FIRST_RUN or anomalous:
        try:
            model = trainer(history)
        except RadsError as e:
            fallback = TrainingStatus.STOPPED if state.model_version else TrainingStatus.FIRST_RUN
            logger.warning(f"{state.vm_id}/{state.metric}: retraining failed, staying {fallback}: {e}")
            return TickOutcome(replace(state, status=fallback, adr_buffer=[]), None, False)
        logger.info(
            f"{state.vm_id}/{state.metric}: retrained on {len(history)} samples "
            f"({'first run' if state.status is TrainingStatus.FIRST_RUN else 'anomaly in last period'})"
        )
        new_state = replace(
            state,
            status=TrainingStatus.RUNNING,
            stability_period=0.0,
            adr_buffer=[],
            model_version=state.model_version + 1,
        )
        return TickOutcome(new_state, model, True)

    if not state.adr_buffer:
        # Silent period
        logger.warning(
            f"{state.vm_id}/{state.metric}: no window checked since the last tick, "
            f"stability held at {state.stability_period:g} minutes"
        )
        return TickOutcome(state, None, False)

    stability = min(state.stability_period + period_minutes, state.spt)
    status = TrainingStatus.COMPLETED if stability >= state.spt else TrainingStatus.STOPPED
    if status is TrainingStatus.COMPLETED:
        logger.info(f"{state.vm_id}/{state.metric}: training complete after {stability:g} stable minutes")
    return TickOutcome(replace(state, status=status, stability_period=stability, adr_buffer=[]), None, False)


class RunListener:
    """Receives results and optimiser events from running pipelines. Calls are serialized."""

    def on_result(self, result: DetectionResult) -> None:
        pass

    def on_event(self, event: TrainingEvent) -> None:
        pass


class AlertSink(RunListener):
    """Writes one JSON line per emitted alert to a file path or an open stream."""

    def __init__(self, target: Path | TextIO | None = None):
        self._lock = threading.Lock()
        self._owned = isinstance(target, (str, Path))
        if self._owned:
            self._stream: TextIO = open(target, "a", encoding="utf-8")
        else:
            self._stream = target or sys.stdout
        self.count = 0

    def on_result(self, result: DetectionResult) -> None:
        if not result.alert_emitted:
            return
        record = {
            "timestamp": result.window_end,
            "vm_id": result.vm_id,
            "metric": result.metric.value,
            "verdict": result.verdict.value,
        }
        with self._lock:
            self._stream.write(json.dumps(record) + "\n")
            self._stream.flush()
            self.count += 1

    def close(self) -> None:
        if self._owned:
            self._stream.close()


@dataclass(frozen=True)
class SampleStream:
    """Ordered (timestamp, value) samples for one (vm, metric)."""

    vm_id: str
    metric: Metric
    sample_interval: float
    samples: Iterable[tuple[float, float]]

    @classmethod
    def from_series(cls, series: RawSeries) -> SampleStream:
        pairs = zip(series.timestamps.tolist(), series.values.tolist())
        return cls(series.vm_id, series.metric, series.sample_interval, pairs)


class VmPipeline:
    """Window clock, detector and optimiser for one (vm, metric)."""

    def __init__(
        self,
        vm_id: str,
        metric: Metric,
        sample_interval: float,
        config: RunConfig,
        *,
        store: ModelStore | None = None,
        notify: Callable[[DetectionResult | TrainingEvent], None] | None = None,
    ):
        self.config = config
        self.sample_interval = sample_interval
        self.window_len = config.resolve_window_len(sample_interval)
        self.expected = samples_per_window(self.window_len, sample_interval)
        self.state = VmTrainingState(vm_id, metric, spt=config.spt_minutes, adr_capacity=config.optimiser_windows)
        self.model: OccModel | None = None
        self.events: list[TrainingEvent] = []
        self.store = store
        self._notify = notify or (lambda item: None)
        self._timestamps: list[float] = []
        self._values: list[float] = []
        self._last: float | None = None
        self._origin: float | None = None
        self._slot: int | None = None
        self._pending: list[float] = []

    @property
    def key(self) -> tuple[str, Metric]:
        return self.state.vm_id, self.state.metric

    def minute_of(self, window_index: int) -> float:
        return window_index * self.window_len / 60.0

    def feed(self, timestamp: float, value: float) -> list[DetectionResult]:
        """Add one sample; returns results for any windows it closed."""
        if self._last is not None and timestamp <= self._last:
            raise OrderingError(
                f"{self.state.vm_id}/{self.state.metric}: sample at {timestamp} after {self._last}"
            )
        self._last = timestamp
        if self._origin is None:
            self._origin = timestamp
        if self.state.status is not TrainingStatus.COMPLETED:
            self._timestamps.append(timestamp)
            self._values.append(value)

        slot = math.floor((timestamp - self._origin) / self.window_len + 1e-9)
        results: list[DetectionResult] = []
        if self._slot is None:
            self._slot = slot
        elif slot > self._slot:
            results.extend(self._close_window())
            skipped = slot - self._slot - 1
            if skipped > GAP_WARNING_WINDOWS:
                logger.warning(
                    f"{self.state.vm_id}/{self.state.metric}: gap of {skipped} windows before t={timestamp}"
                )
            for empty in range(self._slot + 1, slot):
                results.extend(self._on_boundary(empty, None))
            self._slot = slot
        self._pending.append(value)
        return results

    def finish(self) -> list[DetectionResult]:
        """Close the open window at end of stream (only if it is complete)."""
        if self._slot is None:
            return []
        results = self._close_window()
        self._slot = None
        return results

    def _close_window(self) -> list[DetectionResult]:
        values, self._pending = self._pending, []
        window = None
        if len(values) == self.expected:
            start = self._origin + self._slot * self.window_len
            window = WindowBin(start, start + self.window_len, tuple(values))
        return self._on_boundary(self._slot, window)

    def _on_boundary(self, slot: int, window: WindowBin | None) -> list[DetectionResult]:
        index = slot + 1
        results = []
        if window is not None and self.model is not None:
            result = detect(self.state, self.model, window)
            results.append(result)
            self._notify(result)
        if index >= self.config.warmup_windows and index % self.config.optimiser_windows == 0:
            self._tick(index)
        return results

    def _history(self, end: float) -> RawSeries:
        timestamps = np.asarray(self._timestamps)
        keep = timestamps < end
        return RawSeries(
            self.state.vm_id,
            self.state.metric,
            timestamps[keep],
            np.asarray(self._values)[keep],
            self.sample_interval,
        )

    def _train(self, history: RawSeries) -> OccModel:
        matrix = build_training_set(
            history, self.config.mode, self.window_len, entropy_scope=self.config.entropy_scope
        )
        return train_occ(matrix, self.config.seed, reference_spread=self.config.reference_spread)

    def _tick(self, index: int) -> None:
        if self.state.status is TrainingStatus.COMPLETED:
            return
        period = self.minute_of(self.config.optimiser_windows)
        history = self._history(self._origin + index * self.window_len)
        outcome = training_tick(self.state, history, self._train, period_minutes=period)
        self.state = outcome.state
        if self.state.status is TrainingStatus.COMPLETED:
            self._timestamps.clear()
            self._values.clear()
        if outcome.model is not None:
            self.model = outcome.model
            if self.store is not None:
                self.store.save_model(
                    ModelRecord(
                        key=ModelKey(self.state.vm_id, self.state.metric, self.config.mode),
                        model=outcome.model,
                        state=self.state.snapshot(),
                        created_at=time.time(),
                    )
                )
        event = TrainingEvent(
            vm_id=self.state.vm_id,
            metric=self.state.metric,
            minute=self.minute_of(index),
            status=self.state.status,
            retrained=outcome.retrained,
            stability_period=self.state.stability_period,
            model_version=self.state.model_version,
        )
        self.events.append(event)
        self._notify(event)


class OnlineRunner:
    """Runs one pipeline per stream on a bounded thread pool.

    stop() ends every stream at its next sample. Pass the same event's wait as
    the replay sleep (see ingest.paced) so paced streams wake up immediately.
    """

    def __init__(
        self,
        config: RunConfig,
        *,
        store: ModelStore | None = None,
        listeners: Sequence[RunListener] = (),
        stop_event: threading.Event | None = None,
    ):
        self.config = config
        self.store = store
        self.listeners = list(listeners)
        self.pipelines: dict[tuple[str, Metric], VmPipeline] = {}
        self.stop_event = stop_event or threading.Event()
        self._lock = threading.Lock()

    def stop(self) -> None:
        self.stop_event.set()

    def _notify(self, item: DetectionResult | TrainingEvent) -> None:
        with self._lock:
            for listener in self.listeners:
                if isinstance(item, DetectionResult):
                    listener.on_result(item)
                else:
                    listener.on_event(item)

    def _run_stream(self, stream: SampleStream) -> list[DetectionResult]:
        pipeline = VmPipeline(
            stream.vm_id,
            stream.metric,
            stream.sample_interval,
            self.config,
            store=self.store,
            notify=self._notify,
        )
        with self._lock:
            self.pipelines[pipeline.key] = pipeline
        results: list[DetectionResult] = []
        for timestamp, value in stream.samples:
            if self.stop_event.is_set():
                logger.info(f"{stream.vm_id}/{stream.metric}: stopped at t={timestamp}")
                break
            results.extend(pipeline.feed(float(timestamp), float(value)))
        results.extend(pipeline.finish())
        logger.info(
            f"{stream.vm_id}/{stream.metric}: {len(results)} windows scored, "
            f"{sum(r.alert_emitted for r in results)} alert(s), status {pipeline.state.status}"
        )
        return results

    def iter_results(self, streams: Sequence[SampleStream]) -> Iterator[list[DetectionResult]]:
        """Yield each stream's results, in window order, as soon as that stream ends."""
        if not streams:
            return
        workers = min(self.config.parallelism, len(streams))
        with ThreadPoolExecutor(max_workers=workers, thread_name_prefix="rads-pipeline") as pool:
            futures = [pool.submit(self._run_stream, stream) for stream in streams]
            try:
                for future in as_completed(futures):
                    yield future.result()
            except GeneratorExit:
                self.stop()
                raise

    def run(self, streams: Sequence[SampleStream]) -> list[DetectionResult]:
        """Process every stream to the end; results ordered by window end, then vm and metric."""
        results = [result for batch in self.iter_results(streams) for result in batch]
        results.sort(key=lambda r: (r.window_end, r.vm_id, r.metric.value))
        return results


def run_online(
    streams: Sequence[SampleStream],
    config: RunConfig,
    *,
    store: ModelStore | None = None,
    listeners: Sequence[RunListener] = (),
    stop_event: threading.Event | None = None,
) -> Iterator[DetectionResult]:
    """Run the detector over every stream and yield its results.

    Results arrive one finished stream at a time, in timestamp order within
    each stream. Consumers that need every window as it closes should pass a
    RunListener instead.
    """
    runner = OnlineRunner(config, store=store, listeners=listeners, stop_event=stop_event)
    for batch in runner.iter_results(streams):
        yield from batch
