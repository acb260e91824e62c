import io
import json
import logging
import threading
import time
from dataclasses import replace

import numpy as np
import pytest

from rads.config import RunConfig
from rads.detector import (
    AlertSink,
    DetectionResult,
    OnlineRunner,
    RunListener,
    SampleStream,
    TrainingStatus,
    Verdict,
    VmPipeline,
    VmTrainingState,
    detect,
    run_online,
    training_tick,
)
from rads.errors import InsufficientDataError, NotTrainedError, OrderingError
from rads.ingest import paced
from rads.model_store import ModelKey, ModelStore
from rads.occ import train_occ
from rads.simulator import generate, preset
from rads.timeseries import Metric, WindowBin
from rads.wtsa import FeatureMode, build_training_set
from tests.helpers import make_series


def result(verdict, window_end=60.0):
    return DetectionResult("vm-1", Metric.CPU_PERCENT, window_end, verdict, (0.0, 0.0))


def state(**kwargs):
    return VmTrainingState("vm-1", Metric.CPU_PERCENT, **kwargs)


class CountingTrainer:
    def __init__(self, fail=False):
        self.calls = 0
        self.fail = fail

    def __call__(self, history):
        self.calls += 1
        if self.fail:
            raise InsufficientDataError("not enough windows")
        return object()


def test_first_tick_trains(noisy_cpu):
    trainer = CountingTrainer()
    outcome = training_tick(state(), noisy_cpu, trainer)

    assert trainer.calls == 1
    assert outcome.retrained
    assert outcome.state.status is TrainingStatus.RUNNING
    assert outcome.state.model_version == 1
    assert outcome.state.stability_period == 0.0


def test_quiet_period_extends_stability(noisy_cpu):
    trainer = CountingTrainer()
    before = state(status=TrainingStatus.RUNNING, model_version=1, adr_buffer=[result(Verdict.NORMAL)] * 5)
    outcome = training_tick(before, noisy_cpu, trainer)

    assert trainer.calls == 0
    assert outcome.state.status is TrainingStatus.STOPPED
    assert outcome.state.stability_period == 5.0
    assert outcome.state.adr_buffer == []


def test_reaching_the_threshold_completes_training(noisy_cpu):
    before = state(
        status=TrainingStatus.STOPPED, stability_period=25.0, model_version=1, adr_buffer=[result(Verdict.NORMAL)]
    )
    outcome = training_tick(before, noisy_cpu, CountingTrainer())
    assert outcome.state.status is TrainingStatus.COMPLETED
    assert outcome.state.stability_period == 30.0


def test_anomaly_in_the_buffer_retrains_and_resets_stability(noisy_cpu):
    trainer = CountingTrainer()
    before = state(
        status=TrainingStatus.STOPPED,
        stability_period=20.0,
        model_version=2,
        adr_buffer=[result(Verdict.NORMAL), result(Verdict.ANOMALY)],
    )
    outcome = training_tick(before, noisy_cpu, trainer)

    assert trainer.calls == 1
    assert outcome.state.status is TrainingStatus.RUNNING
    assert outcome.state.stability_period == 0.0
    assert outcome.state.model_version == 3
    assert outcome.state.adr_buffer == []


def test_period_without_checked_windows_holds_stability(noisy_cpu):
    before = state(status=TrainingStatus.STOPPED, stability_period=10.0, model_version=1)
    outcome = training_tick(before, noisy_cpu, CountingTrainer())

    assert outcome.state.status is TrainingStatus.STOPPED
    assert outcome.state.stability_period == 10.0
    assert not outcome.retrained


def test_silent_vm_never_completes_training():
    rng = np.random.default_rng(3)
    pipeline = VmPipeline("vm-1", Metric.CPU_PERCENT, 5.0, RunConfig(parallelism=1))
    for i, value in enumerate(30 + rng.uniform(-5, 5, 72)):
        pipeline.feed(i * 5.0, float(value))
    pipeline.feed(355.0 + 40 * 60.0, 30.0)

    assert [e.minute for e in pipeline.events] == [5.0 * k for k in range(1, 10)]
    assert all(e.status is not TrainingStatus.COMPLETED for e in pipeline.events)
    assert pipeline.state.stability_period <= 5.0


def test_completed_state_is_left_alone(noisy_cpu):
    done = state(status=TrainingStatus.COMPLETED, stability_period=30.0, model_version=4)
    outcome = training_tick(done, noisy_cpu, CountingTrainer())
    assert outcome.state is done
    assert not outcome.retrained


def test_failed_first_training_retries_on_the_next_tick(noisy_cpu):
    outcome = training_tick(state(), noisy_cpu, CountingTrainer(fail=True))
    assert outcome.state.status is TrainingStatus.FIRST_RUN
    assert outcome.model is None


def test_failed_retraining_keeps_the_previous_model(noisy_cpu):
    before = state(status=TrainingStatus.RUNNING, model_version=1, adr_buffer=[result(Verdict.ANOMALY)])
    outcome = training_tick(before, noisy_cpu, CountingTrainer(fail=True))
    assert outcome.state.status is TrainingStatus.STOPPED
    assert outcome.state.model_version == 1


@pytest.fixture
def cpu_model(noisy_cpu):
    return train_occ(build_training_set(noisy_cpu, FeatureMode.AVG_SD, 60.0), seed=0)


def test_detect_requires_a_model():
    with pytest.raises(NotTrainedError):
        detect(state(), None, WindowBin(0.0, 60.0, (30.0,) * 12))


def test_detect_buffers_verdicts_while_training(cpu_model):
    training = state(status=TrainingStatus.RUNNING, model_version=1)
    attack = WindowBin(3600.0, 3660.0, (97.0, 96.5, 97.5) * 4)

    outcome = detect(training, cpu_model, attack)
    assert outcome.verdict is Verdict.ANOMALY
    assert not outcome.alert_emitted
    assert training.adr_buffer == [outcome]


def test_detect_computes_window_features_once(cpu_model, monkeypatch):
    import rads.wtsa

    calls = []
    real = rads.wtsa.raw_features
    monkeypatch.setattr(rads.wtsa, "raw_features", lambda *a, **kw: (calls.append(1), real(*a, **kw))[1])
    training = state(status=TrainingStatus.RUNNING, model_version=1)

    outcome = detect(training, cpu_model, WindowBin(3600.0, 3660.0, (30.0,) * 12))
    assert len(calls) == 1
    assert outcome.features == (30.0, 0.0)


def test_detect_alerts_only_once_training_is_complete(cpu_model):
    done = state(status=TrainingStatus.COMPLETED, stability_period=30.0, model_version=1)
    attack = WindowBin(3600.0, 3660.0, (97.0, 96.5, 97.5) * 4)
    spike = WindowBin(3660.0, 3720.0, (30.0,) * 11 + (95.0,))

    assert detect(done, cpu_model, attack).alert_emitted
    assert detect(done, cpu_model, spike).verdict is Verdict.NORMAL
    assert done.adr_buffer == []


def event_trace(pipeline):
    return [(e.minute, e.status, e.retrained) for e in pipeline.events]


def run_preset(spec, config):
    labeled = generate(spec)
    alerts = io.StringIO()
    runner = OnlineRunner(config, listeners=[AlertSink(alerts)])
    results = runner.run([SampleStream.from_series(labeled.series)])
    pipeline = runner.pipelines[(spec.vm_id, spec.metric)]
    return pipeline, results, [json.loads(line) for line in alerts.getvalue().splitlines()]


@pytest.mark.parametrize("metric", [Metric.CPU_PERCENT, Metric.NET_KBPS])
def test_timeline_with_spike_and_attack(metric):
    pipeline, results, alerts = run_preset(preset("figure5_timeline", metric=metric), RunConfig(parallelism=1))

    R, S = TrainingStatus.RUNNING, TrainingStatus.STOPPED
    assert event_trace(pipeline) == [
        (5.0, R, True),
        (10.0, S, False),
        (15.0, R, True),
        (20.0, S, False),
        (25.0, S, False),
        (30.0, S, False),
        (35.0, S, False),
        (40.0, S, False),
        (45.0, TrainingStatus.COMPLETED, False),
    ]
    assert [a["timestamp"] for a in alerts] == [2940.0]
    assert alerts[0]["vm_id"] == "vm-1"
    assert alerts[0]["metric"] == metric.value
    assert [r.window_end for r in results if r.alert_emitted] == [2940.0]
    spike_window = next(r for r in results if r.window_end == 720.0)
    assert spike_window.verdict is Verdict.ANOMALY
    assert not spike_window.alert_emitted


def test_all_normal_timeline_completes_at_minute_35():
    quiet = replace(preset("figure5_timeline"), spikes=(), attacks=())
    pipeline, results, alerts = run_preset(quiet, RunConfig(parallelism=1))

    assert event_trace(pipeline)[-1] == (35.0, TrainingStatus.COMPLETED, False)
    assert sum(e.retrained for e in pipeline.events) == 1
    assert alerts == []
    assert all(r.verdict is Verdict.NORMAL for r in results)


def test_completed_pipeline_releases_its_history():
    quiet = replace(preset("figure5_timeline"), spikes=(), attacks=())
    pipeline, _, _ = run_preset(quiet, RunConfig(parallelism=1))

    assert pipeline.state.status is TrainingStatus.COMPLETED
    assert pipeline._timestamps == []
    assert pipeline._values == []


def test_pipeline_rejects_samples_out_of_order():
    pipeline = VmPipeline("vm-1", Metric.CPU_PERCENT, 5.0, RunConfig())
    pipeline.feed(10.0, 30.0)
    with pytest.raises(OrderingError):
        pipeline.feed(10.0, 31.0)


def test_pipeline_warns_about_gaps(caplog):
    pipeline = VmPipeline("vm-1", Metric.CPU_PERCENT, 5.0, RunConfig())
    pipeline.feed(0.0, 30.0)
    with caplog.at_level(logging.WARNING, logger="rads.detector"):
        pipeline.feed(600.0, 30.0)
    assert "gap of 9 windows" in caplog.text


def test_retrained_models_are_persisted(tmp_path):
    labeled = generate(preset("figure5_timeline"))
    store = ModelStore(tmp_path)
    OnlineRunner(RunConfig(parallelism=1), store=store).run([SampleStream.from_series(labeled.series)])

    record = store.require(ModelKey("vm-1", Metric.CPU_PERCENT, FeatureMode.AVG_SD))
    assert record.version == 2
    assert record.state["status"] == TrainingStatus.RUNNING.value


def two_vm_streams():
    rng = np.random.default_rng(5)
    return [
        SampleStream.from_series(make_series(30 + rng.uniform(-5, 5, 900), vm_id=vm_id))
        for vm_id in ("vm-b", "vm-a")
    ]


def test_runner_orders_results_and_is_deterministic():
    config = RunConfig(parallelism=2)
    first = OnlineRunner(config).run(two_vm_streams())
    second = sorted(run_online(two_vm_streams(), config), key=lambda r: (r.window_end, r.vm_id))

    keys = [(r.window_end, r.vm_id) for r in first]
    assert keys == sorted(keys)
    assert {r.vm_id for r in first} == {"vm-a", "vm-b"}
    assert first == second


def test_run_online_yields_a_finished_stream_before_the_others():
    release = threading.Event()

    def held_back():
        release.wait(timeout=10)
        yield 0.0, 30.0

    rng = np.random.default_rng(5)
    quick = SampleStream.from_series(make_series(30 + rng.uniform(-5, 5, 900), vm_id="vm-a"))
    slow = SampleStream("vm-b", Metric.CPU_PERCENT, 5.0, held_back())
    results = run_online([quick, slow], RunConfig(parallelism=2))

    first = next(results)
    assert first.vm_id == "vm-a"
    assert not release.is_set()
    release.set()
    assert all(r.vm_id == "vm-a" for r in results)


def test_stop_ends_every_stream_at_its_next_sample():
    stop = threading.Event()

    def samples():
        for i in range(1000):
            if i == 100:
                stop.set()
            yield i * 5.0, 30.0

    runner = OnlineRunner(RunConfig(parallelism=1), stop_event=stop)
    runner.run([SampleStream("vm-1", Metric.CPU_PERCENT, 5.0, samples())])
    assert runner.pipelines[("vm-1", Metric.CPU_PERCENT)]._last == 495.0


def test_stop_interrupts_a_paced_replay():
    stop = threading.Event()
    pairs = [(i * 5.0, 30.0) for i in range(100)]
    runner = OnlineRunner(RunConfig(parallelism=1), stop_event=stop)
    stream = SampleStream("vm-1", Metric.CPU_PERCENT, 5.0, paced(pairs, 0.001, stop.wait))

    timer = threading.Timer(0.2, runner.stop)
    timer.start()
    started = time.perf_counter()
    runner.run([stream])
    timer.join()
    assert time.perf_counter() - started < 5.0


def per_vm(results, vm_id):
    return [r for r in results if r.vm_id == vm_id]


def test_running_vms_together_matches_running_them_alone():
    busy = generate(preset("figure5_timeline")).series
    quiet = generate(replace(preset("figure5_timeline"), vm_id="vm-2", seed=11, spikes=(), attacks=())).series
    config = RunConfig(parallelism=2)

    together = OnlineRunner(config).run([SampleStream.from_series(busy), SampleStream.from_series(quiet)])
    alone_busy = OnlineRunner(config).run([SampleStream.from_series(busy)])
    alone_quiet = OnlineRunner(config).run([SampleStream.from_series(quiet)])

    assert per_vm(together, "vm-1") == alone_busy
    assert per_vm(together, "vm-2") == alone_quiet


class TrainingWatch(RunListener):
    def __init__(self):
        self.runner = None
        self.largest_buffer = 0
        self.early_alerts = 0
        self.checked = 0

    def on_result(self, result):
        pipeline = self.runner.pipelines[(result.vm_id, result.metric)]
        self.checked += 1
        self.largest_buffer = max(self.largest_buffer, len(pipeline.state.adr_buffer))
        if result.alert_emitted and pipeline.state.status is not TrainingStatus.COMPLETED:
            self.early_alerts += 1


@pytest.mark.parametrize("name", ["figure5_timeline", "attack_test", "spike_test"])
def test_buffer_stays_small_and_alerts_wait_for_completion(name):
    watch = TrainingWatch()
    runner = OnlineRunner(RunConfig(parallelism=1), listeners=[watch])
    watch.runner = runner
    runner.run([SampleStream.from_series(generate(preset(name)).series)])

    assert watch.checked > 0
    assert watch.largest_buffer <= 5
    assert watch.early_alerts == 0
