"""Synthetic VM workloads with labelled spikes and attacks.

Normal load is a mean level plus uniform noise plus an optional sinusoid.
Genuine spikes are single-sample bursts added on top. Attacks replace the
signal with a near-saturation level and small jitter for their whole
duration, so attack windows have a high average and a low spread while spike
windows have both high.
"""

from __future__ import annotations

import io
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import pandas as pd

from rads.detector import Verdict
from rads.errors import ConfigError, DataFormatError, EmptyInputError
from rads.ingest import MetricRecord, decode_text, emit_canonical_csv
from rads.timeseries import Metric, RawSeries, samples_per_window

logger = logging.getLogger(__name__)

PRELUDE_SECONDS = 3600.0
WINDOW_SECONDS = 60.0
PRESETS = ("attack_test", "spike_test", "figure5_timeline", "media_streaming_normal", "graph_analytics_normal")


@dataclass(frozen=True)
class BaseLoad:
    mean: float
    noise: float
    amplitude: float = 0.0
    period: float | None = None
    phase: float = 0.0
    # Repeat the noise pattern with this period (seconds); None draws fresh noise throughout
    noise_period: float | None = None


@dataclass(frozen=True)
class Spike:
    time: float
    magnitude: float
    duration: float = 5.0


@dataclass(frozen=True)
class Attack:
    start: float
    end: float
    level: float
    jitter: float


@dataclass(frozen=True)
class ScenarioSpec:
    """A scripted workload. Times are seconds from the start of the scenario.

    Windows that start before training_end form the training prelude and get
    no ground-truth label.
    """

    duration: float
    base: BaseLoad
    spikes: tuple[Spike, ...] = ()
    attacks: tuple[Attack, ...] = ()
    seed: int = 0
    sample_interval: float = 5.0
    metric: Metric = Metric.CPU_PERCENT
    vm_id: str = "vm-1"
    window_len: float = WINDOW_SECONDS
    training_end: float = 0.0
    ceiling: float | None = None
    start: float = 0.0

    def __post_init__(self) -> None:
        if self.duration <= 0 or self.sample_interval <= 0:
            raise ConfigError("duration and sample interval must be positive")
        samples_per_window(self.window_len, self.sample_interval)
        if not 0.0 <= self.training_end < self.duration:
            raise ConfigError(f"training_end {self.training_end} outside the scenario")
        envelope = self.base.mean + self.base.noise + abs(self.base.amplitude)
        for spike in self.spikes:
            if spike.time < 0.0 or spike.time + spike.duration > self.duration:
                raise ConfigError(f"spike at {spike.time}s runs past the scenario end")
            if spike.duration > 2 * self.sample_interval:
                raise ConfigError(f"spike at {spike.time}s lasts {spike.duration}s; spikes last at most two samples")
        for attack in self.attacks:
            if not 0.0 <= attack.start < attack.end <= self.duration:
                raise ConfigError(f"attack [{attack.start}, {attack.end}) outside the scenario")
            if attack.level <= envelope:
                raise ConfigError(f"attack level {attack.level} does not clear the normal envelope {envelope}")

    def to_dict(self) -> dict[str, Any]:
        data = asdict(self)
        data["metric"] = self.metric.value
        return data

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> ScenarioSpec:
        try:
            values = dict(data)
            values["base"] = BaseLoad(**values["base"])
            values["spikes"] = tuple(Spike(**s) for s in values.get("spikes", ()))
            values["attacks"] = tuple(Attack(**a) for a in values.get("attacks", ()))
            values["metric"] = Metric(values.get("metric", Metric.CPU_PERCENT))
            return cls(**values)
        except (KeyError, TypeError, ValueError) as e:
            raise ConfigError(f"bad scenario spec ({type(e).__name__}): {e}") from e

    @classmethod
    def from_file(cls, path: Path) -> ScenarioSpec:
        try:
            return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path} is not a JSON scenario spec: {e}") from e


@dataclass(frozen=True)
class TruthWindow:
    window_end: float
    label: Verdict


@dataclass(frozen=True, eq=False)
class LabeledSeries:
    series: RawSeries
    truth: tuple[TruthWindow, ...]
    window_len: float = WINDOW_SECONDS
    training_end: float = field(default=0.0)

    @property
    def training(self) -> RawSeries:
        return self.series.slice_time(end=self.training_end)

    @property
    def anomaly_count(self) -> int:
        return sum(w.label is Verdict.ANOMALY for w in self.truth)


@dataclass(frozen=True)
class MetricProfile:
    mean: float
    noise: float
    spike_magnitude: float
    attack_level: float
    attack_jitter: float
    ceiling: float | None


PROFILES = {
    Metric.CPU_PERCENT: MetricProfile(30.0, 5.0, 65.0, 97.0, 1.0, 100.0),
    Metric.NET_KBPS: MetricProfile(800.0, 100.0, 4000.0, 12000.0, 30.0, None),
}


def generate(spec: ScenarioSpec) -> LabeledSeries:
    """Render a scenario into samples plus per-window ground truth."""
    count = int(round(spec.duration / spec.sample_interval))
    offsets = np.arange(count) * spec.sample_interval
    base = spec.base

    noise_rng = np.random.default_rng([spec.seed, 0])
    if base.noise_period:
        pattern = noise_rng.uniform(-base.noise, base.noise, int(round(base.noise_period / spec.sample_interval)))
        noise = np.resize(pattern, count)
    else:
        noise = noise_rng.uniform(-base.noise, base.noise, count)
    values = base.mean + noise
    if base.period and base.amplitude:
        values += base.amplitude * np.sin(2 * np.pi * (offsets - base.phase) / base.period)

    for spike in spec.spikes:
        values[(offsets >= spike.time) & (offsets < spike.time + spike.duration)] += spike.magnitude

    attack_rng = np.random.default_rng([spec.seed, 1])
    attacked = np.zeros(count, dtype=bool)
    for attack in spec.attacks:
        mask = (offsets >= attack.start) & (offsets < attack.end)
        values[mask] = attack.level + attack_rng.uniform(-attack.jitter, attack.jitter, int(mask.sum()))
        attacked |= mask

    values = np.clip(values, 0.0, spec.ceiling if spec.ceiling is not None else np.inf)
    series = RawSeries(spec.vm_id, spec.metric, spec.start + offsets, values, spec.sample_interval)

    per_window = samples_per_window(spec.window_len, spec.sample_interval)
    first = int(round(spec.training_end / spec.window_len))
    truth = []
    for k in range(first, count // per_window):
        hit = attacked[k * per_window : (k + 1) * per_window].any()
        truth.append(
            TruthWindow(spec.start + (k + 1) * spec.window_len, Verdict.ANOMALY if hit else Verdict.NORMAL)
        )
    logger.debug(
        f"generated {count} samples for {spec.vm_id}/{spec.metric}: "
        f"{len(spec.spikes)} spike(s), {len(spec.attacks)} attack(s), {len(truth)} labelled windows"
    )
    return LabeledSeries(series, tuple(truth), spec.window_len, spec.start + spec.training_end)


def _normal_base(profile: MetricProfile) -> BaseLoad:
    return BaseLoad(mean=profile.mean, noise=profile.noise)


def preset(name: str, *, seed: int = 1, metric: Metric = Metric.CPU_PERCENT) -> ScenarioSpec:
    """Named scenarios.

    attack_test: one hour of normal load, then ten windows of attack that
        starts half-way into the first window.
    spike_test: one hour of normal load, then 30 windows with ten single-sample
        spikes in ten distinct random windows.
    figure5_timeline: 50 minutes of periodic load with a spike at minute 12 and
        an attack filling minute 49.
    media_streaming_normal / graph_analytics_normal: one hour of normal load.
    """
    profile = PROFILES[metric]
    common = dict(seed=seed, metric=metric, ceiling=profile.ceiling)

    if name == "attack_test":
        attack = Attack(PRELUDE_SECONDS + WINDOW_SECONDS / 2, PRELUDE_SECONDS + 600.0, profile.attack_level, profile.attack_jitter)
        return ScenarioSpec(
            duration=PRELUDE_SECONDS + 600.0,
            base=_normal_base(profile),
            attacks=(attack,),
            training_end=PRELUDE_SECONDS,
            **common,
        )

    if name == "spike_test":
        rng = np.random.default_rng([seed, 2])
        windows = np.sort(rng.choice(30, size=10, replace=False))
        positions = rng.integers(0, int(WINDOW_SECONDS // 5.0), size=10)
        spikes = tuple(
            Spike(PRELUDE_SECONDS + w * WINDOW_SECONDS + p * 5.0, profile.spike_magnitude)
            for w, p in zip(windows.tolist(), positions.tolist())
        )
        return ScenarioSpec(
            duration=PRELUDE_SECONDS + 1800.0,
            base=_normal_base(profile),
            spikes=spikes,
            training_end=PRELUDE_SECONDS,
            **common,
        )

    if name == "figure5_timeline":
        # Five-minute periodic load; the phase puts minute 12 at the trough
        base = BaseLoad(
            mean=profile.mean,
            noise=0.1 * profile.noise,
            amplitude=profile.noise,
            period=300.0,
            phase=162.5,
            noise_period=300.0,
        )
        return ScenarioSpec(
            duration=3000.0,
            base=base,
            spikes=(Spike(690.0, 10 * profile.noise),),
            attacks=(Attack(2880.0, 2940.0, profile.attack_level, profile.attack_jitter),),
            **common,
        )

    if name == "media_streaming_normal":
        base = BaseLoad(mean=profile.mean * 1.2, noise=profile.noise, amplitude=profile.noise / 2, period=600.0)
        return ScenarioSpec(duration=PRELUDE_SECONDS, base=base, **common)

    if name == "graph_analytics_normal":
        base = BaseLoad(mean=profile.mean * 1.5, noise=profile.noise * 1.5)
        return ScenarioSpec(duration=PRELUDE_SECONDS, base=base, **common)

    raise ConfigError(f"unknown preset {name!r}; expected one of {', '.join(PRESETS)}")


def background_spec(spec: ScenarioSpec) -> ScenarioSpec:
    """Quiet normal load for the metric a scenario does not exercise."""
    other = Metric.NET_KBPS if spec.metric is Metric.CPU_PERCENT else Metric.CPU_PERCENT
    profile = PROFILES[other]
    return ScenarioSpec(
        duration=spec.duration,
        base=_normal_base(profile),
        seed=spec.seed + 1,
        sample_interval=spec.sample_interval,
        metric=other,
        vm_id=spec.vm_id,
        window_len=spec.window_len,
        ceiling=profile.ceiling,
        start=spec.start,
    )


def scenario_records(spec: ScenarioSpec) -> tuple[list[MetricRecord], LabeledSeries]:
    """Canonical records (both metrics) for a scenario, plus its labelled series."""
    labeled = generate(spec)
    background = generate(background_spec(spec)).series
    by_metric = {spec.metric: labeled.series.values, background.metric: background.values}
    records = [
        MetricRecord(spec.vm_id, float(ts), float(cpu), float(net))
        for ts, cpu, net in zip(
            labeled.series.timestamps, by_metric[Metric.CPU_PERCENT], by_metric[Metric.NET_KBPS]
        )
    ]
    return records, labeled


def emit_truth(truth: tuple[TruthWindow, ...] | list[TruthWindow]) -> str:
    frame = pd.DataFrame(
        [(w.window_end, w.label.value) for w in truth],
        columns=["window_end", "label"],
    )
    return frame.to_csv(index=False, lineterminator="\n")


def parse_truth(data: bytes | str) -> list[TruthWindow]:
    """Read a ``window_end,label`` sidecar.

    Raises:
        EmptyInputError: If it lists no windows.
        DataFormatError: On unknown labels or non-numeric window ends, or bytes that are not UTF-8.
    """
    text = decode_text(data)
    try:
        frame = pd.read_csv(io.StringIO(text), dtype=str)
    except pd.errors.EmptyDataError as e:
        raise EmptyInputError("truth file is empty") from e
    if list(frame.columns) != ["window_end", "label"]:
        raise DataFormatError(f"truth header must be window_end,label, got {','.join(frame.columns)}")
    if frame.empty:
        raise EmptyInputError("truth file lists no windows")
    try:
        return [TruthWindow(float(end), Verdict(label.strip())) for end, label in zip(frame["window_end"], frame["label"])]
    except (TypeError, ValueError) as e:
        raise DataFormatError(f"bad truth row: {e}") from e


def write_scenario(spec: ScenarioSpec, csv_path: Path, truth_path: Path) -> LabeledSeries:
    """Write the canonical CSV and truth sidecar for a scenario."""
    records, labeled = scenario_records(spec)
    if not records:
        raise EmptyInputError("scenario produced no samples")
    Path(csv_path).write_text(emit_canonical_csv(records), encoding="utf-8")
    Path(truth_path).write_text(emit_truth(labeled.truth), encoding="utf-8")
    logger.info(
        f"wrote {len(records)} samples to {csv_path} and {len(labeled.truth)} labelled windows "
        f"({labeled.anomaly_count} anomalous) to {truth_path}"
    )
    return labeled
