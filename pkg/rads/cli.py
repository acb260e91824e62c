"""Command-line surface: simulate, train, detect, run, evaluate and watch."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import threading
import time
from pathlib import Path
from typing import Callable, Sequence

from rads import __version__
from rads.config import MetricSelection, RunConfig, config_from_mapping, load_key_value_file
from rads.detector import AlertSink, OnlineRunner, SampleStream
from rads.errors import ConfigError, EmptyInputError, InsufficientDataError, RadsError
from rads.evaluation import (
    compare_modes,
    format_report_table,
    score_windows,
    trace_fpr,
    trend_share,
    write_report_csv,
)
from rads.ingest import (
    MetricRecord,
    ReplaySplit,
    TraceMapping,
    group_by_vm,
    paced,
    parse_external_trace,
    read_canonical_csv,
    select_vms,
    to_series,
)
from rads.model_store import ModelKey, ModelRecord, ModelStore
from rads.occ import train_occ
from rads.simulator import PRESETS, LabeledSeries, ScenarioSpec, parse_truth, preset, write_scenario
from rads.timeseries import Metric, partition_windows
from rads.wtsa import FeatureMode, build_training_set

logger = logging.getLogger(__name__)

MODE_FLAGS = ("avg", "entropy", "avg-sd")
EXIT_OK = 0
EXIT_USAGE = 2
EXIT_IO = 3


def _common_flags() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    group = common.add_argument_group("run settings")
    group.add_argument("--config", type=Path, help="key=value settings file")
    group.add_argument("--window-len", type=float, help="window length in seconds (default: 12 samples)")
    group.add_argument("--spt", type=float, help="stability period threshold in minutes (default: 30)")
    group.add_argument("--mode", choices=MODE_FLAGS, help="feature mode (default: avg-sd)")
    group.add_argument("--seed", type=int, help="seed for artificial data (default: 0)")
    group.add_argument("--store", type=Path, help="model store directory (RADS_STORE overrides)")
    group.add_argument("--metric", choices=[m.value for m in MetricSelection], help="metrics to analyse")
    group.add_argument("--parallelism", type=int, help="concurrent pipelines (default: CPU count)")
    group.add_argument("-v", "--verbose", action="count", default=0, help="-v for info, -vv for debug")
    return common


def _input_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("input", nargs="?", type=Path, help="canonical CSV (vm_id,timestamp,cpu_percent,net_kbps)")
    parser.add_argument("--trace", type=Path, nargs="+", help="external per-VM trace files (one VM per file)")
    parser.add_argument("--mapping", type=Path, help="key=value column mapping for --trace")
    parser.add_argument("--speed", type=float, help="replay at this multiple of real time (default: as fast as possible)")


def build_parser() -> argparse.ArgumentParser:
    common = _common_flags()
    parser = argparse.ArgumentParser(prog="rads", description="Real-time VM-level anomaly detection")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    commands = parser.add_subparsers(dest="command", required=True)

    simulate = commands.add_parser("simulate", parents=[common], help="write a synthetic scenario and its truth file")
    source = simulate.add_mutually_exclusive_group(required=True)
    source.add_argument("--preset", choices=PRESETS)
    source.add_argument("--spec", type=Path, help="JSON scenario spec")
    simulate.add_argument("--out", type=Path, default=Path("scenario.csv"))
    simulate.add_argument("--truth", type=Path, help="truth sidecar (default: <out>.truth.csv)")
    simulate.set_defaults(handler=cmd_simulate)

    train = commands.add_parser("train", parents=[common], help="train models from a CSV into the store")
    train.add_argument("input", type=Path)
    train.set_defaults(handler=cmd_train)

    detect = commands.add_parser("detect", parents=[common], help="classify each VM's latest window with stored models")
    detect.add_argument("input", type=Path)
    detect.set_defaults(handler=cmd_detect)

    run = commands.add_parser("run", parents=[common], help="online detection with the training optimiser")
    _input_flags(run)
    run.add_argument("--alert-out", type=Path, help="append alert JSON lines here (default: stdout)")
    run.set_defaults(handler=cmd_run)

    evaluate = commands.add_parser("evaluate", parents=[common], help="score feature modes against ground truth")
    evaluate.add_argument("--case", nargs=2, action="append", metavar=("CSV", "TRUTH"), type=Path, default=[])
    evaluate.add_argument("--trace", type=Path, nargs="+", help="external traces to score for false positives")
    evaluate.add_argument("--mapping", type=Path, help="key=value column mapping for --trace")
    evaluate.add_argument("--train-minutes", type=float, default=60.0 * 24 * 7)
    evaluate.add_argument("--test-minutes", type=float, default=60.0 * 24 * 7)
    evaluate.add_argument("--modes", default=",".join(MODE_FLAGS), help="comma-separated modes to compare")
    evaluate.add_argument("--report-csv", type=Path)
    evaluate.set_defaults(handler=cmd_evaluate)

    watch = commands.add_parser("watch", parents=[common], help="live terminal monitor over an online run")
    _input_flags(watch)
    watch.set_defaults(handler=cmd_watch)
    return parser


def _configure_logging(verbosity: int) -> None:
    level = logging.WARNING if verbosity <= 0 else logging.INFO if verbosity == 1 else logging.DEBUG
    logging.basicConfig(level=level, stream=sys.stderr, format="%(asctime)s %(levelname)s %(name)s: %(message)s")


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Defaults, then --config file, then flags, then the environment."""
    config = RunConfig()
    if args.config is not None:
        config = config_from_mapping(load_key_value_file(args.config), config)
    config = config.with_overrides(
        window_len=args.window_len,
        spt_minutes=args.spt,
        mode=FeatureMode.from_flag(args.mode) if args.mode else None,
        seed=args.seed,
        store=args.store,
        metric=MetricSelection(args.metric) if args.metric else None,
        parallelism=args.parallelism,
        speed=getattr(args, "speed", None),
    )
    return config.with_environment()


def _require_store(config: RunConfig) -> ModelStore:
    if config.store is None:
        raise ConfigError("no model store: pass --store or set RADS_STORE")
    return ModelStore(config.store)


def _read_records(path: Path) -> dict[str, list[MetricRecord]]:
    grouped = group_by_vm(read_canonical_csv(path))
    if not grouped:
        raise EmptyInputError(f"{path} has no samples")
    return grouped


def _read_traces(paths: Sequence[Path], mapping_path: Path | None) -> dict[str, list[MetricRecord]]:
    if mapping_path is None:
        raise ConfigError("--trace needs --mapping")
    mapping = TraceMapping.from_file(mapping_path)
    return {path.stem: parse_external_trace(path.read_bytes(), mapping, path.stem) for path in paths}


def _load_streams(
    args: argparse.Namespace, config: RunConfig, *, sleep: Callable[[float], object] = time.sleep
) -> list[SampleStream]:
    if args.trace:
        grouped = _read_traces(args.trace, args.mapping)
    elif args.input is not None:
        grouped = _read_records(args.input)
    else:
        raise ConfigError("give an input CSV or --trace files")
    streams = []
    for records in grouped.values():
        for metric in config.metric.metrics:
            series = to_series(records, metric)
            pairs = list(zip(series.timestamps.tolist(), series.values.tolist()))
            samples = paced(pairs, config.speed, sleep)
            streams.append(SampleStream(series.vm_id, metric, series.sample_interval, samples))
    return streams


def _single_metric(config: RunConfig) -> Metric:
    return Metric.NET_KBPS if config.metric is MetricSelection.NET else Metric.CPU_PERCENT


def cmd_simulate(args: argparse.Namespace, config: RunConfig) -> int:
    if args.spec is not None:
        spec = ScenarioSpec.from_file(args.spec)
    else:
        spec = preset(args.preset, seed=config.seed, metric=_single_metric(config))
    truth_path = args.truth or args.out.with_suffix(".truth.csv")
    labeled = write_scenario(spec, args.out, truth_path)
    print(f"{args.out}: {len(labeled.series)} samples; {truth_path}: {len(labeled.truth)} windows, "
          f"{labeled.anomaly_count} anomalous")
    return EXIT_OK


def cmd_train(args: argparse.Namespace, config: RunConfig) -> int:
    store = _require_store(config)
    for vm_id, records in _read_records(args.input).items():
        for metric in config.metric.metrics:
            series = to_series(records, metric)
            window_len = config.resolve_window_len(series.sample_interval)
            matrix = build_training_set(series, config.mode, window_len, entropy_scope=config.entropy_scope)
            model = train_occ(matrix, config.seed, reference_spread=config.reference_spread)
            version = store.save_model(
                ModelRecord(ModelKey(vm_id, metric, config.mode), model, {"status": "trained"}, time.time())
            )
            print(f"{vm_id} {metric} {config.mode.flag} v{version} ({len(matrix.real)} windows)")
    return EXIT_OK


def cmd_detect(args: argparse.Namespace, config: RunConfig) -> int:
    store = _require_store(config)
    for vm_id, records in _read_records(args.input).items():
        for metric in config.metric.metrics:
            series = to_series(records, metric)
            record = store.require(ModelKey(vm_id, metric, config.mode))
            windows = partition_windows(series, config.resolve_window_len(series.sample_interval))
            if not windows:
                raise InsufficientDataError(f"{vm_id}/{metric}: no complete window to classify")
            result = score_windows(record.model, windows[-1:], series)[0]
            print(json.dumps({
                "timestamp": result.window_end,
                "vm_id": vm_id,
                "metric": metric.value,
                "verdict": result.verdict.value,
                "model_version": record.version,
            }))
    return EXIT_OK


def cmd_run(args: argparse.Namespace, config: RunConfig) -> int:
    streams = _load_streams(args, config)
    store = ModelStore(config.store) if config.store is not None else None
    sink = AlertSink(args.alert_out)
    try:
        results = OnlineRunner(config, store=store, listeners=[sink]).run(streams)
    finally:
        sink.close()
    logger.info(f"scored {len(results)} windows across {len(streams)} stream(s); {sink.count} alert(s)")
    return EXIT_OK


def _parse_modes(text: str) -> list[FeatureMode]:
    modes = [FeatureMode.from_flag(part.strip()) for part in text.split(",") if part.strip()]
    if not modes:
        raise ConfigError("--modes lists no modes")
    return list(dict.fromkeys(modes))


def _load_case(csv_path: Path, truth_path: Path, config: RunConfig) -> LabeledSeries:
    metric = _single_metric(config)
    truth = parse_truth(truth_path.read_bytes())
    series = to_series(read_canonical_csv(csv_path), metric)
    window_len = config.resolve_window_len(series.sample_interval)
    training_end = min(w.window_end for w in truth) - window_len
    return LabeledSeries(series, tuple(truth), window_len, training_end)


def cmd_evaluate(args: argparse.Namespace, config: RunConfig) -> int:
    modes = _parse_modes(args.modes)
    if not args.case and not args.trace:
        raise ConfigError("give at least one --case CSV TRUTH or --trace files")

    if args.case:
        cases = [_load_case(csv_path, truth_path, config) for csv_path, truth_path in args.case]
        reports = compare_modes(cases, modes, config)
        print(format_report_table(reports))
        if args.report_csv is not None:
            write_report_csv(reports, args.report_csv)

    if args.trace:
        grouped = _read_traces(args.trace, args.mapping)
        split = ReplaySplit(args.train_minutes * 60.0, args.test_minutes * 60.0)
        for metric in config.metric.metrics:
            series = {vm: to_series(records, metric) for vm, records in grouped.items()}
            selection = select_vms({vm: {metric: s} for vm, s in series.items()})
            chosen = selection.cpu if metric is Metric.CPU_PERCENT else selection.net
            per_vm = trace_fpr({vm: series[vm] for vm in chosen}, split, modes, config)
            for vm_id, reports in per_vm.items():
                print(f"{vm_id} {metric}")
                print(format_report_table(reports))
            print(f"{metric}: avg-sd FPR <= avg FPR on {trend_share(per_vm):.0%} of {len(per_vm)} VM(s)")
    return EXIT_OK


def cmd_watch(args: argparse.Namespace, config: RunConfig) -> int:
    from rads.monitor import RadsMonitor

    stop = threading.Event()
    streams = _load_streams(args, config, sleep=stop.wait)
    store = ModelStore(config.store) if config.store is not None else None
    RadsMonitor(streams, config, store=store, stop_event=stop).run()
    return EXIT_OK


def run_cli(argv: Sequence[str] | None = None) -> int:
    """Parse argv, dispatch, and map failures to exit codes."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else EXIT_USAGE
    _configure_logging(args.verbose)

    handler: Callable[[argparse.Namespace, RunConfig], int] = args.handler
    try:
        return handler(args, resolve_config(args))
    except RadsError as e:
        print(f"rads: error: {e}", file=sys.stderr)
        return e.exit_code
    except OSError as e:
        print(f"rads: error: {e}", file=sys.stderr)
        return EXIT_IO
