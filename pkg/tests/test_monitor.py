import asyncio
import threading

from textual.widgets import DataTable, RichLog

from rads.config import RunConfig
from rads.detector import SampleStream, Verdict
from rads.monitor import PIPELINE_COLUMNS, RadsMonitor, _PipelineView, banner_text, run_summary, status_row
from rads.simulator import generate, preset
from rads.timeseries import Metric


def test_status_row():
    row = status_row("vm-1", "cpu_percent", status="stopped", stability_period=10.0, model_version=2,
                     windows=14, last_verdict=Verdict.NORMAL, alerts=0)
    assert row == ("vm-1:cpu_percent", "stopped", "10", "v2", "14", "normal", "0")
    assert len(row) == len(PIPELINE_COLUMNS)


def test_untrained_row_shows_placeholders():
    assert status_row("vm-2", "net_kbps")[3:6] == ("-", "0", "-")


def test_banner_renders():
    lines = banner_text().splitlines()
    assert len(lines) > 1
    assert all(isinstance(line, str) for line in lines)


def test_run_summary_totals_every_pipeline():
    done = _PipelineView("vm-1", "cpu_percent")
    done.status, done.windows, done.alerts = "completed", 45, 1
    busy = _PipelineView("vm-2", "cpu_percent")
    busy.windows = 7

    assert run_summary([done, busy]) == "2 pipeline(s) | 1 trained | 52 windows | 1 alert(s)"
    assert run_summary([]) == "0 pipeline(s) | 0 trained | 0 windows | 0 alert(s)"


def test_monitor_follows_an_online_run():
    series = generate(preset("figure5_timeline")).series

    async def scenario():
        app = RadsMonitor([SampleStream.from_series(series)], RunConfig(parallelism=1))
        async with app.run_test(size=(140, 40)) as pilot:
            await app.workers.wait_for_complete()
            await pilot.pause()
            view = app.views["vm-1:cpu_percent"]
            table = app.query_one("#pipelines", DataTable)
            log = app.query_one("#alerts", RichLog)
            return view, table.row_count, len(log.lines), app.summary

    view, rows, log_lines, summary = asyncio.run(scenario())
    assert rows == 1
    assert view.status == "completed"
    assert view.model_version == 2
    assert view.alerts == 1
    assert view.windows == 45
    assert log_lines >= 3
    assert summary == "1 pipeline(s) | 1 trained | 45 windows | 1 alert(s)"


def test_quitting_stops_the_detector():
    stop = threading.Event()
    held = threading.Event()

    def endless():
        t = 0.0
        while True:
            held.wait(0.05)
            yield t, 30.0
            t += 5.0

    async def scenario():
        app = RadsMonitor(
            [SampleStream("vm-1", Metric.CPU_PERCENT, 5.0, endless())], RunConfig(parallelism=1), stop_event=stop
        )
        async with app.run_test(size=(140, 40)) as pilot:
            await pilot.pause()
            await pilot.press("q")
            await app.workers.wait_for_complete()

    asyncio.run(scenario())
    assert stop.is_set()
