"""Live terminal monitor over an online run."""

from __future__ import annotations

import logging
import threading
from functools import lru_cache
from typing import Iterable, Sequence

from pyfiglet import Figlet
from textual import work
from textual.app import App, ComposeResult
from textual.containers import Horizontal, Vertical
from textual.widgets import DataTable, Footer, Header, RichLog, Static

from rads.config import RunConfig
from rads.detector import DetectionResult, OnlineRunner, RunListener, SampleStream, TrainingEvent, Verdict
from rads.model_store import ModelStore

logger = logging.getLogger(__name__)

PIPELINE_COLUMNS = ("pipeline", "status", "stable min", "model", "windows", "last verdict", "alerts")


def row_key(vm_id: str, metric: str) -> str:
    return f"{vm_id}:{metric}"


def status_row(
    vm_id: str,
    metric: str,
    *,
    status: str = "first_run",
    stability_period: float = 0.0,
    model_version: int = 0,
    windows: int = 0,
    last_verdict: Verdict | None = None,
    alerts: int = 0,
) -> tuple[str, ...]:
    """Cells of one pipeline row in the status table."""
    return (
        row_key(vm_id, metric),
        status,
        f"{stability_period:g}",
        f"v{model_version}" if model_version else "-",
        str(windows),
        last_verdict.value if last_verdict is not None else "-",
        str(alerts),
    )


class _PipelineView:
    """What the table shows for one pipeline; updated on the UI thread."""

    def __init__(self, vm_id: str, metric: str):
        self.vm_id = vm_id
        self.metric = metric
        self.status = "first_run"
        self.stability_period = 0.0
        self.model_version = 0
        self.windows = 0
        self.last_verdict: Verdict | None = None
        self.alerts = 0

    def apply_result(self, result: DetectionResult) -> None:
        self.windows += 1
        self.last_verdict = result.verdict
        self.alerts += result.alert_emitted

    def apply_event(self, event: TrainingEvent) -> None:
        self.status = event.status.value
        self.stability_period = event.stability_period
        self.model_version = event.model_version

    def row(self) -> tuple[str, ...]:
        return status_row(
            self.vm_id,
            self.metric,
            status=self.status,
            stability_period=self.stability_period,
            model_version=self.model_version,
            windows=self.windows,
            last_verdict=self.last_verdict,
            alerts=self.alerts,
        )


def run_summary(views: Iterable[_PipelineView]) -> str:
    """One-line totals shown under the banner."""
    views = list(views)
    trained = sum(v.status == "completed" for v in views)
    windows = sum(v.windows for v in views)
    alerts = sum(v.alerts for v in views)
    return f"{len(views)} pipeline(s) | {trained} trained | {windows} windows | {alerts} alert(s)"


@lru_cache(maxsize=4)
def banner_text(font: str = "small") -> str:
    return Figlet(font=font).renderText("RADS").rstrip()


class _Forwarder(RunListener):
    def __init__(self, app: RadsMonitor):
        self.app = app

    def on_result(self, result: DetectionResult) -> None:
        self.app.call_from_thread(self.app.show_result, result)

    def on_event(self, event: TrainingEvent) -> None:
        self.app.call_from_thread(self.app.show_event, event)


class RadsMonitor(App):
    """Pipeline status table and alert log for a running detector."""

    TITLE = "RADS"
    THEME = "tokyo-night"
    CSS = """
    #pipelines-panel {
        width: 3fr;
    }

    #banner {
        height: auto;
        color: #f7768e;
        text-style: bold;
        padding: 0 1;
    }

    #alerts-panel {
        width: 2fr;
        border-left: solid #6c7086;
    }

    .panel-header {
        text-style: bold;
        color: #9ece6a;
        padding: 0 1;
    }
    """
    BINDINGS = [
        ("q", "quit", "Quit"),
    ]

    def __init__(
        self,
        streams: Sequence[SampleStream],
        config: RunConfig,
        *,
        store: ModelStore | None = None,
        stop_event: threading.Event | None = None,
    ):
        super().__init__()
        self.stop_event = stop_event or threading.Event()
        self.streams = list(streams)
        self.config = config
        self.store = store
        self.views: dict[str, _PipelineView] = {}
        self.summary = run_summary(())

    def compose(self) -> ComposeResult:
        yield Header()
        yield Horizontal(
            Vertical(
                Static(banner_text(), id="banner", markup=False),
                Static("Pipelines", classes="panel-header"),
                DataTable(id="pipelines", cursor_type="row"),
                id="pipelines-panel",
            ),
            Vertical(
                Static("Alerts", classes="panel-header"),
                RichLog(id="alerts", markup=True, wrap=True),
                id="alerts-panel",
            ),
        )
        yield Footer()

    def on_mount(self) -> None:
        table = self.query_one("#pipelines", DataTable)
        table.add_columns(*PIPELINE_COLUMNS)
        for stream in self.streams:
            view = _PipelineView(stream.vm_id, stream.metric.value)
            key = row_key(view.vm_id, view.metric)
            self.views[key] = view
            table.add_row(*view.row(), key=key)
        self._refresh_banner()
        self.sub_title = f"{len(self.streams)} pipeline(s), mode {self.config.mode.flag}"
        self.run_detector()

    @work(thread=True, exclusive=True)
    def run_detector(self) -> None:
        runner = OnlineRunner(
            self.config, store=self.store, listeners=[_Forwarder(self)], stop_event=self.stop_event
        )
        results = runner.run(self.streams)
        if self.stop_event.is_set():
            logger.info(f"detector stopped after {len(results)} windows")
            return
        self.call_from_thread(self.notify, f"Run finished: {len(results)} windows scored")

    def on_unmount(self) -> None:
        self.stop_event.set()

    async def action_quit(self) -> None:
        self.stop_event.set()
        self.exit()

    def _refresh_banner(self) -> None:
        self.summary = run_summary(self.views.values())
        self.query_one("#banner", Static).update(f"{banner_text()}\n{self.summary}")

    def _refresh_row(self, key: str) -> None:
        table = self.query_one("#pipelines", DataTable)
        for column, value in zip(table.columns.keys(), self.views[key].row()):
            table.update_cell(key, column, value)
        self._refresh_banner()

    def show_result(self, result: DetectionResult) -> None:
        key = row_key(result.vm_id, result.metric.value)
        self.views[key].apply_result(result)
        self._refresh_row(key)
        if result.alert_emitted:
            self.query_one("#alerts", RichLog).write(
                f"[bold red]ALERT[/] {result.vm_id} {result.metric} window ending {result.window_end:g}"
            )

    def show_event(self, event: TrainingEvent) -> None:
        key = row_key(event.vm_id, event.metric.value)
        self.views[key].apply_event(event)
        self._refresh_row(key)
        if event.retrained:
            self.query_one("#alerts", RichLog).write(
                f"[dim]minute {event.minute:g}: {key} retrained (model v{event.model_version})[/]"
            )
