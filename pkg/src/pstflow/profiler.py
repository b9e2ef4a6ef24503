"""Timestamped component events and the seven-way overhead breakdown.

Span metrics come from start/end marker pairs matched per
``(component, metric, uid)``:

==================  =======================================
metric              markers
==================  =======================================
entk_setup          setup_start / setup_end
entk_management     mgmt_start / mgmt_end
entk_teardown       teardown_start / teardown_end
rts_teardown        rts_teardown_start / rts_teardown_end
data_staging        staging_start / staging_end (per task)
task_execution      exec_start / exec_end (per task)
==================  =======================================

``task_execution`` is the span from the first exec_start to the last
exec_end. ``rts_overhead`` is bracketed by the point markers rts_submit and
rts_drain: first submission to first exec_start, plus last exec_end to the
last completion drained from the runtime.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import threading
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable

log = logging.getLogger(__name__)

SPAN_METRICS = {
    "setup": "entk_setup",
    "mgmt": "entk_management",
    "teardown": "entk_teardown",
    "rts_teardown": "rts_teardown",
    "staging": "data_staging",
    "exec": "task_execution",
}
POINT_EVENTS = frozenset({"rts_submit", "rts_drain"})
VOCABULARY = frozenset(
    {f"{base}_{edge}" for base in SPAN_METRICS for edge in ("start", "end")} | POINT_EVENTS
)
CSV_HEADER = ("timestamp", "component", "event", "uid")

LEGEND = (
    ("entk_setup", "Setup Overhead"),
    ("entk_management", "Management Overhead"),
    ("entk_teardown", "Tear-Down Overhead"),
    ("rts_overhead", "RTS Overhead"),
    ("rts_teardown", "RTS Tear-Down Overhead"),
    ("data_staging", "Data Staging Duration"),
    ("task_execution", "Task Execution Time"),
)


class UnpairedMarker(ValueError):
    def __init__(self, name: str, detail: str = "") -> None:
        self.name = name
        super().__init__(f"unpaired marker {name!r}" + (f": {detail}" if detail else ""))


class ProfileFormatError(ValueError):
    pass


@dataclass(frozen=True)
class ProfileEvent:
    timestamp: float
    component: str
    event: str
    uid: str = ""


@dataclass(frozen=True)
class OverheadReport:
    entk_setup: float = 0.0
    entk_management: float = 0.0
    entk_teardown: float = 0.0
    rts_overhead: float = 0.0
    rts_teardown: float = 0.0
    data_staging: float = 0.0
    task_execution: float = 0.0
    task_durations: dict[str, float] = field(default_factory=dict, compare=False)

    def to_dict(self, durations: bool = False) -> dict:
        doc = asdict(self)
        if not durations:
            doc.pop("task_durations")
        return doc

    def format_table(self) -> str:
        width = max(len(label) for _, label in LEGEND)
        lines = [f"{'metric':<{width}}  seconds", f"{'-' * width}  -------"]
        for key, label in LEGEND:
            lines.append(f"{label:<{width}}  {getattr(self, key):9.3f}")
        return "\n".join(lines)


class Profiler:
    """Bounded in-memory event buffer with an optional CSV sink.

    When disabled every call is a no-op. Past ``capacity`` events are dropped
    and counted, and the profile is flagged invalid.
    """

    def __init__(self, path: str | Path | None = None, *, enabled: bool = True,
                 capacity: int = 2_000_000) -> None:
        self.enabled = enabled
        self.path = Path(path) if path is not None else None
        self.capacity = capacity
        self.dropped = 0
        self._events: list[ProfileEvent] = []
        self._flushed = 0
        self._lock = threading.Lock()
        self._last: dict[str, float] = {}
        self._local = threading.local()
        if self.enabled and self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "w", newline="") as fh:
                csv.writer(fh).writerow(CSV_HEADER)

    @property
    def valid(self) -> bool:
        return self.dropped == 0

    def record(self, component: str, event: str, uid: str = "", timestamp: float | None = None) -> None:
        if not self.enabled:
            return
        if event not in VOCABULARY:
            raise ValueError(f"unknown profile event {event!r}")
        with self._lock:
            ts = time.monotonic() if timestamp is None else timestamp
            # per-component monotonicity
            last = self._last.get(component)
            if last is not None and ts < last:
                ts = last
            self._last[component] = ts
            if len(self._events) >= self.capacity:
                self.dropped += 1
                return
            self._events.append(ProfileEvent(ts, component, event, uid))

    def span(self, component: str, base: str, uid: str = "") -> "_Span":
        return _Span(self, component, base, uid)

    def paused(self) -> "_Pause":
        """Leave the current thread's open span while blocked on another component."""
        return _Pause(self)

    def events(self) -> list[ProfileEvent]:
        with self._lock:
            return list(self._events)

    def flush(self) -> None:
        if not self.enabled or self.path is None:
            return
        with self._lock:
            pending = self._events[self._flushed:]
            self._flushed = len(self._events)
        with open(self.path, "a", newline="") as fh:
            w = csv.writer(fh)
            for e in pending:
                w.writerow((repr(e.timestamp), e.component, e.event, e.uid))


class _Span:
    __slots__ = ("prof", "component", "base", "uid", "outer")

    def __init__(self, prof: Profiler, component: str, base: str, uid: str) -> None:
        self.prof, self.component, self.base, self.uid = prof, component, base, uid
        self.outer: _Span | None = None

    def __enter__(self) -> "_Span":
        self.prof.record(self.component, f"{self.base}_start", self.uid)
        self.outer = getattr(self.prof._local, "span", None)
        self.prof._local.span = self
        return self

    def __exit__(self, *exc) -> None:
        self.prof._local.span = self.outer
        self.prof.record(self.component, f"{self.base}_end", self.uid)


class _Pause:
    """Closes the calling thread's innermost span for the duration of a wait."""

    __slots__ = ("prof", "span")

    def __init__(self, prof: Profiler) -> None:
        self.prof = prof
        self.span: _Span | None = None

    def __enter__(self) -> None:
        self.span = getattr(self.prof._local, "span", None)
        if self.span is not None:
            self.prof.record(self.span.component, f"{self.span.base}_end", self.span.uid)

    def __exit__(self, *exc) -> None:
        if self.span is not None:
            self.prof.record(self.span.component, f"{self.span.base}_start", self.span.uid)


def read_profile(source: str | Path | io.TextIOBase) -> list[ProfileEvent]:
    """Parse a profile CSV. Unknown event names are skipped with a warning."""
    if isinstance(source, (str, Path)):
        text = Path(source).read_text()
    else:
        text = source.read()
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or tuple(rows[0]) != CSV_HEADER:
        raise ProfileFormatError(f"missing header {','.join(CSV_HEADER)}")
    out = []
    unknown: set[str] = set()
    for i, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != 4:
            raise ProfileFormatError(f"line {i}: expected 4 fields, got {len(row)}")
        ts, comp, ev, uid = row
        if ev not in VOCABULARY:
            unknown.add(ev)
            continue
        try:
            out.append(ProfileEvent(float(ts), comp, ev, uid))
        except ValueError:
            raise ProfileFormatError(f"line {i}: bad timestamp {ts!r}") from None
    if unknown:
        log.warning("ignoring unknown profile events: %s", ", ".join(sorted(unknown)))
    return out


def _pair_spans(events: Iterable[ProfileEvent]) -> dict[str, list[tuple[str, float, float]]]:
    open_: dict[tuple[str, str, str], list[float]] = {}
    spans: dict[str, list[tuple[str, float, float]]] = {b: [] for b in SPAN_METRICS}
    for e in events:
        if e.event in POINT_EVENTS:
            continue
        base, edge = e.event.rsplit("_", 1)
        key = (e.component, base, e.uid)
        if edge == "start":
            open_.setdefault(key, []).append(e.timestamp)
        else:
            stack = open_.get(key)
            if not stack:
                raise UnpairedMarker(e.event, f"no matching {base}_start ({e.component}, {e.uid!r})")
            start = stack.pop(0)
            spans[base].append((e.uid, start, e.timestamp))
    for (comp, base, uid), stack in open_.items():
        if stack:
            raise UnpairedMarker(f"{base}_start", f"no matching {base}_end ({comp}, {uid!r})")
    return spans


def compute_overheads(events: Iterable[ProfileEvent]) -> OverheadReport:
    """Pure function of the event log."""
    evs = sorted(events, key=lambda e: e.timestamp)
    spans = _pair_spans(evs)

    def total(base: str) -> float:
        return sum(end - start for _, start, end in spans[base])

    execs = spans["exec"]
    if execs:
        first_start = min(s for _, s, _ in execs)
        last_end = max(e for _, _, e in execs)
        task_execution = last_end - first_start
    else:
        first_start = last_end = None
        task_execution = 0.0
    durations: dict[str, float] = {}
    for uid, s, e in execs:
        durations[uid] = durations.get(uid, 0.0) + (e - s)

    rts = 0.0
    submits = [e.timestamp for e in evs if e.event == "rts_submit"]
    drains = [e.timestamp for e in evs if e.event == "rts_drain"]
    if execs and submits:
        rts += max(0.0, first_start - min(submits))
    if execs and drains:
        rts += max(0.0, max(drains) - last_end)

    return OverheadReport(
        entk_setup=total("setup"),
        entk_management=total("mgmt"),
        entk_teardown=total("teardown"),
        rts_overhead=rts,
        rts_teardown=total("rts_teardown"),
        data_staging=total("staging"),
        task_execution=task_execution,
        task_durations=durations,
    )


def report_json(report: OverheadReport) -> str:
    return json.dumps(report.to_dict(), indent=2, sort_keys=True)
