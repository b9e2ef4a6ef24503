"""Simulated pilot: list scheduling on a virtual clock, with programmable faults."""

from __future__ import annotations

import heapq
import itertools
import math
import random
import threading
import time
from dataclasses import dataclass, field
from typing import Any, Iterable, Sequence

from ..model import TaskDescription
from .base import (
    Backend,
    BackendEvent,
    InsufficientCores,
    PilotHandle,
    PilotState,
    ResourceRequest,
    Telemetry,
)


@dataclass
class SimConfig:
    queue_wait: float = 0.0
    failure_rate: float = 0.0
    hang_after: int | None = None
    deny_pilots: int = 0
    seed: int = 0
    clock: str = "virtual"
    # real seconds per simulated second when clock == "real"
    time_scale: float = 1.0
    staging_op_cost: float = 0.0
    # virtual clock only moves once submissions have been quiet this long (real seconds)
    quiesce: float = 0.02

    def __post_init__(self) -> None:
        if not 0.0 <= self.failure_rate <= 1.0:
            raise ValueError(f"failure_rate must be in [0, 1], got {self.failure_rate}")
        if self.clock not in ("virtual", "real"):
            raise ValueError(f"clock must be 'virtual' or 'real', got {self.clock!r}")
        if self.queue_wait < 0:
            raise ValueError("queue_wait must be >= 0")
        if self.quiesce < 0:
            raise ValueError("quiesce must be >= 0")


def attempt_fails(seed: int, uid: str, attempt: int, rate: float) -> bool:
    """Failure draw keyed on (seed, uid, attempt), independent of scheduling order."""
    if rate <= 0.0:
        return False
    if rate >= 1.0:
        return True
    return random.Random(f"{seed}|{uid}|{attempt}").random() < rate


@dataclass(frozen=True)
class SimTask:
    uid: str
    cores: int
    duration: float
    attempt: int = 1


@dataclass(frozen=True)
class SimEvent:
    time: float
    kind: str
    uid: str
    attempt: int
    exit_code: int | None = None

    def line(self) -> str:
        code = "" if self.exit_code is None else str(self.exit_code)
        return f"{self.time!r} {self.kind} {self.uid} {self.attempt} {code}".rstrip()


@dataclass(frozen=True)
class SimResult:
    events: tuple[SimEvent, ...]
    makespan: float
    starts: dict[str, float] = field(compare=False, default_factory=dict)

    def log(self) -> bytes:
        return "".join(e.line() + "\n" for e in self.events).encode()

    def failed(self) -> set[str]:
        return {e.uid for e in self.events if e.kind == "exec_end" and e.exit_code}


@dataclass(frozen=True)
class GenerationSchedule:
    generations: tuple[frozenset[str], ...]
    cores: int


def _as_sim_task(t: Any) -> SimTask:
    if isinstance(t, SimTask):
        return t
    if isinstance(t, TaskDescription):
        if t.expected_duration is None:
            raise ValueError(f"task {t.uid} has no expected_duration")
        return SimTask(t.uid, t.cores, t.expected_duration)
    if isinstance(t, dict):
        dur = t.get("expected_duration")
        if dur is None:
            raise ValueError(f"task {t.get('uid')} has no expected_duration")
        return SimTask(t["uid"], int(t.get("cores", 1)), float(dur), int(t.get("attempt", 1)))
    raise TypeError(f"cannot simulate {type(t).__name__}")


class _CorePool:
    """Per-core free times; a k-core task takes the k earliest-free cores."""

    def __init__(self, cores: int, t0: float) -> None:
        self.cores = cores
        self.free = [t0] * cores

    def place(self, need: int, duration: float, not_before: float) -> tuple[float, float]:
        taken = [heapq.heappop(self.free) for _ in range(need)]
        start = max(not_before, taken[-1])
        end = start + duration
        for _ in range(need):
            heapq.heappush(self.free, end)
        return start, end


def simulate_run(tasks: Iterable[Any], cores: int, config: SimConfig | None = None) -> SimResult:
    """Schedule tasks in order on ``cores`` cores and report completions.

    Uniform 1-core tasks run in ``ceil(n / cores)`` generations, so the
    makespan is ``queue_wait + generations * duration``.
    """
    config = config or SimConfig()
    sim = [_as_sim_task(t) for t in tasks]
    for t in sim:
        if t.cores > cores:
            raise InsufficientCores(f"task {t.uid} needs {t.cores} cores, pilot has {cores}")
    pool = _CorePool(cores, config.queue_wait)
    raw: list[tuple[float, int, int, SimEvent]] = []
    starts: dict[str, float] = {}
    for seq, t in enumerate(sim):
        start, end = pool.place(t.cores, t.duration, config.queue_wait)
        code = 1 if attempt_fails(config.seed, t.uid, t.attempt, config.failure_rate) else 0
        starts[t.uid] = start
        # at equal times completions come before starts
        raw.append((start, 1, seq, SimEvent(start, "exec_start", t.uid, t.attempt)))
        raw.append((end, 0, seq, SimEvent(end, "exec_end", t.uid, t.attempt, code)))
    raw.sort(key=lambda r: r[:3])
    events = tuple(r[3] for r in raw)
    makespan = max((e.time for e in events), default=config.queue_wait)
    return SimResult(events, makespan, starts)


def generation_schedule(tasks: Iterable[Any], cores: int) -> GenerationSchedule:
    """Group tasks into waves by start time."""
    result = simulate_run(tasks, cores)
    waves: dict[float, set[str]] = {}
    for uid, t in result.starts.items():
        waves.setdefault(t, set()).add(uid)
    return GenerationSchedule(tuple(frozenset(waves[t]) for t in sorted(waves)), cores)


def uniform_makespan(n: int, cores: int, duration: float, queue_wait: float = 0.0) -> float:
    return queue_wait + math.ceil(n / cores) * duration if n else queue_wait


class FaultProgram:
    """Fault state shared by every instance a run creates, so each fault fires once."""

    def __init__(self, config: SimConfig) -> None:
        self._lock = threading.Lock()
        self.failure_rate = config.failure_rate
        self.hang_after = config.hang_after
        self.deny_pilots = config.deny_pilots
        self.seed = config.seed
        self.completions = 0
        self.hang_fired = False

    def update(self, **mutation: Any) -> None:
        with self._lock:
            for key, value in mutation.items():
                if key not in ("failure_rate", "hang_after", "deny_pilots", "seed"):
                    raise ValueError(f"unknown fault field {key!r}")
                if key == "failure_rate" and not 0.0 <= value <= 1.0:
                    raise ValueError("failure_rate must be in [0, 1]")
                setattr(self, key, value)

    def take_denial(self) -> bool:
        with self._lock:
            if self.deny_pilots > 0:
                self.deny_pilots -= 1
                return True
            return False

    def count_completion(self) -> bool:
        """Record one completion; True if the backend must hang before emitting it."""
        with self._lock:
            if self.hang_after is not None and not self.hang_fired and self.completions >= self.hang_after:
                self.hang_fired = True
                return True
            self.completions += 1
            return False

    def fails(self, uid: str, attempt: int) -> bool:
        return attempt_fails(self.seed, uid, attempt, self.failure_rate)


class SimulatedBackend(Backend):
    name = "sim"
    _pilot_ids = itertools.count(1)

    def __init__(self, instance_id: int, config: SimConfig, faults: FaultProgram | None = None,
                 telemetry: Telemetry | None = None) -> None:
        super().__init__(instance_id)
        self.config = config
        self.faults = faults or FaultProgram(config)
        self.telemetry = telemetry or Telemetry()
        self._cond = threading.Condition()
        self._pending: list[tuple[float, int, int, BackendEvent, int]] = []
        self._seq = itertools.count()
        self._log: list[BackendEvent] = []
        self._known: set[tuple[str, int]] = set()
        self._canceled: set[tuple[str, int]] = set()
        self._pool: _CorePool | None = None
        self.pilot: PilotHandle | None = None
        self.now = 0.0
        self._t0 = time.monotonic()
        self.hung = False
        self.purged = False
        self.staging_time = 0.0
        self._last_submit = float("-inf")

    # -- interface --------------------------------------------------------

    def acquire(self, request: ResourceRequest) -> PilotHandle:
        pid = f"pilot.{next(self._pilot_ids):04d}"
        if self.faults.take_denial():
            return PilotHandle(pid, PilotState.FAILED, request.cores)
        with self._cond:
            self.now += self.config.queue_wait
            self._pool = _CorePool(request.cores, self.now)
            self.pilot = PilotHandle(pid, PilotState.ACTIVE, request.cores, self.now)
            return self.pilot

    def submit(self, batch: list[dict[str, Any]]) -> None:
        with self._cond:
            if self.purged:
                return
            self._last_submit = time.monotonic()
            for payload in batch:
                uid, attempt = payload["uid"], int(payload["attempt"])
                if (uid, attempt) in self._known:
                    continue
                self._known.add((uid, attempt))
                cores = int(payload.get("cores", 1))
                if self.pilot is None or self.pilot.state is not PilotState.ACTIVE or self._pool is None:
                    self._push(self.now, 0, BackendEvent("exec_end", uid, attempt, self.instance_id, self.now,
                                                         reason="pilot-not-active"), 0)
                    continue
                if cores > self.pilot.cores:
                    self._push(self.now, 0, BackendEvent("exec_end", uid, attempt, self.instance_id, self.now,
                                                         reason="insufficient-cores"), 0)
                    continue
                ops = len(payload.get("input_staging", ())) + len(payload.get("output_staging", ()))
                self.staging_time += ops * self.config.staging_op_cost
                duration = float(payload.get("expected_duration") or 0.0)
                start, end = self._pool.place(cores, duration, self.now)
                code = 1 if self.faults.fails(uid, attempt) else 0
                self._push(start, 1, BackendEvent("exec_start", uid, attempt, self.instance_id, start), cores)
                self._push(end, 0, BackendEvent("exec_end", uid, attempt, self.instance_id, end,
                                                exit_code=code), cores)
            self._cond.notify_all()

    def _push(self, t: float, order: int, ev: BackendEvent, cores: int) -> None:
        heapq.heappush(self._pending, (t, order, next(self._seq), ev, cores))

    def _due(self) -> float | None:
        """Virtual time up to which events may be released now."""
        if not self._pending:
            return None
        if self.config.clock == "virtual":
            if time.monotonic() - self._last_submit < self.config.quiesce:
                return None
            return self._pending[0][0]
        return (time.monotonic() - self._t0) / self.config.time_scale

    def _release(self, upto: float) -> None:
        while self._pending and self._pending[0][0] <= upto and not self.hung:
            t, _, _, ev, cores = self._pending[0]
            key = (ev.uid, ev.attempt)
            if ev.kind == "exec_end" and ev.reason is None:
                if key in self._canceled:
                    heapq.heappop(self._pending)
                    continue
                if self.faults.count_completion():
                    self.hung = True
                    break
            heapq.heappop(self._pending)
            self.now = max(self.now, t)
            if ev.kind == "exec_start":
                if key in self._canceled:
                    continue
                self.telemetry.spawned(self.instance_id, ev.uid, ev.attempt, cores)
            elif ev.reason is None:
                self.telemetry.finished(cores)
            self._log.append(ev)

    def events(self, cursor: int, timeout: float = 0.0) -> tuple[list[BackendEvent], int]:
        deadline = time.monotonic() + timeout
        with self._cond:
            while True:
                if cursor < len(self._log):
                    out = self._log[cursor:]
                    return out, len(self._log)
                if not self.hung and not self.purged:
                    due = self._due()
                    if due is not None:
                        self._release(due)
                        if cursor < len(self._log):
                            continue
                left = deadline - time.monotonic()
                if left <= 0:
                    return [], cursor
                wait = left
                if self.config.clock == "virtual" and self._pending and not self.hung:
                    settle = self._last_submit + self.config.quiesce - time.monotonic()
                    wait = max(0.0005, min(left, settle))
                elif self.config.clock == "real" and self._pending and not self.hung:
                    nxt = self._t0 + self._pending[0][0] * self.config.time_scale - time.monotonic()
                    wait = max(0.0, min(left, nxt))
                self._cond.wait(wait)

    def liveness(self) -> bool:
        return not (self.hung or self.purged)

    def cancel(self, uid: str) -> None:
        with self._cond:
            for _, _, _, ev, _ in self._pending:
                if ev.uid == uid and ev.kind == "exec_end":
                    self._canceled.add((uid, ev.attempt))
                    self._log.append(BackendEvent("exec_end", uid, ev.attempt, self.instance_id, self.now,
                                                  canceled=True))
            self._cond.notify_all()

    def purge(self) -> None:
        with self._cond:
            self.purged = True
            self._pending.clear()
            self.telemetry.reset_usage()
            self._cond.notify_all()

    def inject(self, **mutation: Any) -> None:
        self.faults.update(**mutation)
