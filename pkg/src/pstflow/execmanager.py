"""ExecManager: Rmgr, Emgr, RTS Callback and Heartbeat around one backend."""

from __future__ import annotations

import logging
import threading
from dataclasses import dataclass
from typing import Any, Callable

from .backends import Backend, BackendEvent, BackendUnavailable, PilotHandle, PilotState, ResourceRequest
from .broker import MessageEnvelope, decode, encode
from .components import DEAD_LETTER, DONE, PENDING, Change, Component, FatalError, RunContext, SyncClient
from .model import TaskState

log = logging.getLogger(__name__)

LOST = "rts-lost"
NOT_ACTIVE = "pilot-not-active"


class PilotDenied(Exception):
    """No ACTIVE pilot within the retry budget."""


class RtsBudgetSpent(FatalError):
    """The backend died again after its restart budget was used up."""


class PilotLost(FatalError):
    """A restarted backend could not get a pilot."""


@dataclass(frozen=True)
class HeartbeatConfig:
    interval: float = 0.5
    misses_allowed: int = 2

    def __post_init__(self) -> None:
        if not self.interval > 0:
            raise ValueError("heartbeat interval must be > 0")
        if self.misses_allowed < 1:
            raise ValueError("misses_allowed must be >= 1")


def acquire(backend: Backend, request: ResourceRequest, retry_limit: int) -> PilotHandle:
    """Ask for a pilot until one is ACTIVE; ``1 + retry_limit`` attempts in all."""
    last: PilotHandle | None = None
    for attempt in range(1 + retry_limit):
        handle = backend.acquire(request)
        if handle.state is PilotState.ACTIVE:
            return handle
        log.warning("pilot request %d/%d came back %s", attempt + 1, 1 + retry_limit, handle.state.value)
        last = handle
    raise PilotDenied(f"no active pilot after {1 + retry_limit} request(s)"
                      + (f"; last state {last.state.value}" if last else ""))


class RuntimeHandle:
    """The live backend instance and its pilot. Outlives ExecManager restarts."""

    def __init__(self, factory: Callable[[int], Backend], request: ResourceRequest,
                 pilot_retry_limit: int = 3) -> None:
        self.factory = factory
        self.request = request
        self.pilot_retry_limit = pilot_retry_limit
        self.lock = threading.RLock()
        self.instance = 0
        self.backend: Backend | None = None
        self.pilot: PilotHandle | None = None
        self.retired: list[Backend] = []

    def start(self) -> PilotHandle:
        """Rmgr: create an instance and acquire its pilot."""
        with self.lock:
            self.instance += 1
            self.backend = self.factory(self.instance)
            self.pilot = None
            self.pilot = acquire(self.backend, self.request, self.pilot_retry_limit)
            return self.pilot

    def purge(self) -> Backend:
        with self.lock:
            old = self.backend
            if old is not None:
                old.purge()
                self.retired.append(old)
            self.pilot = None
            return old

    def shutdown(self) -> None:
        with self.lock:
            for b in [*self.retired, self.backend]:
                if b is not None:
                    try:
                        b.shutdown()
                    except Exception:  # noqa: BLE001
                        log.exception("backend shutdown failed")


def done_payload(uid: str, attempt: int, exit_code: int | None = None, reason: str | None = None,
                 canceled: bool = False) -> bytes:
    return encode({"uid": uid, "attempt": attempt, "exit_code": exit_code, "reason": reason,
                   "canceled": canceled})


class ExecManager(Component):
    name = "execmanager"

    def __init__(self, ctx: RunContext, incarnation: int = 1) -> None:
        super().__init__(ctx, incarnation)
        cfg = ctx.config
        self.heartbeat = HeartbeatConfig(cfg.heartbeat_interval, cfg.misses_allowed)
        self.submitted = 0

    def start(self) -> None:
        self.emgr_sync = SyncClient(self, "emgr")
        self.cb_sync = SyncClient(self, "callback")
        self.hb_sync = SyncClient(self, "heartbeat")
        self.emgr_cid = self.register("emgr")
        self.spawn(self._emgr_loop, "emgr")
        self.spawn(self._callback_loop, "callback")
        self.spawn(self._heartbeat_loop, "heartbeat")

    # -- Emgr -------------------------------------------------------------

    def _emgr_loop(self) -> None:
        broker = self.ctx.broker
        while not self.stopping:
            self.check()
            envs = broker.consume(PENDING, 256, self.emgr_cid, timeout=0.1)
            if not envs:
                continue
            # take everything already queued so one hand-off covers it
            while len(envs) < 8192:
                more = broker.consume(PENDING, 256, self.emgr_cid)
                if not more:
                    break
                envs.extend(more)
            with self.ctx.profiler.span("execmanager.emgr", "mgmt"):
                self.submit(envs)

    def submit(self, envs: list[MessageEnvelope]) -> int:
        """Tag SUBMITTED, hand to the backend, ack. Returns the hand-off count."""
        broker, store, rts = self.ctx.broker, self.ctx.store, self.ctx.rts
        prof = self.ctx.profiler
        with rts.lock:
            app = store.app
            changes: list[Change] = []
            batch: list[dict[str, Any]] = []
            for env in envs:
                try:
                    doc = decode(env.payload)
                    uid, attempt = str(doc["uid"]), int(doc["attempt"])
                    rec = store.task(uid, app)
                except (ValueError, KeyError, TypeError) as exc:
                    log.error("dead-lettering Pending message (tag %d): %s", env.delivery_tag, exc)
                    broker.publish(DEAD_LETTER, env.payload)
                    continue
                if rec.attempts != attempt:
                    continue
                if rec.state is TaskState.SCHEDULED:
                    changes.append(Change("task", uid, TaskState.SUBMITTED.value, attempt))
                    batch.append(doc)
                elif rec.state is TaskState.SUBMITTED:
                    # a previous incarnation tagged it but may not have handed it over
                    batch.append(doc)
            pilot = rts.pilot
            if batch and (pilot is None or pilot.state is not PilotState.ACTIVE):
                for doc in batch:
                    broker.publish(DONE, done_payload(doc["uid"], doc["attempt"], reason=NOT_ACTIVE),
                                   msg_id=f"done:{doc['uid']}:{doc['attempt']}")
                batch = []
            elif changes:
                results = self.emgr_sync.send(changes)
                rejected = {c.uid for c, ok in zip(changes, results) if not ok}
                batch = [d for d in batch if d["uid"] not in rejected]
            self.check()
            if batch:
                for doc in batch:
                    prof.record("execmanager.emgr", "rts_submit", doc["uid"])
                # time inside the backend is RTS time, not management
                with prof.paused():
                    rts.backend.submit(batch)
                self.submitted += len(batch)
        for env in envs:
            broker.ack(PENDING, env.delivery_tag, self.emgr_cid)
        return len(batch)

    # -- RTS Callback -----------------------------------------------------

    def _callback_loop(self) -> None:
        rts = self.ctx.rts
        cursor, instance = 0, None
        while not self.stopping:
            self.check()
            backend = rts.backend
            if backend is None:
                self._stop.wait(0.05)
                continue
            if backend.instance_id != instance:
                instance, cursor = backend.instance_id, 0
            events, cursor = backend.events(cursor, timeout=0.1)
            if events:
                with self.ctx.profiler.span("execmanager.callback", "mgmt"):
                    self.on_complete(events)

    def on_complete(self, events: list[BackendEvent]) -> int:
        """Report starts, push completions to Done. Returns the Done publish count."""
        broker, store, rts = self.ctx.broker, self.ctx.store, self.ctx.rts
        with rts.lock:
            current = rts.backend.instance_id if rts.backend is not None else None
            app = store.app
            changes: list[Change] = []
            ends: list[BackendEvent] = []
            for ev in events:
                if ev.instance != current:
                    log.debug("dropping event for %s from retired instance %d", ev.uid, ev.instance)
                    continue
                rec = store.task(ev.uid, app) if ev.uid in store.index else None
                if rec is None:
                    log.warning("dropping event for unknown task %s", ev.uid)
                    continue
                if rec.attempts != ev.attempt or rec.state.terminal:
                    continue
                if ev.kind == "exec_start":
                    if rec.state is TaskState.SUBMITTED:
                        changes.append(Change("task", ev.uid, TaskState.EXECUTING.value, ev.attempt))
                else:
                    ends.append(ev)
            if changes:
                self.cb_sync.send(changes)
                self.check()
            for ev in ends:
                broker.publish(DONE, done_payload(ev.uid, ev.attempt, ev.exit_code, ev.reason, ev.canceled),
                               msg_id=f"done:{ev.uid}:{ev.attempt}")
                self.ctx.profiler.record("execmanager.callback", "rts_drain", ev.uid)
            return len(ends)

    # -- Heartbeat --------------------------------------------------------

    def _heartbeat_loop(self) -> None:
        rts = self.ctx.rts
        misses = 0
        while not self.stopping:
            self.check()
            if self._stop.wait(self.heartbeat.interval):
                return
            self.check()
            with rts.lock:
                alive = rts.backend is not None and rts.backend.liveness()
            if alive:
                misses = 0
                continue
            misses += 1
            log.warning("heartbeat missed (%d/%d)", misses, self.heartbeat.misses_allowed)
            if misses >= self.heartbeat.misses_allowed:
                self.heartbeat_and_restart()
                misses = 0

    def heartbeat_and_restart(self) -> None:
        """Purge the dead instance, fail what it held, start a new one."""
        store, broker, rts = self.ctx.store, self.ctx.broker, self.ctx.rts
        limit = self.ctx.config.rts_restart_limit
        if store.snapshot().rts_restarts >= limit:
            raise RtsBudgetSpent(f"backend lost and the restart budget ({limit}) is spent")
        with rts.lock:
            old = rts.purge()
            app = store.app
            lost = [(r.uid, r.attempts) for p in app.pipelines for s in p.stages for r in s.tasks
                    if r.state in (TaskState.SUBMITTED, TaskState.EXECUTING)]
            log.warning("backend instance %d purged; %d task(s) lost", old.instance_id if old else -1, len(lost))
            for uid, attempt in lost:
                broker.publish(DONE, done_payload(uid, attempt, reason=LOST), msg_id=f"done:{uid}:{attempt}")
            self.hb_sync.send_one(Change("rts", "rts", "RESTARTED", rts.instance))
            try:
                rts.start()
            except (PilotDenied, BackendUnavailable) as exc:
                raise PilotLost(str(exc)) from exc


__all__ = [
    "ExecManager", "RuntimeHandle", "HeartbeatConfig", "PilotDenied", "PilotLost",
    "RtsBudgetSpent", "acquire", "done_payload", "ResourceRequest", "PilotHandle", "LOST",
    "NOT_ACTIVE",
]
