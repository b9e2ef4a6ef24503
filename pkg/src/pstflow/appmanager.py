"""AppManager: owns the state, runs the Synchronizer, supervises the rest."""

from __future__ import annotations

import itertools
import json
import logging
import shutil
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .backends import (
    Backend,
    BackendUnavailable,
    FaultProgram,
    LocalBackend,
    ResourceRequest,
    SimConfig,
    SimulatedBackend,
    Telemetry,
)
from .broker import Broker, decode, encode
from .components import (
    Component,
    RunContext,
    SYNC_SENDERS,
    ack_queue,
    all_queues,
    sync_queue,
)
from .config import RunConfig
from .execmanager import ExecManager, PilotDenied, PilotLost, RtsBudgetSpent, RuntimeHandle
from .model import AppDescription, TaskState, iter_tasks, validate_application
from .profiler import OverheadReport, Profiler, UnpairedMarker, compute_overheads
from .state import (
    Checkpoint,
    FileJournal,
    GlobalState,
    StateStore,
    SyncMessage,
    load_checkpoint,
    recover,
)
from .wfprocessor import WFProcessor

log = logging.getLogger(__name__)


class ValidationFailed(Exception):
    """The application or resource request is unusable; nothing was started."""

    def __init__(self, problems: list[str]) -> None:
        super().__init__("; ".join(problems))
        self.problems = problems


class RunAborted(Exception):
    """A run stopped before completion. ``report`` holds the state reached."""

    status = "ABORTED"

    def __init__(self, message: str, report: "RunReport | None" = None) -> None:
        super().__init__(message)
        self.report = report


class ResourceAcquisitionFailed(RunAborted):
    pass


class RestartBudgetExhausted(RunAborted):
    pass


class RtsRestartBudgetExhausted(RunAborted):
    pass


class Aborted(RunAborted):
    pass


class Crashed(RunAborted):
    status = "CRASHED"


# --------------------------------------------------------------------------
# report


@dataclass
class RunReport:
    status: str
    task_states: dict[str, str]
    attempts: dict[str, int]
    reasons: dict[str, str | None]
    stage_states: dict[str, str]
    pipeline_states: dict[str, str]
    overheads: OverheadReport | None
    rts_restarts: int = 0
    component_restarts: dict[str, int] = field(default_factory=dict)
    txn_seq: int = 0
    profile_valid: bool = True
    spawns: dict[str, int] = field(default_factory=dict)
    error: str | None = None
    workdir: str | None = None
    profile_path: str | None = None
    checkpoint_path: str | None = None
    journal_path: str | None = None
    wall_time: float = 0.0
    # simulated backend only: virtual clock at the end of the run and staging time
    sim_makespan: float | None = None
    sim_staging: float | None = None

    @property
    def total_attempts(self) -> int:
        return sum(self.attempts.values())

    def uids_in(self, state: str) -> set[str]:
        return {u for u, s in self.task_states.items() if s == state}

    @property
    def ok(self) -> bool:
        return self.status == "DONE"

    def to_dict(self) -> dict[str, Any]:
        d = {k: getattr(self, k) for k in (
            "status", "error", "task_states", "attempts", "reasons", "stage_states", "pipeline_states",
            "rts_restarts", "component_restarts", "txn_seq", "profile_valid", "spawns", "workdir",
            "profile_path", "checkpoint_path", "journal_path", "wall_time", "sim_makespan", "sim_staging")}
        d["total_attempts"] = self.total_attempts
        d["overheads"] = self.overheads.to_dict() if self.overheads else None
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def summary(self) -> str:
        counts: dict[str, int] = {}
        for s in self.task_states.values():
            counts[s] = counts.get(s, 0) + 1
        lines = [
            f"status: {self.status}" + (f" ({self.error})" if self.error else ""),
            "tasks: " + ", ".join(f"{n} {s}" for s, n in sorted(counts.items())),
            f"attempts: {self.total_attempts}   rts restarts: {self.rts_restarts}   "
            f"component restarts: {sum(self.component_restarts.values())}   transactions: {self.txn_seq}",
        ]
        failed = sorted(u for u, s in self.task_states.items() if s == TaskState.FAILED.value)
        if failed:
            shown = ", ".join(f"{u} ({self.reasons.get(u) or 'exit'})" for u in failed[:10])
            more = f" and {len(failed) - 10} more" if len(failed) > 10 else ""
            lines.append(f"failed permanently: {shown}{more}")
        if self.sim_makespan is not None:
            lines.append(f"simulated makespan: {self.sim_makespan:.3f} s   simulated staging: {self.sim_staging:.3f} s")
        if self.overheads is not None:
            lines.append(self.overheads.format_table())
        return "\n".join(lines)


# --------------------------------------------------------------------------
# the Synchronizer


class Synchronizer(Component):
    """Single consumer of every sync queue; the only caller of apply_sync."""

    name = "synchronizer"

    def start(self) -> None:
        self.cid = self.register("sync")
        self.spawn(self._loop, "sync")

    def _loop(self) -> None:
        broker, store = self.ctx.broker, self.ctx.store
        queues = [sync_queue(s) for s in SYNC_SENDERS]
        while not self.stopping:
            self.check()
            if not broker.wait_any(queues, 0.1):
                broker.renew(self.cid)
                continue
            with self.ctx.profiler.span("appmanager.synchronizer", "mgmt"):
                for sub, q in zip(SYNC_SENDERS, queues):
                    for env in broker.consume(q, 64, self.cid):
                        try:
                            msg = SyncMessage.from_doc(decode(env.payload))
                        except (ValueError, KeyError, TypeError) as exc:
                            log.error("dropping malformed sync message on %s: %s", q, exc)
                            broker.ack(q, env.delivery_tag, self.cid)
                            continue
                        ack = store.apply_sync(msg)
                        self.check()
                        broker.publish(ack_queue(sub), encode(ack.to_doc()))
                        broker.ack(q, env.delivery_tag, self.cid)


# --------------------------------------------------------------------------
# the manager


def _max_cores(app: AppDescription) -> int:
    return max((r.description.cores for _, _, r in iter_tasks(app)), default=1)


class AppManager:
    """Drives one application to completion (or a declared failure)."""

    COMPONENTS = {"synchronizer": Synchronizer, "wfprocessor": WFProcessor, "execmanager": ExecManager}

    def __init__(self, config: RunConfig | None = None) -> None:
        self.config = config or RunConfig()
        self._abort = threading.Event()
        self._restart_seq = itertools.count(1)
        self.ctx: RunContext | None = None
        self.components: dict[str, Component] = {}
        self.checkpoints: list[Checkpoint] = []

    # -- public entry points ----------------------------------------------

    def run(self, app: AppDescription, resources: ResourceRequest) -> RunReport:
        problems = [str(i) for i in validate_application(app).violations]
        problems += resources.problems(_max_cores(app)) if not problems else []
        if problems:
            raise ValidationFailed(problems)
        return self._execute(GlobalState(app), resources, recovered=False)

    def resume(self, checkpoint: str | Path, resources: ResourceRequest) -> RunReport:
        """Continue from a checkpoint; DONE tasks are never run again."""
        state = recover(checkpoint)
        problems = resources.problems(_max_cores(state.app))
        if problems:
            raise ValidationFailed(problems)
        return self._execute(state, resources, recovered=True)

    def abort(self) -> None:
        self._abort.set()

    def checkpoint(self, path: str | Path | None = None) -> Checkpoint:
        if self.ctx is None:
            raise RuntimeError("no run in progress")
        path = path or self.ctx.workdir / "checkpoint.json"
        cp = self.ctx.store.checkpoint(path)
        self.checkpoints.append(cp)
        return cp

    # -- internals --------------------------------------------------------

    def _backend_factory(self, resources: ResourceRequest, workdir: Path, base_dir: Path,
                         telemetry: Telemetry, profiler: Profiler):
        if resources.backend == "sim":
            sim = SimConfig(**resources.backend_config)
            faults = FaultProgram(sim)

            def make(instance: int) -> Backend:
                return SimulatedBackend(instance, sim, faults, telemetry)
        elif resources.backend == "local":
            def make(instance: int) -> Backend:
                return LocalBackend(instance, workdir, base_dir=base_dir, telemetry=telemetry, profiler=profiler)
        else:
            raise BackendUnavailable(f"unknown backend {resources.backend!r}")
        return make

    def _execute(self, state: GlobalState, resources: ResourceRequest, recovered: bool) -> RunReport:
        cfg = self.config
        t0 = time.monotonic()
        workdir = cfg.resolved_workdir()
        base_dir = (cfg.base_dir or Path.cwd()).resolve()
        profile_path = cfg.profile_path or workdir / "profile.csv"
        profiler = Profiler(profile_path, enabled=cfg.profile)
        profiler.record("appmanager", "setup_start")

        broker_dir = workdir / "broker"
        if broker_dir.exists():
            shutil.rmtree(broker_dir)
        broker = Broker(broker_dir if cfg.durable_queues else None)
        for q in all_queues():
            broker.declare_queue(q, durable=True)
        journal_path = workdir / "journal.log"
        journal = FileJournal(journal_path, fsync=cfg.fsync, keep_upto=state.txn_seq if recovered else None)
        store = StateStore(state, journal)
        telemetry = cfg.telemetry or Telemetry()
        factory = self._backend_factory(resources, workdir, base_dir, telemetry, profiler)
        rts = RuntimeHandle(factory, resources, cfg.pilot_retry_limit)
        ctx = self.ctx = RunContext(broker, store, cfg, profiler, rts, workdir, base_dir, epoch=state.txn_seq)
        self._telemetry = telemetry
        self._kills = {}
        for name, txn in cfg.kill_plan:
            self._kills.setdefault(txn, []).append(name)
        self._checkpoint_fired = False
        store.on_commit = self._on_commit
        store.io_guard = profiler.paused
        self.components = {name: cls(ctx) for name, cls in self.COMPONENTS.items()}
        self.components["synchronizer"].start()
        profiler.record("appmanager", "setup_end")

        if recovered:
            self._reset_in_flight()

        error: RunAborted | None = None
        status = "DONE"
        try:
            try:
                rts.start()
            except (PilotDenied, BackendUnavailable) as exc:
                raise ResourceAcquisitionFailed(str(exc)) from exc
            self.components["wfprocessor"].start()
            self.components["execmanager"].start()
            self._supervise(t0)
            status = "DONE" if all(p.state.value == "DONE" for p in store.app.pipelines) else "FAILED"
        except RunAborted as exc:
            error = exc
            status = exc.status
        finally:
            self._teardown(crashed=ctx.crashed.is_set())
        checkpoint_path = None
        if not ctx.crashed.is_set():
            checkpoint_path = workdir / "checkpoint.json"
            self.checkpoints.append(store.checkpoint(checkpoint_path))
        elif self.checkpoints:
            checkpoint_path = self.checkpoints[-1].path
        journal.close()
        report = self._report(status, error, profiler, journal_path, checkpoint_path, time.monotonic() - t0)
        if error is not None:
            error.report = report
            raise error
        return report

    def _reset_in_flight(self) -> None:
        """Work that was in flight at the checkpoint is lost with the old backend."""
        store = self.ctx.store
        seq = itertools.count(1)
        for _, _, rec in list(iter_tasks(store.app)):
            if rec.state in (TaskState.SUBMITTED, TaskState.EXECUTING):
                store.apply_sync(SyncMessage(rec.uid, "task", TaskState.FAILED.value, rec.attempts,
                                             f"recovery:{store.txn_seq}", next(seq), reason="rts-lost"))

    def _on_commit(self, txn: int) -> None:
        ctx = self.ctx
        for name in self._kills.pop(txn, ()):
            log.info("kill plan: %s at txn %d", name, txn)
            ctx.request_kill(name)
        if self.config.checkpoint_when is not None and not self._checkpoint_fired:
            if self.config.checkpoint_when(ctx.store.snapshot()):
                self._checkpoint_fired = True
                self.checkpoint(ctx.workdir / f"checkpoint-{txn}.json")
                if self.config.crash_after_checkpoint:
                    ctx.crashed.set()

    def _supervise(self, t0: float) -> None:
        ctx, cfg = self.ctx, self.config
        store = ctx.store
        seen = -1
        while True:
            if ctx.crashed.is_set():
                raise Crashed("simulated crash after checkpoint")
            if self._abort.is_set():
                raise Aborted("aborted by request")
            if cfg.timeout is not None and time.monotonic() - t0 > cfg.timeout:
                raise Aborted(f"timed out after {cfg.timeout} s")
            if ctx.fatal:
                exc = ctx.fatal[0]
                if isinstance(exc, RtsBudgetSpent):
                    raise RtsRestartBudgetExhausted(str(exc))
                if isinstance(exc, PilotLost):
                    raise ResourceAcquisitionFailed(str(exc))
                raise Aborted(str(exc))
            if all(p.state.terminal for p in store.app.pipelines):
                return
            for name in list(self.components):
                if self.components[name].failed:
                    self.restart_component(name)
            seen = store.wait_txn(seen, 0.05)

    def restart_component(self, name: str) -> Component:
        """Replace a failed component with a fresh incarnation."""
        ctx = self.ctx
        store, broker = ctx.store, ctx.broker
        used = store.snapshot().component_restarts.get(name, 0)
        limit = self.config.component_restart_limit
        old = self.components[name]
        if used >= limit:
            old.kill()
            raise RestartBudgetExhausted(f"{name} failed and its restart budget ({limit}) is spent")
        log.warning("restarting %s (incarnation %d, restart %d/%d)", name, old.incarnation + 1, used + 1, limit)
        old.kill()
        for cid in old.consumers:
            broker.disconnect(cid)
        old.join(2.0)
        store.apply_sync(SyncMessage(name, "component", "RESTARTED", 0, f"supervisor:{ctx.epoch}",
                                     next(self._restart_seq)))
        new = type(old)(ctx, old.incarnation + 1)
        self.components[name] = new
        new.start()
        return new

    def _teardown(self, crashed: bool) -> None:
        ctx = self.ctx
        prof = ctx.profiler
        if crashed:
            for comp in self.components.values():
                comp.kill()
            ctx.rts.purge()
            for comp in self.components.values():
                comp.join(2.0)
            ctx.broker.close()
            return
        prof.record("appmanager", "teardown_start")
        for name in ("wfprocessor", "execmanager"):
            self.components[name].stop()
        prof.record("appmanager", "teardown_end")
        with prof.span("execmanager.rmgr", "rts_teardown"):
            if any(r.state.in_flight for _, _, r in iter_tasks(ctx.store.app)):
                ctx.rts.purge()
            ctx.rts.shutdown()
        with prof.span("appmanager.synchronizer", "teardown"):
            self.components["synchronizer"].stop()
            ctx.broker.close()

    def _report(self, status: str, error: RunAborted | None, profiler: Profiler, journal_path: Path,
                checkpoint_path: Path | None, wall: float) -> RunReport:
        store = self.ctx.store
        snap = store.snapshot()
        app = snap.app
        profiler.flush()
        overheads = None
        if profiler.enabled:
            try:
                overheads = compute_overheads(profiler.events())
            except UnpairedMarker as exc:
                log.warning("overheads unavailable: %s", exc)
        recs = [r for _, _, r in iter_tasks(app)]
        sims = [b for b in dict.fromkeys([*self.ctx.rts.retired, self.ctx.rts.backend])
                if isinstance(b, SimulatedBackend)]
        return RunReport(
            status=status,
            task_states={r.uid: r.state.value for r in recs},
            attempts={r.uid: r.attempts for r in recs},
            reasons={r.uid: r.reason for r in recs},
            stage_states={s.uid: s.state.value for p in app.pipelines for s in p.stages},
            pipeline_states={p.uid: p.state.value for p in app.pipelines},
            overheads=overheads,
            rts_restarts=snap.rts_restarts,
            component_restarts=dict(snap.component_restarts),
            txn_seq=snap.txn_seq,
            profile_valid=profiler.valid,
            spawns=dict(self._telemetry.spawns),
            error=str(error) if error else None,
            workdir=str(self.ctx.workdir),
            profile_path=str(profiler.path) if profiler.enabled and profiler.path else None,
            checkpoint_path=str(checkpoint_path) if checkpoint_path else None,
            journal_path=str(journal_path),
            wall_time=wall,
            sim_makespan=max(b.now for b in sims) if sims else None,
            sim_staging=sum(b.staging_time for b in sims) if sims else None,
        )


def run(app: AppDescription, resources: ResourceRequest, config: RunConfig | None = None) -> RunReport:
    return AppManager(config).run(app, resources)


def resume(checkpoint: str | Path, resources: ResourceRequest, config: RunConfig | None = None) -> RunReport:
    return AppManager(config).resume(checkpoint, resources)


__all__ = [
    "AppManager", "RunReport", "Synchronizer", "ValidationFailed", "RunAborted", "ResourceAcquisitionFailed",
    "RestartBudgetExhausted", "RtsRestartBudgetExhausted", "Aborted", "Crashed", "run", "resume",
    "load_checkpoint",
]
