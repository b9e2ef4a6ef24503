"""Run tasks as real subprocesses, limited by a local core pool."""

from __future__ import annotations

import itertools
import logging
import os
import subprocess
import threading
import time
from collections import deque
from pathlib import Path
from typing import Any

from ..model import StagingDirective, StagingMode
from ..profiler import Profiler
from .base import Backend, BackendEvent, PilotHandle, PilotState, ResourceRequest, Telemetry
from .staging import StagingContext, StagingFailed, stage

log = logging.getLogger(__name__)


class SpawnFailed(Exception):
    pass


def _directives(items: Any) -> list[StagingDirective]:
    return [StagingDirective(d["source"], d["destination"], StagingMode(d.get("mode", "copy")))
            for d in items or ()]


class LocalBackend(Backend):
    name = "local"
    _pilot_ids = itertools.count(1)

    def __init__(self, instance_id: int, workdir: str | Path, *, base_dir: str | Path | None = None,
                 telemetry: Telemetry | None = None, profiler: Profiler | None = None) -> None:
        super().__init__(instance_id)
        self.workdir = Path(workdir)
        self.base_dir = Path(base_dir) if base_dir is not None else Path.cwd()
        self.telemetry = telemetry or Telemetry()
        self.profiler = profiler or Profiler(enabled=False)
        self.pilot: PilotHandle | None = None
        self.pool = 0
        self._free = 0
        self._cond = threading.Condition()
        self._waiting: deque[dict[str, Any]] = deque()
        self._known: set[tuple[str, int]] = set()
        self._procs: dict[tuple[str, int], subprocess.Popen] = {}
        self._canceled: set[tuple[str, int]] = set()
        self._log: list[BackendEvent] = []
        self._workers: list[threading.Thread] = []
        self._dispatcher: threading.Thread | None = None
        self.alive = True

    # -- interface --------------------------------------------------------

    def acquire(self, request: ResourceRequest) -> PilotHandle:
        with self._cond:
            self.pool = self._free = request.cores
            self.pilot = PilotHandle(f"local.{next(self._pilot_ids):04d}", PilotState.ACTIVE,
                                     request.cores, time.monotonic())
            if self._dispatcher is None:
                self._dispatcher = threading.Thread(target=self._dispatch, name=f"local-dispatch-{self.instance_id}",
                                                    daemon=True)
                self._dispatcher.start()
            return self.pilot

    def submit(self, batch: list[dict[str, Any]]) -> None:
        with self._cond:
            if not self.alive:
                return
            for payload in batch:
                key = (payload["uid"], int(payload["attempt"]))
                if key in self._known:
                    continue
                self._known.add(key)
                if self.pilot is None or self.pilot.state is not PilotState.ACTIVE:
                    self._emit(BackendEvent("exec_end", key[0], key[1], self.instance_id, time.monotonic(),
                                            reason="pilot-not-active"))
                elif int(payload.get("cores", 1)) > self.pool:
                    self._emit(BackendEvent("exec_end", key[0], key[1], self.instance_id, time.monotonic(),
                                            reason="insufficient-cores"))
                else:
                    self._waiting.append(payload)
            self._cond.notify_all()

    def events(self, cursor: int, timeout: float = 0.0) -> tuple[list[BackendEvent], int]:
        with self._cond:
            if cursor >= len(self._log) and timeout > 0:
                self._cond.wait_for(lambda: cursor < len(self._log) or not self.alive, timeout)
            return self._log[cursor:], len(self._log)

    def liveness(self) -> bool:
        return self.alive

    def cancel(self, uid: str) -> None:
        with self._cond:
            for payload in list(self._waiting):
                if payload["uid"] == uid:
                    self._waiting.remove(payload)
                    self._emit(BackendEvent("exec_end", uid, int(payload["attempt"]), self.instance_id,
                                            time.monotonic(), canceled=True))
            for key, proc in self._procs.items():
                if key[0] == uid:
                    self._canceled.add(key)
                    proc.terminate()

    def purge(self) -> None:
        with self._cond:
            self.alive = False
            self._waiting.clear()
            procs = list(self._procs.values())
            self._cond.notify_all()
        for proc in procs:
            try:
                proc.kill()
            except OSError:
                pass
        self.telemetry.reset_usage()

    def shutdown(self) -> None:
        with self._cond:
            self.alive = False
            self._cond.notify_all()
            workers = list(self._workers)
        for w in workers:
            w.join(timeout=5)

    # -- execution --------------------------------------------------------

    def _emit(self, ev: BackendEvent) -> None:
        self._log.append(ev)
        self._cond.notify_all()

    def _dispatch(self) -> None:
        while True:
            with self._cond:
                # strict FIFO: the head waits until its cores are free
                self._cond.wait_for(
                    lambda: not self.alive
                    or (self._waiting and int(self._waiting[0].get("cores", 1)) <= self._free)
                )
                if not self.alive:
                    return
                payload = self._waiting.popleft()
                cores = int(payload.get("cores", 1))
                self._free -= cores
                worker = threading.Thread(target=self._work, args=(payload, cores), daemon=True,
                                          name=f"local-task-{payload['uid']}")
                self._workers.append(worker)
            worker.start()

    def _work(self, payload: dict[str, Any], cores: int) -> None:
        try:
            ev = self.local_execute(payload, cores=cores)
        finally:
            with self._cond:
                self._free += cores
                self._cond.notify_all()
        with self._cond:
            if self.alive:
                self._emit(ev)

    def sandbox(self, uid: str) -> Path:
        return self.workdir / "sandbox" / uid

    def local_execute(self, payload: dict[str, Any], *, cores: int | None = None) -> BackendEvent:
        """Stage in, run, stage out; return the completion event."""
        uid, attempt = payload["uid"], int(payload["attempt"])
        cores = int(payload.get("cores", 1)) if cores is None else cores
        box = self.sandbox(uid)
        prof = self.profiler

        def done(code: int | None, reason: str | None = None, canceled: bool = False) -> BackendEvent:
            return BackendEvent("exec_end", uid, attempt, self.instance_id, time.monotonic(),
                                code, reason, canceled)

        try:
            with prof.span("rts.stager", "staging", uid):
                stage(_directives(payload.get("input_staging")), StagingContext(self.base_dir, box))
        except StagingFailed as exc:
            return done(None, f"staging-failed: {exc}")

        env = dict(os.environ)
        env.update(payload.get("environment") or {})
        argv = [payload["executable"], *payload.get("arguments", ())]
        with self._cond:
            self._log.append(BackendEvent("exec_start", uid, attempt, self.instance_id, time.monotonic()))
            self._cond.notify_all()
        self.telemetry.spawned(self.instance_id, uid, attempt, cores)
        prof.record("rts.executor", "exec_start", uid)
        try:
            try:
                with open(box / "STDOUT", "wb") as out, open(box / "STDERR", "wb") as err:
                    proc = subprocess.Popen(argv, cwd=box, env=env, stdout=out, stderr=err)
            except OSError as exc:
                raise SpawnFailed(f"{argv[0]}: {exc}") from exc
            with self._cond:
                self._procs[(uid, attempt)] = proc
            code = proc.wait()
            with self._cond:
                self._procs.pop((uid, attempt), None)
        except SpawnFailed as exc:
            log.info("task %s: %s", uid, exc)
            return done(127, f"spawn-failed: {exc}")
        finally:
            prof.record("rts.executor", "exec_end", uid)
            self.telemetry.finished(cores)
        if (uid, attempt) in self._canceled:
            return done(code, canceled=True)

        if code == 0:
            try:
                with prof.span("rts.stager", "staging", uid):
                    stage(_directives(payload.get("output_staging")), StagingContext(box, self.base_dir))
            except StagingFailed as exc:
                return done(code, f"staging-failed: {exc}")
        return done(code)
