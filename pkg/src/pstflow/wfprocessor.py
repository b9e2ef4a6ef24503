"""WFProcessor: moves ready tasks to Pending and tags what comes back on Done."""

from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Any

from .broker import MessageEnvelope, decode, encode
from .components import DEAD_LETTER, DONE, PENDING, Change, Component, RunContext, SyncClient
from .model import (
    EntityState,
    TaskRecord,
    TaskState,
    iter_tasks,
    next_ready_tasks,
    stage_closed,
    stage_settled,
)

log = logging.getLogger(__name__)


def task_payload(rec: TaskRecord, attempt: int) -> dict[str, Any]:
    """Wire form of one task attempt, as pushed to Pending."""
    d = rec.description
    return {
        "uid": d.uid,
        "attempt": attempt,
        "executable": d.executable,
        "arguments": list(d.arguments),
        "cores": d.cores,
        "expected_duration": d.expected_duration,
        "input_staging": [s.to_dict() for s in d.input_staging],
        "output_staging": [s.to_dict() for s in d.output_staging],
        "environment": dict(d.environment),
    }


def retry_allowed(rec: TaskRecord, limit: int | None) -> bool:
    """Whether a failed task gets another attempt. ``None`` means no limit."""
    return limit is None or rec.attempts <= limit


def terminal_for(doc: dict[str, Any]) -> TaskState:
    if doc.get("canceled"):
        return TaskState.CANCELED
    if doc.get("exit_code") == 0 and not doc.get("reason"):
        return TaskState.DONE
    return TaskState.FAILED


def read_branch_decision(path: Path) -> list[str]:
    """Uids to cancel, from a JSON list or ``{"cancel": [...]}``. Missing file: none."""
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError:
        return []
    except (OSError, ValueError) as exc:
        log.warning("unreadable branch decision %s: %s", path, exc)
        return []
    if isinstance(doc, dict):
        doc = doc.get("cancel", [])
    if not isinstance(doc, list):
        log.warning("branch decision %s is not a list of uids", path)
        return []
    return [str(u) for u in doc]


class WFProcessor(Component):
    name = "wfprocessor"

    def __init__(self, ctx: RunContext, incarnation: int = 1) -> None:
        super().__init__(ctx, incarnation)
        self.pushed = 0

    def start(self) -> None:
        self.enq_sync = SyncClient(self, "enqueue")
        self.deq_sync = SyncClient(self, "dequeue")
        self.enq_cid = self.register("enqueue")
        self.deq_cid = self.register("dequeue")
        self.spawn(self._enqueue_loop, "enqueue")
        self.spawn(self._dequeue_loop, "dequeue")

    @property
    def retry_limit(self) -> int | None:
        return self.ctx.config.task_retry_limit

    # -- enqueue ----------------------------------------------------------

    def _enqueue_loop(self) -> None:
        store = self.ctx.store
        self.republish_scheduled()
        while not self.stopping:
            self.check()
            self.ctx.broker.renew(self.enq_cid)
            seen = store.ready_version
            self.enqueue_ready()
            store.wait_ready(seen, 0.1)

    def republish_scheduled(self) -> int:
        """After a restart: tasks SCHEDULED without a Pending message get one.

        Publishing is keyed on ``uid:attempt`` so a message still queued is
        not doubled.
        """
        n = 0
        for _, _, rec in iter_tasks(self.ctx.store.app):
            if rec.state is TaskState.SCHEDULED:
                self._publish(rec, rec.attempts)
                n += 1
        return n

    def _publish(self, rec: TaskRecord, attempt: int) -> None:
        self.ctx.broker.publish(PENDING, encode(task_payload(rec, attempt)), msg_id=f"{rec.uid}:{attempt}")

    def enqueue_ready(self) -> int:
        """Tag every ready task SCHEDULED, then push it to Pending."""
        store = self.ctx.store
        app = store.app
        ready = next_ready_tasks(app)
        if not ready:
            return 0
        with self.ctx.profiler.span("wfprocessor.enqueue", "mgmt"):
            changes = [Change("task", uid, TaskState.SCHEDULED.value, store.task(uid, app).attempts + 1)
                       for uid in ready]
            results = self.enq_sync.send(changes)
            self.check()
            app = store.app
            count = 0
            for ch, ok in zip(changes, results):
                if ok:
                    self._publish(store.task(ch.uid, app), ch.attempt)
                    count += 1
            self.pushed += count
            return count

    # -- dequeue ----------------------------------------------------------

    def _dequeue_loop(self) -> None:
        broker = self.ctx.broker
        self.reconcile()
        while not self.stopping:
            self.check()
            envs = broker.consume(DONE, 256, self.deq_cid, timeout=0.1)
            if envs:
                with self.ctx.profiler.span("wfprocessor.dequeue", "mgmt"):
                    self.dequeue_completed(envs)

    def reconcile(self) -> None:
        """Finish work a previous incarnation may have left half done."""
        store = self.ctx.store
        app = store.app
        resets = [Change("task", r.uid, TaskState.DESCRIBED.value, r.attempts)
                  for _, _, r in iter_tasks(app)
                  if r.state is TaskState.FAILED and retry_allowed(r, self.retry_limit)
                  and not app.pipelines[store.index[r.uid].pipeline].state.terminal]
        if resets:
            self.deq_sync.send(resets)
        branch_done = [r.uid for _, _, r in iter_tasks(store.app)
                       if r.description.is_branch_point and r.state is TaskState.DONE]
        for uid in branch_done:
            self.apply_branch(uid)
        self.settle(range(len(store.app.pipelines)))

    def dequeue_completed(self, envs: list[MessageEnvelope]) -> list[tuple[str, str]]:
        """Tag drained tasks, resubmit failures, close stages and pipelines, then ack."""
        broker, store = self.ctx.broker, self.ctx.store
        docs: list[dict[str, Any]] = []
        keep: list[MessageEnvelope] = []
        for env in envs:
            try:
                doc = decode(env.payload)
                doc["uid"], doc["attempt"] = str(doc["uid"]), int(doc["attempt"])
                if doc["uid"] not in store.index:
                    raise KeyError(doc["uid"])
            except (ValueError, KeyError, TypeError) as exc:
                self._reject(env, exc)
                continue
            docs.append(doc)
            keep.append(env)

        # 1. terminal tags
        app = store.app
        changes: list[Change] = []
        for doc in docs:
            rec = store.task(doc["uid"], app)
            if rec.attempts != doc["attempt"] or rec.state.terminal or rec.state is TaskState.DESCRIBED:
                continue
            target = terminal_for(doc)
            if target is TaskState.DONE and rec.state is TaskState.SUBMITTED:
                changes.append(Change("task", rec.uid, TaskState.EXECUTING.value, rec.attempts))
            changes.append(Change("task", rec.uid, target.value, rec.attempts,
                                  doc.get("exit_code"), doc.get("reason")))
        if changes:
            self.deq_sync.send(changes)
        self.check()

        # outcomes are read back from the store, so a redelivered batch
        # picks up where a killed incarnation stopped
        app = store.app
        outcomes: list[tuple[str, str]] = []
        for doc in docs:
            rec = store.task(doc["uid"], app)
            if rec.attempts == doc["attempt"] and rec.state.terminal:
                outcomes.append((rec.uid, rec.state.value))

        # 2. branch decisions
        for uid, st in outcomes:
            if st == TaskState.DONE.value and store.task(uid, app).description.is_branch_point:
                self.apply_branch(uid)
        self.check()

        # 3. resubmission
        for uid, st in outcomes:
            if st == TaskState.FAILED.value:
                self.resubmit(uid)
        self.check()

        # 4. stage and pipeline completion
        self.settle(sorted({store.index[u].pipeline for u, _ in outcomes}))
        self.check()

        for env in keep:
            broker.ack(DONE, env.delivery_tag, self.deq_cid)
        return outcomes

    def _reject(self, env: MessageEnvelope, exc: Exception) -> None:
        broker = self.ctx.broker
        if not env.redelivered:
            log.warning("malformed Done message (tag %d): %s; retrying once", env.delivery_tag, exc)
            broker.nack(DONE, env.delivery_tag, self.deq_cid)
            return
        log.error("dead-lettering Done message (tag %d): %s", env.delivery_tag, exc)
        broker.publish(DEAD_LETTER, env.payload)
        broker.ack(DONE, env.delivery_tag, self.deq_cid)

    def resubmit(self, uid: str) -> bool:
        """Reset a FAILED task to DESCRIBED if its retry budget allows."""
        rec = self.ctx.store.task(uid)
        if rec.state is not TaskState.FAILED:
            return False
        if not retry_allowed(rec, self.retry_limit):
            log.info("task %s failed permanently after %d attempt(s)", uid, rec.attempts)
            return False
        return self.deq_sync.send_one(Change("task", uid, TaskState.DESCRIBED.value, rec.attempts))

    def apply_branch(self, uid: str) -> int:
        """Cancel the not-yet-started tasks a branch task's decision file names."""
        store = self.ctx.store
        rec = store.task(uid)
        if not rec.description.output_staging:
            return 0
        path = Path(rec.description.output_staging[0].destination)
        if not path.is_absolute():
            path = self.ctx.base_dir / path
        names = set(read_branch_decision(path))
        if not names:
            return 0
        loc = store.index[uid]
        pipe = store.app.pipelines[loc.pipeline]
        changes = []
        for s in range(loc.stage + 1, len(pipe.stages)):
            stage = pipe.stages[s]
            whole = stage.uid in names
            for r in stage.tasks:
                if (whole or r.uid in names) and r.state is TaskState.DESCRIBED:
                    changes.append(Change("task", r.uid, TaskState.CANCELED.value, r.attempts))
        if changes:
            self.deq_sync.send(changes)
        return len(changes)

    def settle(self, pipelines) -> None:
        """Emit every stage/pipeline completion the current task states allow.

        One round sends the next step for every pipeline at once; rounds
        repeat until nothing more closes.
        """
        store = self.ctx.store
        todo = list(pipelines)
        while todo:
            app = store.app
            changes = []
            for p in todo:
                ch = self._next_closure(app.pipelines[p])
                if ch is not None:
                    changes.append((p, ch))
            if not changes:
                return
            results = self.deq_sync.send([ch for _, ch in changes])
            todo = [p for (p, ch), ok in zip(changes, results) if ok and ch.kind == "stage"]

    def _next_closure(self, pipe) -> Change | None:
        if pipe.state.terminal:
            return None
        stage = pipe.stages[pipe.current_stage]
        if stage.state is EntityState.DONE:
            if all(s.state is EntityState.DONE for s in pipe.stages):
                return Change("pipeline", pipe.uid, EntityState.DONE.value)
            return None
        if stage.state is EntityState.FAILED:
            return Change("pipeline", pipe.uid, EntityState.FAILED.value)
        if stage_closed(stage):
            return Change("stage", stage.uid, EntityState.DONE.value)
        if stage_settled(stage) and all(
            not retry_allowed(r, self.retry_limit) for r in stage.tasks if r.state is TaskState.FAILED
        ):
            return Change("stage", stage.uid, EntityState.FAILED.value)
        return None


__all__ = ["WFProcessor", "task_payload", "retry_allowed", "terminal_for", "read_branch_decision"]
