"""Authoritative application state and its transaction journal.

Only :meth:`StateStore.apply_sync` changes the state. Each accepted update
gets the next transaction number and one journal line; the line carries the
timestamp used, so replaying the journal over the initial description
reproduces the state exactly.
"""

from __future__ import annotations

import contextlib
import hashlib
import json
import logging
import os
import threading
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Iterable, Protocol

from .model import (
    AppDescription,
    EntityState,
    IllegalTransition,
    Location,
    TaskState,
    begin_attempt,
    build_index,
    dump_state,
    load_state,
    replace_pipeline,
    replace_stage,
    replace_task,
    reset_for_resubmission,
    transition,
)

log = logging.getLogger(__name__)

ENTITY_KINDS = ("task", "stage", "pipeline", "rts", "component")


class CorruptCheckpoint(Exception):
    pass


class Rejected(Exception):
    pass


@dataclass(frozen=True)
class SyncMessage:
    entity_uid: str
    entity_kind: str
    new_state: str
    attempt: int
    sender: str
    seq: int
    exit_code: int | None = None
    reason: str | None = None

    def to_doc(self) -> dict[str, Any]:
        return {
            "uid": self.entity_uid, "kind": self.entity_kind, "state": self.new_state,
            "attempt": self.attempt, "sender": self.sender, "seq": self.seq,
            "exit_code": self.exit_code, "reason": self.reason,
        }

    @classmethod
    def from_doc(cls, d: dict[str, Any]) -> "SyncMessage":
        return cls(d["uid"], d["kind"], d["state"], int(d["attempt"]), d["sender"], int(d["seq"]),
                   d.get("exit_code"), d.get("reason"))


@dataclass(frozen=True)
class AckMessage:
    sender: str
    seq: int
    accepted: bool
    reason: str | None = None

    def to_doc(self) -> dict[str, Any]:
        return {"sender": self.sender, "seq": self.seq, "accepted": self.accepted, "reason": self.reason}

    @classmethod
    def from_doc(cls, d: dict[str, Any]) -> "AckMessage":
        return cls(d["sender"], int(d["seq"]), bool(d["accepted"]), d.get("reason"))


@dataclass
class GlobalState:
    app: AppDescription
    txn_seq: int = 0
    rts_restarts: int = 0
    component_restarts: dict[str, int] = field(default_factory=dict)
    applied: set[tuple[str, int]] = field(default_factory=set)

    def to_doc(self) -> dict[str, Any]:
        return {
            "app": dump_state(self.app),
            "txn_seq": self.txn_seq,
            "rts_restarts": self.rts_restarts,
            "component_restarts": dict(sorted(self.component_restarts.items())),
            "applied": sorted([s, n] for s, n in self.applied),
        }

    @classmethod
    def from_doc(cls, d: dict[str, Any]) -> "GlobalState":
        return cls(load_state(d["app"]), d["txn_seq"], d["rts_restarts"], dict(d["component_restarts"]),
                   {(s, n) for s, n in d["applied"]})

    def copy(self) -> "GlobalState":
        return GlobalState(self.app, self.txn_seq, self.rts_restarts, dict(self.component_restarts),
                           set(self.applied))


@dataclass(frozen=True)
class Checkpoint:
    txn_seq: int
    state: dict[str, Any]
    digest: str
    path: Path | None = None


def _canonical(doc: Any) -> bytes:
    return json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()


def digest_of(txn_seq: int, state_doc: dict[str, Any]) -> str:
    return hashlib.sha256(_canonical({"txn_seq": txn_seq, "state": state_doc})).hexdigest()


# --------------------------------------------------------------------------
# journal


class JournalSink(Protocol):
    def append(self, entry: dict[str, Any]) -> None: ...
    def entries(self) -> list[dict[str, Any]]: ...
    def close(self) -> None: ...


class MemoryJournal:
    def __init__(self) -> None:
        self._entries: list[dict[str, Any]] = []

    def append(self, entry: dict[str, Any]) -> None:
        self._entries.append(dict(entry))

    def entries(self) -> list[dict[str, Any]]:
        return list(self._entries)

    def close(self) -> None:
        pass


class FileJournal:
    """One JSON document per line, fsynced per transaction when ``fsync``."""

    def __init__(self, path: str | Path, *, fsync: bool = True, keep_upto: int | None = None) -> None:
        self.path = Path(path)
        self.fsync = fsync
        self.path.parent.mkdir(parents=True, exist_ok=True)
        if keep_upto is not None and self.path.exists():
            kept = [e for e in read_journal(self.path) if e["txn"] <= keep_upto]
            with open(self.path, "w") as fh:
                for e in kept:
                    fh.write(json.dumps(e, sort_keys=True) + "\n")
        elif keep_upto is None and self.path.exists():
            self.path.unlink()
        self._fh = open(self.path, "a")

    def append(self, entry: dict[str, Any]) -> None:
        self._fh.write(json.dumps(entry, sort_keys=True) + "\n")
        self._fh.flush()
        if self.fsync:
            os.fsync(self._fh.fileno())

    def entries(self) -> list[dict[str, Any]]:
        self._fh.flush()
        return read_journal(self.path)

    def close(self) -> None:
        if not self._fh.closed:
            self._fh.close()


def read_journal(path: str | Path) -> list[dict[str, Any]]:
    out = []
    with open(path) as fh:
        for line in fh:
            if not line.endswith("\n"):
                break
            out.append(json.loads(line))
    return out


# --------------------------------------------------------------------------
# the transition function shared by live apply and replay


def apply_change(state: GlobalState, index: dict[str, Location], kind: str, uid: str, new_state: str,
                 attempt: int, at: float, exit_code: int | None = None, reason: str | None = None) -> bool:
    """Mutate ``state`` for one update. Raises :class:`Rejected`.

    Returns True when the update can make new tasks ready (stage completion
    or a task reset for resubmission).
    """
    if kind == "rts":
        state.rts_restarts += 1
        return False
    if kind == "component":
        state.component_restarts[uid] = state.component_restarts.get(uid, 0) + 1
        return False
    loc = index.get(uid)
    if loc is None or loc.kind != kind:
        raise Rejected(f"unknown {kind} {uid!r}")
    app = state.app
    try:
        if kind == "task":
            rec = app.pipelines[loc.pipeline].stages[loc.stage].tasks[loc.task]
            ns = TaskState(new_state)
            if ns is TaskState.SCHEDULED:
                if attempt != rec.attempts + 1:
                    raise Rejected(f"{uid}: schedule for attempt {attempt}, task is at {rec.attempts}")
                new = begin_attempt(rec, at=at)
            elif ns is TaskState.DESCRIBED:
                if attempt != rec.attempts:
                    raise Rejected(f"{uid}: reset for attempt {attempt}, task is at {rec.attempts}")
                new = reset_for_resubmission(rec, at=at)
            else:
                if attempt != rec.attempts:
                    raise Rejected(f"{uid}: update for attempt {attempt}, task is at {rec.attempts}")
                new = transition(rec, ns, at=at, exit_code=exit_code, reason=reason)
            app = replace_task(app, loc, new)
            if ns in _CONTAINER_FOLLOWS:
                app = _lift_containers(app, loc, _CONTAINER_FOLLOWS[ns], at)
            state.app = app
            return ns is TaskState.DESCRIBED
        if kind == "stage":
            pipe = app.pipelines[loc.pipeline]
            if loc.stage != pipe.current_stage:
                raise Rejected(f"{uid}: stage {loc.stage} is not the current stage ({pipe.current_stage})")
            stage = transition(pipe.stages[loc.stage], EntityState(new_state), at=at)
            app = replace_stage(app, loc.pipeline, loc.stage, stage)
            if stage.state is EntityState.DONE and loc.stage + 1 < len(pipe.stages):
                pipe = app.pipelines[loc.pipeline]
                app = replace_pipeline(app, loc.pipeline, replace(pipe, current_stage=loc.stage + 1))
            state.app = app
            return stage.state is EntityState.DONE
        if kind == "pipeline":
            pipe = transition(app.pipelines[loc.pipeline], EntityState(new_state), at=at)
            state.app = replace_pipeline(app, loc.pipeline, pipe)
            return False
    except IllegalTransition as exc:
        raise Rejected(str(exc)) from exc
    except ValueError as exc:
        raise Rejected(f"bad state {new_state!r} for {kind}") from exc
    raise Rejected(f"unknown entity kind {kind!r}")


# A task being scheduled or started carries its stage and pipeline along in
# the same transaction; completion of containers stays an explicit update.
_CONTAINER_FOLLOWS = {
    TaskState.SCHEDULED: (EntityState.DESCRIBED, EntityState.SCHEDULED),
    TaskState.EXECUTING: (EntityState.SCHEDULED, EntityState.EXECUTING),
}


def _lift_containers(app: AppDescription, loc: Location, step: tuple[EntityState, EntityState],
                     at: float) -> AppDescription:
    src, dst = step
    pipe = app.pipelines[loc.pipeline]
    if loc.stage != pipe.current_stage:
        return app
    stage = pipe.stages[loc.stage]
    if stage.state is EntityState.DESCRIBED and dst is EntityState.EXECUTING:
        stage = transition(stage, EntityState.SCHEDULED, at=at)
    if stage.state is src:
        app = replace_stage(app, loc.pipeline, loc.stage, transition(stage, dst, at=at))
    pipe = app.pipelines[loc.pipeline]
    if pipe.state is EntityState.DESCRIBED and dst is EntityState.EXECUTING:
        pipe = transition(pipe, EntityState.SCHEDULED, at=at)
        app = replace_pipeline(app, loc.pipeline, pipe)
    if pipe.state is src:
        app = replace_pipeline(app, loc.pipeline, transition(pipe, dst, at=at))
    return app


class StateStore:
    """The single writer. Thread-safe; readers get immutable app snapshots."""

    def __init__(self, state: GlobalState, journal: JournalSink | None = None) -> None:
        self._state = state
        self._index = build_index(state.app)
        self.journal = journal if journal is not None else MemoryJournal()
        self._cond = threading.Condition()
        self.ready_version = 0
        self.rejections = 0
        self.on_commit = None  # callable(txn_seq) run after each accepted update
        # wraps each journal write; lets the profiler leave blocking I/O out of its spans
        self.io_guard = contextlib.nullcontext

    # -- reads --------------------------------------------------------------

    @property
    def app(self) -> AppDescription:
        return self._state.app

    @property
    def txn_seq(self) -> int:
        return self._state.txn_seq

    @property
    def index(self) -> dict[str, Location]:
        return self._index

    def snapshot(self) -> GlobalState:
        with self._cond:
            return self._state.copy()

    def task(self, uid: str, app: AppDescription | None = None):
        loc = self._index[uid]
        app = app or self._state.app
        return app.pipelines[loc.pipeline].stages[loc.stage].tasks[loc.task]

    def wait_ready(self, seen: int, timeout: float) -> int:
        """Block until ``ready_version`` moves past ``seen``."""
        with self._cond:
            self._cond.wait_for(lambda: self.ready_version != seen, timeout)
            return self.ready_version

    def wait_txn(self, seen: int, timeout: float) -> int:
        with self._cond:
            self._cond.wait_for(lambda: self._state.txn_seq != seen, timeout)
            return self._state.txn_seq

    # -- the one mutator ------------------------------------------------------

    def apply_sync(self, msg: SyncMessage) -> AckMessage:
        with self._cond:
            key = (msg.sender, msg.seq)
            if key in self._state.applied:
                return AckMessage(msg.sender, msg.seq, True, "duplicate")
            at = time.monotonic()
            # apply_change assigns only once the update is known to be legal
            work = self._state
            try:
                readies = apply_change(work, self._index, msg.entity_kind, msg.entity_uid, msg.new_state,
                                       msg.attempt, at, msg.exit_code, msg.reason)
            except Rejected as exc:
                self.rejections += 1
                log.debug("rejected %s/%s from %s: %s", msg.entity_kind, msg.entity_uid, msg.sender, exc)
                return AckMessage(msg.sender, msg.seq, False, str(exc))
            work.txn_seq += 1
            work.applied.add(key)
            with self.io_guard():
                self.journal.append({
                    "txn": work.txn_seq, "sender": msg.sender, "seq": msg.seq, "kind": msg.entity_kind,
                    "uid": msg.entity_uid, "state": msg.new_state, "attempt": msg.attempt,
                    "exit_code": msg.exit_code, "reason": msg.reason, "ts": at,
                })
            if readies:
                self.ready_version += 1
            self._cond.notify_all()
            txn = work.txn_seq
        if self.on_commit is not None:
            self.on_commit(txn)
        return AckMessage(msg.sender, msg.seq, True)

    def bump_ready(self) -> None:
        with self._cond:
            self.ready_version += 1
            self._cond.notify_all()

    # -- persistence ------------------------------------------------------

    def checkpoint(self, path: str | Path | None = None) -> Checkpoint:
        with self._cond:
            doc = self._state.to_doc()
            txn = self._state.txn_seq
        cp = Checkpoint(txn, doc, digest_of(txn, doc), Path(path) if path else None)
        if path is not None:
            write_checkpoint(cp, path)
        return cp


def write_checkpoint(cp: Checkpoint, path: str | Path) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w") as fh:
        json.dump({"txn_seq": cp.txn_seq, "state": cp.state, "digest": cp.digest}, fh, sort_keys=True)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def load_checkpoint(path: str | Path) -> Checkpoint:
    try:
        doc = json.loads(Path(path).read_text())
        txn, state, digest = doc["txn_seq"], doc["state"], doc["digest"]
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise CorruptCheckpoint(f"{path}: {exc}") from exc
    if digest_of(txn, state) != digest:
        raise CorruptCheckpoint(f"{path}: digest mismatch")
    return Checkpoint(txn, state, digest, Path(path))


def replay(initial: GlobalState, entries: Iterable[dict[str, Any]]) -> GlobalState:
    """Re-apply journal entries (those past ``initial.txn_seq``) in order."""
    state = initial.copy()
    index = build_index(state.app)
    for e in entries:
        if e["txn"] <= state.txn_seq:
            continue
        if e["txn"] != state.txn_seq + 1:
            raise CorruptCheckpoint(f"journal gap: expected txn {state.txn_seq + 1}, got {e['txn']}")
        try:
            apply_change(state, index, e["kind"], e["uid"], e["state"], e["attempt"], e["ts"],
                         e.get("exit_code"), e.get("reason"))
        except Rejected as exc:
            raise CorruptCheckpoint(f"journal txn {e['txn']} does not apply: {exc}") from exc
        state.txn_seq = e["txn"]
        state.applied.add((e["sender"], e["seq"]))
    return state


def recover(path: str | Path, journal: str | Path | None = None) -> GlobalState:
    """Load a checkpoint; with ``journal``, roll forward to its last transaction."""
    cp = load_checkpoint(path)
    state = GlobalState.from_doc(cp.state)
    if journal is not None and Path(journal).exists():
        state = replay(state, read_journal(journal))
    return state
