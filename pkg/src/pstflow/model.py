"""PST application model: tasks grouped into stages, stages ordered into pipelines.

Every value here is an immutable snapshot. State changes go through
:func:`transition` (or :func:`reset_for_resubmission`) and produce a new
record; containers are rebuilt along the path with :func:`replace_task`,
:func:`replace_stage` and :func:`replace_pipeline`.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Any, Iterable, Mapping

__all__ = [
    "TaskState",
    "EntityState",
    "StagingMode",
    "StagingDirective",
    "TaskDescription",
    "TaskRecord",
    "Stage",
    "Pipeline",
    "AppDescription",
    "Location",
    "IllegalTransition",
    "ValidationIssue",
    "DuplicateUid",
    "EmptyStage",
    "EmptyPipeline",
    "InvalidCores",
    "EmptyExecutable",
    "InvalidStaging",
    "ValidationResult",
    "AppFileError",
    "validate_application",
    "transition",
    "begin_attempt",
    "reset_for_resubmission",
    "next_ready_tasks",
    "stage_closed",
    "stage_settled",
    "build_index",
    "replace_task",
    "replace_stage",
    "replace_pipeline",
    "iter_tasks",
    "application_from_dict",
    "load_application",
    "dump_state",
    "load_state",
    "make_application",
]


class TaskState(str, Enum):
    DESCRIBED = "DESCRIBED"
    SCHEDULED = "SCHEDULED"
    SUBMITTED = "SUBMITTED"
    EXECUTING = "EXECUTING"
    DONE = "DONE"
    FAILED = "FAILED"
    CANCELED = "CANCELED"

    @property
    def terminal(self) -> bool:
        return self in _TASK_TERMINAL

    @property
    def in_flight(self) -> bool:
        return self in _TASK_IN_FLIGHT


class EntityState(str, Enum):
    """State of a stage or a pipeline."""

    DESCRIBED = "DESCRIBED"
    SCHEDULED = "SCHEDULED"
    EXECUTING = "EXECUTING"
    DONE = "DONE"
    FAILED = "FAILED"

    @property
    def terminal(self) -> bool:
        return self in (EntityState.DONE, EntityState.FAILED)


_TASK_TERMINAL = frozenset({TaskState.DONE, TaskState.FAILED, TaskState.CANCELED})
_TASK_IN_FLIGHT = frozenset({TaskState.SCHEDULED, TaskState.SUBMITTED, TaskState.EXECUTING})

# FAILED -> DESCRIBED is deliberately absent: only reset_for_resubmission takes it.
TASK_GRAPH: dict[TaskState, frozenset[TaskState]] = {
    TaskState.DESCRIBED: frozenset({TaskState.SCHEDULED, TaskState.CANCELED}),
    TaskState.SCHEDULED: frozenset({TaskState.SUBMITTED, TaskState.FAILED, TaskState.CANCELED}),
    TaskState.SUBMITTED: frozenset({TaskState.EXECUTING, TaskState.FAILED, TaskState.CANCELED}),
    TaskState.EXECUTING: frozenset({TaskState.DONE, TaskState.FAILED, TaskState.CANCELED}),
    TaskState.DONE: frozenset(),
    TaskState.FAILED: frozenset(),
    TaskState.CANCELED: frozenset(),
}

_E = EntityState
ENTITY_GRAPH: dict[EntityState, frozenset[EntityState]] = {
    _E.DESCRIBED: frozenset({_E.SCHEDULED, _E.DONE, _E.FAILED}),
    _E.SCHEDULED: frozenset({_E.EXECUTING, _E.DONE, _E.FAILED}),
    _E.EXECUTING: frozenset({_E.DONE, _E.FAILED}),
    _E.DONE: frozenset(),
    _E.FAILED: frozenset(),
}


class StagingMode(str, Enum):
    COPY = "copy"
    LINK = "link"
    MOVE = "move"


@dataclass(frozen=True)
class StagingDirective:
    source: str
    destination: str
    mode: StagingMode = StagingMode.COPY

    def to_dict(self) -> dict[str, str]:
        return {"source": self.source, "destination": self.destination, "mode": self.mode.value}


@dataclass(frozen=True)
class TaskDescription:
    uid: str
    executable: str
    arguments: tuple[str, ...] = ()
    cores: int = 1
    expected_duration: float | None = None
    input_staging: tuple[StagingDirective, ...] = ()
    output_staging: tuple[StagingDirective, ...] = ()
    environment: Mapping[str, str] = field(default_factory=dict)
    is_branch_point: bool = False

    def to_dict(self) -> dict[str, Any]:
        return {
            "uid": self.uid,
            "executable": self.executable,
            "arguments": list(self.arguments),
            "cores": self.cores,
            "expected_duration": self.expected_duration,
            "input_staging": [d.to_dict() for d in self.input_staging],
            "output_staging": [d.to_dict() for d in self.output_staging],
            "environment": dict(self.environment),
            "is_branch_point": self.is_branch_point,
        }


@dataclass(frozen=True)
class TaskRecord:
    description: TaskDescription
    state: TaskState = TaskState.DESCRIBED
    attempts: int = 0
    exit_code: int | None = None
    reason: str | None = None
    timestamps: Mapping[str, float] = field(default_factory=dict)
    # (state, timestamp, attempt) for every transition ever taken
    history: tuple[tuple[str, float, int], ...] = ()

    @property
    def uid(self) -> str:
        return self.description.uid


@dataclass(frozen=True)
class Stage:
    uid: str
    tasks: tuple[TaskRecord, ...]
    state: EntityState = EntityState.DESCRIBED
    timestamps: Mapping[str, float] = field(default_factory=dict)


@dataclass(frozen=True)
class Pipeline:
    uid: str
    stages: tuple[Stage, ...]
    current_stage: int = 0
    state: EntityState = EntityState.DESCRIBED
    timestamps: Mapping[str, float] = field(default_factory=dict)


@dataclass(frozen=True)
class AppDescription:
    pipelines: tuple[Pipeline, ...]
    name: str = "app"


@dataclass(frozen=True)
class Location:
    """Position of an entity inside an AppDescription; -1 for unused levels."""

    kind: str
    pipeline: int
    stage: int = -1
    task: int = -1


# --------------------------------------------------------------------------
# errors


class IllegalTransition(Exception):
    def __init__(self, current: Enum, next_state: Enum, uid: str = "", why: str = "") -> None:
        self.current = current
        self.next = next_state
        self.uid = uid
        msg = f"{uid or 'entity'}: {current.value} -> {next_state.value} is not allowed"
        if why:
            msg += f" ({why})"
        super().__init__(msg)


class ValidationIssue(Exception):
    """One invariant violation; ``uid`` names the offending entity."""

    def __init__(self, uid: str, detail: str = "") -> None:
        self.uid = uid
        self.detail = detail
        text = f"{type(self).__name__}({uid!r})"
        super().__init__(f"{text}: {detail}" if detail else text)


class DuplicateUid(ValidationIssue):
    pass


class EmptyStage(ValidationIssue):
    pass


class EmptyPipeline(ValidationIssue):
    pass


class InvalidCores(ValidationIssue):
    pass


class EmptyExecutable(ValidationIssue):
    pass


class InvalidStaging(ValidationIssue):
    pass


class AppFileError(ValueError):
    """The application document is not well-formed (syntax, types, unknown fields)."""


@dataclass(frozen=True)
class ValidationResult:
    violations: tuple[ValidationIssue, ...] = ()

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self) -> bool:
        return self.ok

    def kinds(self) -> list[str]:
        return [type(v).__name__ for v in self.violations]


# --------------------------------------------------------------------------
# traversal and structural replacement


def iter_tasks(app: AppDescription) -> Iterable[tuple[int, int, TaskRecord]]:
    for p, pipe in enumerate(app.pipelines):
        for s, stage in enumerate(pipe.stages):
            for rec in stage.tasks:
                yield p, s, rec


def build_index(app: AppDescription) -> dict[str, Location]:
    """Map each uid to its location. Duplicate uids keep the first occurrence."""
    index: dict[str, Location] = {}
    for p, pipe in enumerate(app.pipelines):
        index.setdefault(pipe.uid, Location("pipeline", p))
        for s, stage in enumerate(pipe.stages):
            index.setdefault(stage.uid, Location("stage", p, s))
            for t, rec in enumerate(stage.tasks):
                index.setdefault(rec.uid, Location("task", p, s, t))
    return index


def _swap(items: tuple, i: int, value: Any) -> tuple:
    return items[:i] + (value,) + items[i + 1:]


def replace_pipeline(app: AppDescription, p: int, pipe: Pipeline) -> AppDescription:
    return replace(app, pipelines=_swap(app.pipelines, p, pipe))


def replace_stage(app: AppDescription, p: int, s: int, stage: Stage) -> AppDescription:
    pipe = app.pipelines[p]
    return replace_pipeline(app, p, replace(pipe, stages=_swap(pipe.stages, s, stage)))


def replace_task(app: AppDescription, loc: Location, rec: TaskRecord) -> AppDescription:
    stage = app.pipelines[loc.pipeline].stages[loc.stage]
    return replace_stage(app, loc.pipeline, loc.stage, replace(stage, tasks=_swap(stage.tasks, loc.task, rec)))


# --------------------------------------------------------------------------
# validation


def validate_application(app: AppDescription) -> ValidationResult:
    """Collect every invariant violation in ``app``."""
    issues: list[ValidationIssue] = []
    seen: set[str] = set()
    reported: set[str] = set()

    def check_uid(uid: str) -> None:
        if uid in seen and uid not in reported:
            issues.append(DuplicateUid(uid))
            reported.add(uid)
        seen.add(uid)

    if not app.pipelines:
        issues.append(EmptyPipeline(app.name, "application has no pipelines"))
    for pipe in app.pipelines:
        check_uid(pipe.uid)
        if not pipe.stages:
            issues.append(EmptyPipeline(pipe.uid, "pipeline has no stages"))
        for stage in pipe.stages:
            check_uid(stage.uid)
            if not stage.tasks:
                issues.append(EmptyStage(stage.uid))
            for rec in stage.tasks:
                desc = rec.description
                check_uid(desc.uid)
                if not isinstance(desc.cores, int) or isinstance(desc.cores, bool) or desc.cores < 1:
                    issues.append(InvalidCores(desc.uid, f"cores={desc.cores!r}"))
                if not desc.executable:
                    issues.append(EmptyExecutable(desc.uid))
                for d in (*desc.input_staging, *desc.output_staging):
                    if not d.source:
                        issues.append(InvalidStaging(desc.uid, "empty staging source"))
    return ValidationResult(tuple(issues))


# --------------------------------------------------------------------------
# state machines


def stage_closed(stage: Stage) -> bool:
    """A stage may be DONE: every task DONE, canceled tasks counted as skipped."""
    return all(r.state in (TaskState.DONE, TaskState.CANCELED) for r in stage.tasks)


def stage_settled(stage: Stage) -> bool:
    return all(r.state.terminal for r in stage.tasks)


def _stamp(ts: Mapping[str, float], state: Enum, at: float) -> dict[str, float]:
    out = dict(ts)
    out[state.value] = at
    return out


def transition(entity, next_state, *, at: float | None = None, exit_code: int | None = None,
               reason: str | None = None):
    """Return a copy of ``entity`` moved to ``next_state``.

    Works for TaskRecord, Stage and Pipeline. Stage/Pipeline completion is
    additionally gated on the containment predicate.
    """
    at = time.monotonic() if at is None else at
    if isinstance(entity, TaskRecord):
        nxt = TaskState(next_state)
        if nxt not in TASK_GRAPH[entity.state]:
            raise IllegalTransition(entity.state, nxt, entity.uid)
        return replace(
            entity,
            state=nxt,
            exit_code=exit_code if exit_code is not None else entity.exit_code,
            reason=reason if reason is not None else entity.reason,
            timestamps=_stamp(entity.timestamps, nxt, at),
            history=entity.history + ((nxt.value, at, entity.attempts),),
        )
    nxt = EntityState(next_state)
    if nxt not in ENTITY_GRAPH[entity.state]:
        raise IllegalTransition(entity.state, nxt, entity.uid)
    if isinstance(entity, Stage):
        if nxt is EntityState.DONE and not stage_closed(entity):
            raise IllegalTransition(entity.state, nxt, entity.uid, "tasks not all done")
        if nxt is EntityState.FAILED and not (
            stage_settled(entity) and any(r.state is TaskState.FAILED for r in entity.tasks)
        ):
            raise IllegalTransition(entity.state, nxt, entity.uid, "no settled failure")
    elif isinstance(entity, Pipeline):
        if nxt is EntityState.DONE and not all(s.state is EntityState.DONE for s in entity.stages):
            raise IllegalTransition(entity.state, nxt, entity.uid, "stages not all done")
        if nxt is EntityState.FAILED and not any(s.state is EntityState.FAILED for s in entity.stages):
            raise IllegalTransition(entity.state, nxt, entity.uid, "no failed stage")
    else:
        raise TypeError(f"cannot transition {type(entity).__name__}")
    return replace(entity, state=nxt, timestamps=_stamp(entity.timestamps, nxt, at))


def begin_attempt(rec: TaskRecord, *, at: float | None = None) -> TaskRecord:
    """DESCRIBED -> SCHEDULED, opening a new attempt."""
    at = time.monotonic() if at is None else at
    moved = transition(replace(rec, attempts=rec.attempts + 1), TaskState.SCHEDULED, at=at)
    return replace(moved, exit_code=None, reason=None)


def reset_for_resubmission(rec: TaskRecord, *, at: float | None = None) -> TaskRecord:
    """FAILED -> DESCRIBED. The attempt counter moves on at the next SCHEDULED."""
    if rec.state is not TaskState.FAILED:
        raise IllegalTransition(rec.state, TaskState.DESCRIBED, rec.uid, "only FAILED tasks are resubmitted")
    at = time.monotonic() if at is None else at
    return replace(
        rec,
        state=TaskState.DESCRIBED,
        timestamps={TaskState.DESCRIBED.value: at},
        history=rec.history + ((TaskState.DESCRIBED.value, at, rec.attempts),),
    )


def next_ready_tasks(app: AppDescription) -> list[str]:
    """DESCRIBED tasks in the current stage of every non-terminal pipeline, in app order."""
    ready: list[str] = []
    for pipe in app.pipelines:
        if pipe.state.terminal or not pipe.stages:
            continue
        stage = pipe.stages[pipe.current_stage]
        if stage.state.terminal:
            continue
        ready.extend(r.uid for r in stage.tasks if r.state is TaskState.DESCRIBED)
    return ready


# --------------------------------------------------------------------------
# construction and (de)serialization

_APP_KEYS = {"name", "pipelines"}
_PIPELINE_KEYS = {"uid", "stages"}
_STAGE_KEYS = {"uid", "tasks"}
_TASK_KEYS = {
    "uid", "executable", "arguments", "cores", "expected_duration",
    "input_staging", "output_staging", "environment", "is_branch_point",
}
_STAGING_KEYS = {"source", "destination", "mode"}


def _check_keys(doc: Any, allowed: set[str], where: str) -> None:
    if not isinstance(doc, dict):
        raise AppFileError(f"{where}: expected an object, got {type(doc).__name__}")
    unknown = set(doc) - allowed
    if unknown:
        raise AppFileError(f"{where}: unknown field(s) {sorted(unknown)}")


def _list(doc: dict, key: str, where: str) -> list:
    value = doc.get(key, [])
    if not isinstance(value, list):
        raise AppFileError(f"{where}.{key}: expected a list")
    return value


def _staging(items: list, where: str) -> tuple[StagingDirective, ...]:
    out = []
    for i, d in enumerate(items):
        w = f"{where}[{i}]"
        _check_keys(d, _STAGING_KEYS, w)
        try:
            mode = StagingMode(d.get("mode", "copy"))
        except ValueError:
            raise AppFileError(f"{w}.mode: must be one of copy, link, move") from None
        out.append(StagingDirective(str(d.get("source", "")), str(d.get("destination", "")), mode))
    return tuple(out)


def _task_from_dict(doc: dict, uid: str, where: str) -> TaskDescription:
    _check_keys(doc, _TASK_KEYS, where)
    args = _list(doc, "arguments", where)
    env = doc.get("environment", {}) or {}
    if not isinstance(env, dict):
        raise AppFileError(f"{where}.environment: expected an object")
    dur = doc.get("expected_duration")
    if dur is not None and not isinstance(dur, (int, float)):
        raise AppFileError(f"{where}.expected_duration: expected a number")
    cores = doc.get("cores", 1)
    if not isinstance(cores, int) or isinstance(cores, bool):
        raise AppFileError(f"{where}.cores: expected an integer")
    return TaskDescription(
        uid=str(doc.get("uid") or uid),
        executable=str(doc.get("executable", "")),
        arguments=tuple(str(a) for a in args),
        cores=cores,
        expected_duration=None if dur is None else float(dur),
        input_staging=_staging(_list(doc, "input_staging", where), f"{where}.input_staging"),
        output_staging=_staging(_list(doc, "output_staging", where), f"{where}.output_staging"),
        environment={str(k): str(v) for k, v in env.items()},
        is_branch_point=bool(doc.get("is_branch_point", False)),
    )


def application_from_dict(doc: Any, name: str | None = None) -> AppDescription:
    """Build a fresh AppDescription from a description document.

    Missing uids default to ``<app>.<p>``, ``<app>.<p>.<s>`` and ``<app>.<p>.<s>.<t>``.
    """
    _check_keys(doc, _APP_KEYS, "application")
    app_name = str(doc.get("name") or name or "app")
    pipes = []
    for p, pdoc in enumerate(_list(doc, "pipelines", "application")):
        pw = f"pipelines[{p}]"
        _check_keys(pdoc, _PIPELINE_KEYS, pw)
        stages = []
        for s, sdoc in enumerate(_list(pdoc, "stages", pw)):
            sw = f"{pw}.stages[{s}]"
            _check_keys(sdoc, _STAGE_KEYS, sw)
            tasks = tuple(
                TaskRecord(_task_from_dict(tdoc, f"{app_name}.{p}.{s}.{t}", f"{sw}.tasks[{t}]"))
                for t, tdoc in enumerate(_list(sdoc, "tasks", sw))
            )
            stages.append(Stage(str(sdoc.get("uid") or f"{app_name}.{p}.{s}"), tasks))
        pipes.append(Pipeline(str(pdoc.get("uid") or f"{app_name}.{p}"), tuple(stages)))
    return AppDescription(tuple(pipes), app_name)


def load_application(path: str | Path) -> AppDescription:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise AppFileError(f"{path}: {exc}") from exc
    return application_from_dict(doc, name=path.stem)


def make_application(shape: tuple[int, int, int], executable: str = "sleep",
                     arguments: Iterable[str] = ("1",), *, cores: int = 1,
                     duration: float | None = None, name: str = "app") -> AppDescription:
    """Uniform (pipelines, stages, tasks) application, handy for experiments."""
    n_p, n_s, n_t = shape
    doc = {
        "name": name,
        "pipelines": [
            {"stages": [
                {"tasks": [
                    {"executable": executable, "arguments": list(arguments), "cores": cores,
                     "expected_duration": duration}
                    for _ in range(n_t)
                ]}
                for _ in range(n_s)
            ]}
            for _ in range(n_p)
        ],
    }
    return application_from_dict(doc)


def _record_to_dict(rec: TaskRecord) -> dict[str, Any]:
    return {
        "description": rec.description.to_dict(),
        "state": rec.state.value,
        "attempts": rec.attempts,
        "exit_code": rec.exit_code,
        "reason": rec.reason,
        "timestamps": dict(rec.timestamps),
        "history": [list(h) for h in rec.history],
    }


def dump_state(app: AppDescription) -> dict[str, Any]:
    """Full JSON-able snapshot, runtime state included."""
    return {
        "name": app.name,
        "pipelines": [
            {
                "uid": pipe.uid,
                "state": pipe.state.value,
                "current_stage": pipe.current_stage,
                "timestamps": dict(pipe.timestamps),
                "stages": [
                    {
                        "uid": st.uid,
                        "state": st.state.value,
                        "timestamps": dict(st.timestamps),
                        "tasks": [_record_to_dict(r) for r in st.tasks],
                    }
                    for st in pipe.stages
                ],
            }
            for pipe in app.pipelines
        ],
    }


def _desc_from_state(d: dict[str, Any]) -> TaskDescription:
    return TaskDescription(
        uid=d["uid"],
        executable=d["executable"],
        arguments=tuple(d["arguments"]),
        cores=d["cores"],
        expected_duration=d["expected_duration"],
        input_staging=tuple(StagingDirective(x["source"], x["destination"], StagingMode(x["mode"]))
                            for x in d["input_staging"]),
        output_staging=tuple(StagingDirective(x["source"], x["destination"], StagingMode(x["mode"]))
                             for x in d["output_staging"]),
        environment=dict(d["environment"]),
        is_branch_point=d["is_branch_point"],
    )


def load_state(doc: dict[str, Any]) -> AppDescription:
    """Inverse of :func:`dump_state`."""
    pipes = []
    for pd in doc["pipelines"]:
        stages = []
        for sd in pd["stages"]:
            tasks = tuple(
                TaskRecord(
                    description=_desc_from_state(td["description"]),
                    state=TaskState(td["state"]),
                    attempts=td["attempts"],
                    exit_code=td["exit_code"],
                    reason=td["reason"],
                    timestamps=dict(td["timestamps"]),
                    history=tuple((h[0], h[1], h[2]) for h in td["history"]),
                )
                for td in sd["tasks"]
            )
            stages.append(Stage(sd["uid"], tasks, EntityState(sd["state"]), dict(sd["timestamps"])))
        pipes.append(Pipeline(pd["uid"], tuple(stages), pd["current_stage"], EntityState(pd["state"]),
                              dict(pd["timestamps"])))
    return AppDescription(tuple(pipes), doc["name"])
