from __future__ import annotations

import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import all_task_state_tuples, pipeline_done_by_definition, stage_done_by_definition
from pstflow.model import (
    AppDescription,
    AppFileError,
    DuplicateUid,
    EmptyExecutable,
    EmptyPipeline,
    EmptyStage,
    EntityState,
    IllegalTransition,
    InvalidCores,
    Pipeline,
    Stage,
    TaskDescription,
    TaskRecord,
    TaskState,
    TASK_GRAPH,
    application_from_dict,
    begin_attempt,
    dump_state,
    load_application,
    load_state,
    make_application,
    next_ready_tasks,
    replace_pipeline,
    replace_stage,
    reset_for_resubmission,
    transition,
    validate_application,
)


def rec(uid: str, state: TaskState = TaskState.DESCRIBED) -> TaskRecord:
    return TaskRecord(TaskDescription(uid, "sleep", ("1",)), state)


# -- validation --------------------------------------------------------------

def test_one_stage_of_sixteen_validates():
    assert validate_application(make_application((1, 1, 16))).ok


def test_zero_pipelines_is_empty_pipeline():
    result = validate_application(AppDescription((), "empty"))
    assert result.kinds() == ["EmptyPipeline"]


def test_duplicate_uid_is_named():
    doc = {"pipelines": [{"stages": [{"tasks": [
        {"uid": "t0", "executable": "sleep"}, {"uid": "t0", "executable": "sleep"}]}]}]}
    result = validate_application(application_from_dict(doc))
    assert not result.ok
    (issue,) = result.violations
    assert isinstance(issue, DuplicateUid) and issue.uid == "t0"
    assert "t0" in str(issue)


def test_all_violations_reported_not_just_first():
    doc = {"pipelines": [
        {"uid": "p0", "stages": []},
        {"stages": [{"uid": "s1", "tasks": []},
                    {"tasks": [{"uid": "bad", "executable": "", "cores": 0}]}]},
    ]}
    result = validate_application(application_from_dict(doc))
    kinds = sorted(result.kinds())
    assert kinds == sorted(["EmptyPipeline", "EmptyStage", "EmptyExecutable", "InvalidCores"])
    uids = {v.uid for v in result.violations}
    assert {"p0", "s1", "bad"} <= uids
    assert any(isinstance(v, EmptyStage) and v.uid == "s1" for v in result.violations)
    assert any(isinstance(v, InvalidCores) for v in result.violations)
    assert any(isinstance(v, EmptyExecutable) for v in result.violations)
    assert any(isinstance(v, EmptyPipeline) for v in result.violations)


def test_unknown_field_rejected():
    doc = {"pipelines": [{"stages": [{"tasks": [{"executable": "sleep", "colour": "red"}]}]}]}
    with pytest.raises(AppFileError, match="colour"):
        application_from_dict(doc)


def test_default_uids_follow_position():
    app = make_application((2, 2, 2), name="demo")
    assert app.pipelines[1].uid == "demo.1"
    assert app.pipelines[1].stages[0].uid == "demo.1.0"
    assert app.pipelines[1].stages[0].tasks[1].uid == "demo.1.0.1"


def test_load_application_uses_file_stem(tmp_path):
    path = tmp_path / "mini.json"
    path.write_text(json.dumps({"pipelines": [{"stages": [{"tasks": [{"executable": "true"}]}]}]}))
    app = load_application(path)
    assert app.name == "mini"
    assert app.pipelines[0].stages[0].tasks[0].uid == "mini.0.0.0"


def test_malformed_json_is_app_file_error(tmp_path):
    path = tmp_path / "broken.json"
    path.write_text("{not json")
    with pytest.raises(AppFileError):
        load_application(path)


# -- transitions -------------------------------------------------------------

def test_first_edge_of_task_graph():
    assert transition(rec("t"), TaskState.SCHEDULED, at=1.0).state is TaskState.SCHEDULED


def test_terminal_state_cannot_move():
    with pytest.raises(IllegalTransition):
        transition(rec("t", TaskState.DONE), TaskState.EXECUTING)


def test_transition_stamps_time_and_keeps_other_fields():
    r = rec("t")
    moved = transition(r, TaskState.SCHEDULED, at=5.0)
    assert moved.timestamps["SCHEDULED"] == 5.0
    assert moved.description == r.description
    assert moved.attempts == r.attempts


@pytest.mark.parametrize("src", list(TaskState))
@pytest.mark.parametrize("dst", list(TaskState))
def test_task_graph_is_the_only_gate(src, dst):
    r = rec("t", src)
    if dst in TASK_GRAPH[src]:
        assert transition(r, dst, at=0.0).state is dst
    else:
        with pytest.raises(IllegalTransition):
            transition(r, dst, at=0.0)


def test_failed_reenters_described_only_by_resubmission():
    failed = rec("t", TaskState.FAILED)
    with pytest.raises(IllegalTransition):
        transition(failed, TaskState.DESCRIBED)
    assert reset_for_resubmission(failed, at=1.0).state is TaskState.DESCRIBED
    with pytest.raises(IllegalTransition):
        reset_for_resubmission(rec("t", TaskState.DONE))


def test_begin_attempt_counts_attempts():
    r = begin_attempt(rec("t"), at=0.0)
    assert (r.state, r.attempts) == (TaskState.SCHEDULED, 1)


def test_stage_of_sixteen_done_may_close():
    stage = Stage("s", tuple(rec(f"t{i}", TaskState.DONE) for i in range(16)), EntityState.EXECUTING)
    assert transition(stage, EntityState.DONE).state is EntityState.DONE


@pytest.mark.parametrize("n", [1, 2, 3])
def test_stage_completion_predicate_exhaustive(n):
    """Every combination of task states for n <= 3 against the definition."""
    for states in all_task_state_tuples(n):
        stage = Stage("s", tuple(rec(f"t{i}", s) for i, s in enumerate(states)), EntityState.EXECUTING)
        expected = stage_done_by_definition(states)
        if expected:
            assert transition(stage, EntityState.DONE).state is EntityState.DONE
        else:
            with pytest.raises(IllegalTransition):
                transition(stage, EntityState.DONE)


@pytest.mark.parametrize("n", [1, 2, 3])
def test_pipeline_completion_predicate_exhaustive(n):
    import itertools

    for states in itertools.product(list(EntityState), repeat=n):
        stages = tuple(Stage(f"s{i}", (rec(f"t{i}"),), s) for i, s in enumerate(states))
        pipe = Pipeline("p", stages, state=EntityState.EXECUTING)
        if pipeline_done_by_definition(states):
            assert transition(pipe, EntityState.DONE).state is EntityState.DONE
        else:
            with pytest.raises(IllegalTransition):
                transition(pipe, EntityState.DONE)


# -- readiness ---------------------------------------------------------------

def test_sixteen_pipelines_all_ready():
    app = make_application((16, 1, 1))
    assert next_ready_tasks(app) == [f"app.{p}.0.0" for p in range(16)]


def test_sixteen_stages_only_current_is_ready():
    app = make_application((1, 16, 1))
    pipe = app.pipelines[0]
    done = Stage(pipe.stages[0].uid, (rec(pipe.stages[0].tasks[0].uid, TaskState.DONE),), EntityState.DONE)
    app = replace_stage(app, 0, 0, done)
    app = replace_pipeline(app, 0, Pipeline(pipe.uid, app.pipelines[0].stages, current_stage=1,
                                            state=EntityState.EXECUTING))
    assert next_ready_tasks(app) == ["app.0.1.0"]


def test_terminal_pipelines_have_nothing_ready():
    app = make_application((2, 1, 1))
    for p in range(2):
        pipe = app.pipelines[p]
        app = replace_pipeline(app, p, Pipeline(pipe.uid, pipe.stages, state=EntityState.DONE))
    assert next_ready_tasks(app) == []


# -- properties --------------------------------------------------------------

shapes = st.tuples(st.integers(1, 3), st.integers(1, 4), st.integers(1, 3))


def _random_walk(app: AppDescription, choices: list[int]) -> list[AppDescription]:
    """Drive an app by always-legal moves; return every intermediate snapshot."""
    seen = [app]
    for c in choices:
        ready = next_ready_tasks(app)
        live = [(p, s, t) for p, pipe in enumerate(app.pipelines) if not pipe.state.terminal
                for s in [pipe.current_stage]
                for t, r in enumerate(pipe.stages[s].tasks) if r.state.in_flight]
        if not ready and not live:
            break
        if ready and (c % 2 == 0 or not live):
            uid = ready[c % len(ready)]
            p, s, t = next((p, s, t) for p, pipe in enumerate(app.pipelines) for s, stage in enumerate(pipe.stages)
                           for t, r in enumerate(stage.tasks) if r.uid == uid)
            stage = app.pipelines[p].stages[s]
            tasks = list(stage.tasks)
            tasks[t] = begin_attempt(tasks[t], at=0.0)
            app = replace_stage(app, p, s, Stage(stage.uid, tuple(tasks), stage.state))
        else:
            p, s, t = live[c % len(live)]
            stage = app.pipelines[p].stages[s]
            tasks = list(stage.tasks)
            nxt = {TaskState.SCHEDULED: TaskState.SUBMITTED, TaskState.SUBMITTED: TaskState.EXECUTING,
                   TaskState.EXECUTING: TaskState.DONE}[tasks[t].state]
            tasks[t] = transition(tasks[t], nxt, at=0.0)
            new_stage = Stage(stage.uid, tuple(tasks), stage.state)
            app = replace_stage(app, p, s, new_stage)
            if all(r.state is TaskState.DONE for r in tasks):
                app = replace_stage(app, p, s, transition(new_stage, EntityState.DONE, at=0.0))
                pipe = app.pipelines[p]
                if s + 1 < len(pipe.stages):
                    app = replace_pipeline(app, p, Pipeline(pipe.uid, pipe.stages, s + 1, pipe.state))
                else:
                    app = replace_pipeline(app, p, transition(pipe, EntityState.DONE, at=0.0))
        seen.append(app)
    return seen


@settings(max_examples=60, deadline=None)
@given(shape=shapes, choices=st.lists(st.integers(0, 50), max_size=80))
def test_sequentiality_and_readiness(shape, choices):
    for app in _random_walk(make_application(shape), choices):
        for pipe in app.pipelines:
            busy = [s for s, stage in enumerate(pipe.stages)
                    if any(r.state not in (TaskState.DESCRIBED, TaskState.DONE) for r in stage.tasks)]
            assert len(busy) <= 1
        index = {r.uid: (p, s) for p, pipe in enumerate(app.pipelines) for s, stage in enumerate(pipe.stages)
                 for r in stage.tasks}
        for uid in next_ready_tasks(app):
            p, s = index[uid]
            assert s <= app.pipelines[p].current_stage


@settings(max_examples=40, deadline=None)
@given(shape=shapes, choices=st.lists(st.integers(0, 50), max_size=60))
def test_recorded_histories_replay_cleanly(shape, choices):
    final = _random_walk(make_application(shape), choices)[-1]
    for pipe in final.pipelines:
        for stage in pipe.stages:
            for r in stage.tasks:
                replayed = rec(r.uid)
                for state, at, _ in r.history:
                    target = TaskState(state)
                    replayed = (begin_attempt(replayed, at=at) if target is TaskState.SCHEDULED
                                else transition(replayed, target, at=at))
                assert replayed.state is r.state


@settings(max_examples=30, deadline=None)
@given(shape=shapes, choices=st.lists(st.integers(0, 50), max_size=40))
def test_state_dump_round_trips(shape, choices):
    final = _random_walk(make_application(shape), choices)[-1]
    assert load_state(json.loads(json.dumps(dump_state(final)))) == final
