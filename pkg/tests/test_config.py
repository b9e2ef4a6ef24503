from __future__ import annotations

import json

import pytest

from pstflow.config import ConfigError, RunConfig, load_resources, resources_from_dict, with_overrides


def test_minimal_resources():
    request, overrides = resources_from_dict({"cores": 4})
    assert (request.cores, request.backend, request.walltime) == (4, "local", 60.0)
    assert overrides == {}


def test_sim_resources_collect_backend_config():
    request, overrides = resources_from_dict({
        "backend": "sim", "cores": 8, "queue_wait": 30,
        "failure": {"failure_rate": 0.5, "seed": 7},
        "retries": {"task": None, "rts": 2},
        "heartbeat": {"interval": 0.1, "misses_allowed": 3},
        "sim": {"staging_op_cost": 0.125},
    })
    assert request.backend_config == {"queue_wait": 30.0, "failure_rate": 0.5, "seed": 7, "staging_op_cost": 0.125}
    assert overrides == {"task_retry_limit": None, "rts_restart_limit": 2, "heartbeat_interval": 0.1,
                         "misses_allowed": 3}
    cfg = with_overrides(RunConfig(), overrides)
    assert cfg.task_retry_limit is None and cfg.rts_restart_limit == 2


@pytest.mark.parametrize("doc", [
    {},
    {"cores": 1, "colour": "red"},
    {"cores": 1, "backend": "cloud"},
    {"cores": 1, "failure": {"failure_rate": 2.0}},
    {"cores": 1, "retries": {"forever": 1}},
    {"cores": 1, "sim": {"clock": "sundial"}},
    [],
])
def test_bad_resource_documents(doc):
    with pytest.raises(ConfigError):
        resources_from_dict(doc)


def test_load_resources_file_errors(tmp_path):
    with pytest.raises(ConfigError):
        load_resources(tmp_path / "absent.json")
    (tmp_path / "bad.json").write_text("{")
    with pytest.raises(ConfigError):
        load_resources(tmp_path / "bad.json")
    (tmp_path / "ok.json").write_text(json.dumps({"cores": 2}))
    assert load_resources(tmp_path / "ok.json")[0].cores == 2


def test_run_config_limits():
    with pytest.raises(ConfigError):
        RunConfig(task_retry_limit=-1)
    with pytest.raises(ConfigError):
        RunConfig(rts_restart_limit=-1)
    assert RunConfig(task_retry_limit=None).task_retry_limit is None


def test_workdir_created_on_demand(tmp_path):
    cfg = RunConfig(workdir=tmp_path / "a" / "b")
    assert cfg.resolved_workdir().is_dir()
