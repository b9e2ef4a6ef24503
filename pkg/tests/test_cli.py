from __future__ import annotations

import json
import shutil
import subprocess
import sys

import pytest

from conftest import WORKFLOWS
from pstflow.cli import EXIT_FAILED, EXIT_INVALID, EXIT_OK, main
from pstflow.profiler import CSV_HEADER

APP_FILES = sorted(p for p in WORKFLOWS.rglob("*.json")
                   if "resources" not in p.parts and "out" not in p.parts)


def write(path, doc) -> str:
    path.write_text(json.dumps(doc))
    return str(path)


def tiny_app(tmp_path, shape=(1, 1, 2), seconds="0.1", name="tiny.json") -> str:
    p, s, t = shape
    doc = {"pipelines": [{"stages": [{"tasks": [
        {"executable": "sleep", "arguments": [seconds], "expected_duration": float(seconds)}
        for _ in range(t)]} for _ in range(s)]} for _ in range(p)]}
    return write(tmp_path / name, doc)


# -- validate --------------------------------------------------------------------

def test_validate_ok(tmp_path, capsys):
    assert main(["validate", tiny_app(tmp_path)]) == EXIT_OK
    assert "ok" in capsys.readouterr().out


def test_validate_duplicate_uid_names_it(tmp_path, capsys):
    path = write(tmp_path / "dup.json", {"pipelines": [{"stages": [{"tasks": [
        {"uid": "twin", "executable": "true"}, {"uid": "twin", "executable": "true"}]}]}]})
    assert main(["validate", path]) == EXIT_INVALID
    assert "twin" in capsys.readouterr().err


def test_validate_empty_pipelines(tmp_path):
    assert main(["validate", write(tmp_path / "empty.json", {"pipelines": []})]) == EXIT_INVALID


def test_validate_json_output(tmp_path, capsys):
    path = write(tmp_path / "empty.json", {"pipelines": [{"uid": "p", "stages": []}]})
    assert main(["validate", "--json", path]) == EXIT_INVALID
    doc = json.loads(capsys.readouterr().out)
    assert doc["ok"] is False and doc["violations"][0]["kind"] == "EmptyPipeline"


def test_malformed_json(tmp_path):
    (tmp_path / "broken.json").write_text("{nope")
    assert main(["validate", str(tmp_path / "broken.json")]) == EXIT_INVALID
    assert main(["run", str(tmp_path / "broken.json")]) == EXIT_INVALID


def test_missing_file(tmp_path):
    assert main(["validate", str(tmp_path / "absent.json")]) == EXIT_INVALID


@pytest.mark.parametrize("path", APP_FILES, ids=lambda p: str(p.relative_to(WORKFLOWS)))
def test_every_shipped_app_validates(path):
    assert main(["validate", str(path)]) == EXIT_OK


def test_shipped_resource_files_parse():
    from pstflow.config import load_resources

    for path in sorted((WORKFLOWS / "resources").glob("*.json")):
        load_resources(path)


# -- run / simulate -----------------------------------------------------------------

def test_sequential_stages_on_local_backend(tmp_path, capsys):
    report_path = tmp_path / "report.json"
    code = main(["run", str(WORKFLOWS / "exp4_16stages.json"), "--backend", "local", "--cores", "16",
                 "--workdir", str(tmp_path / "run"), "--report", str(report_path)])
    assert code == EXIT_OK
    report = json.loads(report_path.read_text())
    assert report["status"] == "DONE"
    assert report["overheads"]["task_execution"] == pytest.approx(16 * 2.0, abs=2.0)


def test_no_retry_with_failures_exits_3(tmp_path, capsys):
    app = tiny_app(tmp_path, (1, 1, 16))
    code = main(["simulate", app, str(WORKFLOWS / "resources" / "sim_failures.json"), "--no-retry",
                 "--workdir", str(tmp_path / "run"), "--json"])
    assert code == EXIT_FAILED
    captured = capsys.readouterr()
    report = json.loads(captured.out)
    failed = sorted(u for u, s in report["task_states"].items() if s == "FAILED")
    assert failed and all(report["attempts"][u] == 1 for u in failed)
    assert failed[0] in captured.err


def test_simulated_strong_scaling_file(tmp_path):
    report_path = tmp_path / "r.json"
    code = main(["simulate", str(WORKFLOWS / "exp4_16tasks.json"), "--cores", "4",
                 "--workdir", str(tmp_path / "run"), "--report", str(report_path)])
    assert code == EXIT_OK
    assert json.loads(report_path.read_text())["sim_makespan"] == pytest.approx(4 * 2.0)


def test_hang_resource_file_recovers(tmp_path):
    report_path = tmp_path / "r.json"
    app = tiny_app(tmp_path, (1, 1, 32))
    code = main(["simulate", app, str(WORKFLOWS / "resources" / "sim_hang.json"),
                 "--workdir", str(tmp_path / "run"), "--report", str(report_path)])
    assert code == EXIT_OK
    assert json.loads(report_path.read_text())["rts_restarts"] == 1


def test_adaptive_example_cancels_later_iterations(tmp_path):
    work = tmp_path / "adaptive"
    shutil.copytree(WORKFLOWS / "adaptive", work, ignore=shutil.ignore_patterns("out"))
    report_path = tmp_path / "r.json"
    code = main(["run", str(work / "adaptive.json"), "--cores", "4",
                 "--workdir", str(tmp_path / "run"), "--report", str(report_path)])
    assert code == EXIT_OK
    states = json.loads(report_path.read_text())["task_states"]
    assert sum(s == "CANCELED" for s in states.values()) == 10
    assert sum(s == "DONE" for s in states.values()) == 15
    assert (work / "out" / "decision-iter3.json").exists()
    assert not (work / "out" / "decision-iter4.json").exists()


def test_run_report_round_trips_through_report_command(tmp_path, capsys):
    report_path, profile = tmp_path / "r.json", tmp_path / "p.csv"
    code = main(["run", tiny_app(tmp_path, (2, 2, 2)), "--cores", "4", "--workdir", str(tmp_path / "run"),
                 "--report", str(report_path), "--profile", str(profile)])
    assert code == EXIT_OK
    capsys.readouterr()
    assert main(["report", str(profile), "--json"]) == EXIT_OK
    printed = json.loads(capsys.readouterr().out)
    assert printed == json.loads(report_path.read_text())["overheads"]


def test_bad_resource_file_exits_2(tmp_path):
    bad = write(tmp_path / "res.json", {"cores": 1, "colour": "red"})
    assert main(["run", tiny_app(tmp_path), bad]) == EXIT_INVALID


def test_too_wide_for_pilot_exits_2(tmp_path):
    app = write(tmp_path / "wide.json", {"pipelines": [{"stages": [{"tasks": [
        {"executable": "true", "cores": 8}]}]}]})
    assert main(["run", app, "--cores", "2", "--workdir", str(tmp_path / "run")]) == EXIT_INVALID


# -- report -------------------------------------------------------------------

def synthetic_csv(tmp_path) -> str:
    rows = [",".join(CSV_HEADER), "0.0,amgr,setup_start,", "0.1,amgr,setup_end,", "0.1,wfp,mgmt_start,",
            "10.1,wfp,mgmt_end,", "10.1,rts,exec_start,t0", "110.1,rts,exec_end,t0",
            "110.1,amgr,teardown_start,", "111.1,amgr,teardown_end,"]
    path = tmp_path / "synthetic.csv"
    path.write_text("\n".join(rows) + "\n")
    return str(path)


def test_report_table(tmp_path, capsys):
    assert main(["report", synthetic_csv(tmp_path)]) == EXIT_OK
    out = capsys.readouterr().out
    assert "Management Overhead" in out and "10.000" in out and "100.000" in out


def test_report_json(tmp_path, capsys):
    assert main(["report", synthetic_csv(tmp_path), "--json"]) == EXIT_OK
    doc = json.loads(capsys.readouterr().out)
    assert doc["entk_setup"] == pytest.approx(0.1) and doc["task_execution"] == pytest.approx(100.0)


def test_report_empty_file(tmp_path):
    (tmp_path / "empty.csv").write_text("")
    assert main(["report", str(tmp_path / "empty.csv")]) == EXIT_INVALID


def test_report_unpaired(tmp_path):
    path = tmp_path / "u.csv"
    path.write_text(",".join(CSV_HEADER) + "\n0.0,amgr,setup_start,\n")
    assert main(["report", str(path)]) == EXIT_INVALID


def test_report_ignores_unknown_events(tmp_path, capsys):
    path = synthetic_csv(tmp_path)
    with open(path, "a") as fh:
        fh.write("50.0,x,coffee_break,\n")
    assert main(["report", path, "--json"]) == EXIT_OK
    assert json.loads(capsys.readouterr().out)["entk_management"] == pytest.approx(10.0)


# -- bench and the module entry point ------------------------------------------------

def test_bench_json(capsys):
    assert main(["bench", "--producers", "1", "2", "--tasks", "500", "--json"]) == EXIT_OK
    doc = json.loads(capsys.readouterr().out)
    assert [r["producers"] for r in doc["results"]] == [1, 2]
    assert doc["reference"]["total_time"] == 107.0


def test_bench_mismatched_consumers():
    assert main(["bench", "--producers", "1", "2", "--consumers", "1"]) == EXIT_INVALID


def test_python_dash_m(tmp_path):
    out = subprocess.run([sys.executable, "-m", "pstflow", "validate", tiny_app(tmp_path)],
                         capture_output=True, text=True)
    assert out.returncode == 0
