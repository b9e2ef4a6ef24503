from __future__ import annotations

import logging
from pathlib import Path

import pytest

from pstflow import RunConfig

WORKFLOWS = Path(__file__).resolve().parent.parent / "workflows"


@pytest.fixture(autouse=True)
def _quiet_logs(caplog):
    caplog.set_level(logging.ERROR, logger="pstflow")


@pytest.fixture
def fast_config(tmp_path):
    """Config for engine tests: no fsync, quick heartbeats, a private workdir."""

    def make(**kw) -> RunConfig:
        base = dict(fsync=False, heartbeat_interval=0.05, workdir=tmp_path / "run", base_dir=tmp_path)
        base.update(kw)
        return RunConfig(**base)

    return make


# one line per acceptance criterion, printed after the run
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])
