"""Run configuration and the resource config file."""

from __future__ import annotations

import json
import tempfile
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Callable

from .backends import ResourceRequest, SimConfig, Telemetry


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    task_retry_limit: int | None = 1  # resubmissions per task; None = unlimited
    rts_restart_limit: int = 3
    pilot_retry_limit: int = 3
    component_restart_limit: int = 3
    heartbeat_interval: float = 0.5
    misses_allowed: int = 2
    lease: float = 30.0
    fsync: bool = True
    # journal the engine's own queues; recovery works from the state checkpoint either way
    durable_queues: bool = False
    workdir: Path | None = None
    base_dir: Path | None = None
    profile_path: Path | None = None
    profile: bool = True
    timeout: float | None = None
    telemetry: Telemetry | None = None
    # test hooks: kill a component once this transaction commits; checkpoint
    # (and optionally stop dead) once a predicate over the state holds
    kill_plan: list[tuple[str, int]] = field(default_factory=list)
    checkpoint_when: Callable[[Any], bool] | None = None
    crash_after_checkpoint: bool = False

    def __post_init__(self) -> None:
        if self.task_retry_limit is not None and self.task_retry_limit < 0:
            raise ConfigError("task_retry_limit must be >= 0 or None")
        for name in ("rts_restart_limit", "pilot_retry_limit", "component_restart_limit"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.workdir is not None:
            self.workdir = Path(self.workdir)
        if self.base_dir is not None:
            self.base_dir = Path(self.base_dir)
        if self.profile_path is not None:
            self.profile_path = Path(self.profile_path)

    def resolved_workdir(self) -> Path:
        if self.workdir is None:
            self.workdir = Path(tempfile.mkdtemp(prefix="pstflow-"))
        self.workdir.mkdir(parents=True, exist_ok=True)
        return self.workdir


_RESOURCE_KEYS = {"backend", "cores", "walltime", "queue_wait", "failure", "retries", "heartbeat", "sim"}
_FAILURE_KEYS = {"failure_rate", "hang_after", "deny_pilots", "seed"}
_RETRY_KEYS = {"task", "rts", "pilot", "component"}
_HEARTBEAT_KEYS = {"interval", "misses_allowed"}


def _only(doc: Any, allowed: set[str], where: str) -> dict[str, Any]:
    if not isinstance(doc, dict):
        raise ConfigError(f"{where}: expected an object")
    extra = set(doc) - allowed
    if extra:
        raise ConfigError(f"{where}: unknown field(s) {', '.join(sorted(extra))}")
    return doc


def resources_from_dict(doc: Any) -> tuple[ResourceRequest, dict[str, Any]]:
    """Parse a resource document into a request plus RunConfig overrides.

    Simulated-backend settings (queue_wait, failure program, clock options)
    travel in ``backend_config``.
    """
    doc = _only(doc, _RESOURCE_KEYS, "resources")
    backend = doc.get("backend", "local")
    if backend not in ("local", "sim"):
        raise ConfigError(f"resources: backend must be 'local' or 'sim', got {backend!r}")
    if "cores" not in doc:
        raise ConfigError("resources: 'cores' is required")
    sim: dict[str, Any] = dict(_only(doc.get("sim", {}), {f.name for f in fields(SimConfig)}, "resources.sim"))
    if "queue_wait" in doc:
        sim["queue_wait"] = float(doc["queue_wait"])
    sim.update(_only(doc.get("failure", {}), _FAILURE_KEYS, "resources.failure"))
    try:
        SimConfig(**sim)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"resources: {exc}") from exc
    request = ResourceRequest(cores=doc["cores"], walltime=float(doc.get("walltime", 60.0)), backend=backend,
                              backend_config=sim)
    overrides: dict[str, Any] = {}
    retries = _only(doc.get("retries", {}), _RETRY_KEYS, "resources.retries")
    for key, name in (("task", "task_retry_limit"), ("rts", "rts_restart_limit"),
                      ("pilot", "pilot_retry_limit"), ("component", "component_restart_limit")):
        if key in retries:
            overrides[name] = retries[key]
    hb = _only(doc.get("heartbeat", {}), _HEARTBEAT_KEYS, "resources.heartbeat")
    if "interval" in hb:
        overrides["heartbeat_interval"] = float(hb["interval"])
    if "misses_allowed" in hb:
        overrides["misses_allowed"] = int(hb["misses_allowed"])
    return request, overrides


def load_resources(path: str | Path) -> tuple[ResourceRequest, dict[str, Any]]:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except OSError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return resources_from_dict(doc)


def with_overrides(config: RunConfig, overrides: dict[str, Any]) -> RunConfig:
    return replace(config, **overrides)
