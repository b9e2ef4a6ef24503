"""The narrow interface through which the engine drives a runtime system."""

from __future__ import annotations

import threading
from abc import ABC, abstractmethod
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from typing import Any


class BackendError(Exception):
    pass


class BackendUnavailable(BackendError):
    pass


class NotSimulated(BackendError):
    pass


class InsufficientCores(BackendError):
    pass


class PilotState(str, Enum):
    REQUESTED = "REQUESTED"
    QUEUED = "QUEUED"
    ACTIVE = "ACTIVE"
    DONE = "DONE"
    FAILED = "FAILED"
    CANCELED = "CANCELED"


@dataclass(frozen=True)
class ResourceRequest:
    cores: int
    walltime: float = 60.0  # minutes
    backend: str = "local"
    backend_config: dict[str, Any] = field(default_factory=dict)

    def problems(self, max_task_cores: int = 1) -> list[str]:
        out = []
        if not isinstance(self.cores, int) or self.cores < 1:
            out.append(f"cores must be a positive integer, got {self.cores!r}")
        elif self.cores < max_task_cores:
            out.append(f"cores={self.cores} is smaller than the widest task ({max_task_cores})")
        if not self.walltime > 0:
            out.append(f"walltime must be > 0, got {self.walltime!r}")
        return out


@dataclass(frozen=True)
class PilotHandle:
    pilot_id: str
    state: PilotState
    cores: int
    started_at: float | None = None


@dataclass(frozen=True)
class BackendEvent:
    """One entry of a backend instance's ordered event stream.

    ``kind`` is ``exec_start`` or ``exec_end``; an ``exec_end`` is the
    completion, carrying either an exit code or a failure ``reason`` (or both).
    """

    kind: str
    uid: str
    attempt: int
    instance: int
    time: float
    exit_code: int | None = None
    reason: str | None = None
    canceled: bool = False


class Telemetry:
    """Backend-side accounting that survives backend restarts."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self.spawns: Counter[str] = Counter()
        self.spawn_log: list[tuple[int, str, int]] = []  # (instance, uid, attempt)
        self.cores_in_use = 0
        self.max_cores_in_use = 0
        self.max_running = 0
        self._running = 0

    def spawned(self, instance: int, uid: str, attempt: int, cores: int) -> None:
        with self._lock:
            self.spawns[uid] += 1
            self.spawn_log.append((instance, uid, attempt))
            self.cores_in_use += cores
            self._running += 1
            self.max_cores_in_use = max(self.max_cores_in_use, self.cores_in_use)
            self.max_running = max(self.max_running, self._running)

    def finished(self, cores: int) -> None:
        with self._lock:
            # a purge already zeroed the counters for processes it killed
            self.cores_in_use = max(0, self.cores_in_use - cores)
            self._running = max(0, self._running - 1)

    def reset_usage(self) -> None:
        with self._lock:
            self.cores_in_use = 0
            self._running = 0


class Backend(ABC):
    """acquire / submit / events / liveness / cancel / purge.

    ``submit`` is idempotent per ``(uid, attempt)``: a repeated hand-off of the
    same attempt is ignored. Submissions the backend cannot run come back as
    ``exec_end`` events with a reason.
    """

    name = "backend"

    def __init__(self, instance_id: int) -> None:
        self.instance_id = instance_id

    @abstractmethod
    def acquire(self, request: ResourceRequest) -> PilotHandle: ...

    @abstractmethod
    def submit(self, batch: list[dict[str, Any]]) -> None: ...

    @abstractmethod
    def events(self, cursor: int, timeout: float = 0.0) -> tuple[list[BackendEvent], int]:
        """Events from position ``cursor`` on, and the new cursor."""

    @abstractmethod
    def liveness(self) -> bool: ...

    @abstractmethod
    def cancel(self, uid: str) -> None: ...

    @abstractmethod
    def purge(self) -> None:
        """Tear the instance down hard; nothing it held survives."""

    def shutdown(self) -> None:
        """Orderly stop at the end of a run."""
        self.purge()

    def inject(self, **mutation: Any) -> None:
        raise NotSimulated(f"{self.name} backend does not accept fault programs")
