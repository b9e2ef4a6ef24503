from .base import (
    Backend,
    BackendError,
    BackendEvent,
    BackendUnavailable,
    InsufficientCores,
    NotSimulated,
    PilotHandle,
    PilotState,
    ResourceRequest,
    Telemetry,
)
from .local import LocalBackend, SpawnFailed
from .simulated import (
    FaultProgram,
    GenerationSchedule,
    SimConfig,
    SimEvent,
    SimResult,
    SimTask,
    SimulatedBackend,
    attempt_fails,
    generation_schedule,
    simulate_run,
    uniform_makespan,
)
from .staging import (
    DestinationUnwritable,
    MissingSource,
    StagingContext,
    StagingFailed,
    StagingReport,
    aggregate,
    stage,
)

__all__ = [
    "Backend", "BackendError", "BackendEvent", "BackendUnavailable", "InsufficientCores", "NotSimulated",
    "PilotHandle", "PilotState", "ResourceRequest", "Telemetry", "LocalBackend", "SpawnFailed",
    "FaultProgram", "GenerationSchedule", "SimConfig", "SimEvent", "SimResult", "SimTask",
    "SimulatedBackend", "attempt_fails", "generation_schedule", "simulate_run", "uniform_makespan",
    "DestinationUnwritable", "MissingSource", "StagingContext", "StagingFailed", "StagingReport",
    "aggregate", "stage",
]
