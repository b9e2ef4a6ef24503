"""Ensemble workflow engine: pipelines of stages of tasks over a durable broker."""

from .appmanager import (
    Aborted,
    AppManager,
    Crashed,
    ResourceAcquisitionFailed,
    RestartBudgetExhausted,
    RtsRestartBudgetExhausted,
    RunAborted,
    RunReport,
    ValidationFailed,
    resume,
    run,
)
from .backends import ResourceRequest, SimConfig, Telemetry, simulate_run
from .broker import Broker
from .config import RunConfig, load_resources
from .model import (
    AppDescription,
    EntityState,
    TaskState,
    application_from_dict,
    load_application,
    make_application,
    validate_application,
)
from .profiler import OverheadReport, Profiler, compute_overheads, read_profile
from .state import CorruptCheckpoint, GlobalState, recover

__version__ = "0.1.0"

__all__ = [
    "Aborted", "AppManager", "Crashed", "ResourceAcquisitionFailed", "RestartBudgetExhausted",
    "RtsRestartBudgetExhausted", "RunAborted", "RunReport", "ValidationFailed", "resume", "run",
    "ResourceRequest", "SimConfig", "Telemetry", "simulate_run", "Broker", "RunConfig", "load_resources",
    "AppDescription", "EntityState", "TaskState", "application_from_dict", "load_application",
    "make_application", "validate_application", "OverheadReport", "Profiler", "compute_overheads",
    "read_profile", "CorruptCheckpoint", "GlobalState", "recover",
]
