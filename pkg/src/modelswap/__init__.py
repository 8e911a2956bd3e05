"""Simulator and eviction policies for multi-tenant model management on a memory-bounded edge server."""

from .core import (
    ApplicationSpec,
    InferenceRequest,
    InvalidScenario,
    MemoryState,
    ModelVariant,
    OutcomeKind,
    Policy,
    RequestOutcome,
    RequestWindow,
    ScenarioConfig,
    classify,
    default_scenario,
    validate_scenario,
)
from .engine import RunLog, run
from .workload import WorkloadPair, WorkloadTrace, generate_pair

__version__ = "0.1.0"

__all__ = [
    "ApplicationSpec", "InferenceRequest", "InvalidScenario", "MemoryState", "ModelVariant",
    "OutcomeKind", "Policy", "RequestOutcome", "RequestWindow", "ScenarioConfig", "classify",
    "default_scenario", "validate_scenario", "RunLog", "run", "WorkloadPair", "WorkloadTrace",
    "generate_pair",
]
