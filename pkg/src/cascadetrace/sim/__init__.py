"""Toy declarative control plane used to exercise the tracing library."""

from .store import Conflict, NotFound, ObjectStore, SimObject, WatchEvent
from .runtime import DeterministicRuntime, ScenarioTimeout, ThreadedRuntime
from .scenarios import (
    BUILTIN_SCENARIOS,
    ScenarioReport,
    ScenarioRunner,
    load_scenario,
    scenario_steps,
)

__all__ = [
    "BUILTIN_SCENARIOS",
    "Conflict",
    "DeterministicRuntime",
    "NotFound",
    "ObjectStore",
    "ScenarioReport",
    "ScenarioRunner",
    "ScenarioTimeout",
    "SimObject",
    "ThreadedRuntime",
    "WatchEvent",
    "load_scenario",
    "scenario_steps",
]
