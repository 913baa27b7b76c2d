"""Scenario runner, synthetic training loop, metrics and CLI."""

from .evolution import ReplicaOracle, evolution_rule, initial_state, same_state
from .metrics import SCHEMA_VERSION, RecoveryMetrics, RunMetrics, load_summary
from .runtime import SimRuntime, run_scenario
from .scenario import (LinkConfig, ModeConfig, RunConfig, Scenario, ScenarioEvent,
                       load_scenario, scenario_from_dict, validate_scenario)
from .stress import StressResult, stress

__all__ = [
    "SCHEMA_VERSION", "LinkConfig", "ModeConfig", "RecoveryMetrics", "ReplicaOracle",
    "RunConfig", "RunMetrics", "Scenario", "ScenarioEvent", "SimRuntime", "StressResult",
    "evolution_rule", "initial_state", "load_scenario", "load_summary", "run_scenario",
    "same_state", "scenario_from_dict", "stress", "validate_scenario",
]
