"""Scenario configuration, latency bound, closed-loop runner and trace analysis."""

from .analysis import TraceFormatError, analyze, format_report, percentiles
from .bound import E2EBudget, comm_timeout, e2e_bound
from .config import ConfigError, ScenarioConfig, default_scenario, default_scenario_path, from_dict, load_scenario
from .runner import LatencyRecord, RunResult, run

__all__ = [
    "ConfigError",
    "E2EBudget",
    "LatencyRecord",
    "RunResult",
    "ScenarioConfig",
    "TraceFormatError",
    "analyze",
    "comm_timeout",
    "default_scenario",
    "default_scenario_path",
    "e2e_bound",
    "format_report",
    "from_dict",
    "load_scenario",
    "percentiles",
    "run",
]
