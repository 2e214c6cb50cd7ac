"""Byzantine-fault-tolerant workflow scheduling over PBFT, in a seeded
discrete-event simulator."""

from .harness import InvalidConfig, ScenarioConfig, run_scenario, simulate
from .metrics import MetricsReport, compute_metrics, emit_report
from .simnet import Simulator, Trace

__all__ = ["InvalidConfig", "MetricsReport", "ScenarioConfig", "Simulator", "Trace", "compute_metrics",
           "emit_report", "run_scenario", "simulate"]
