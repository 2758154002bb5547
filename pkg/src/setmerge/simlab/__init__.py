"""Simulation harness: coverage and size of merged sets over replications."""

from .core import ExperimentResult, Flag, ResultRow, ScenarioConfig, method_label, run_replications
from .normal import (
    SensitivityResult,
    TrendReport,
    normal_mean_replication,
    oracle_fisher_region,
    run_normal_mean,
    run_oracle_p_benchmark,
    run_sensitivity,
    run_size_trend,
    run_uk_region_check,
)

__all__ = [
    "ScenarioConfig",
    "ExperimentResult",
    "ResultRow",
    "Flag",
    "method_label",
    "run_replications",
    "run_normal_mean",
    "run_oracle_p_benchmark",
    "normal_mean_replication",
    "oracle_fisher_region",
    "run_sensitivity",
    "SensitivityResult",
    "run_size_trend",
    "TrendReport",
    "run_uk_region_check",
]
