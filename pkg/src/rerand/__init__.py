"""Re-randomization tests for minimization-randomized trials."""

__version__ = "0.1.0"

from .cohort import Cohort, CohortError, Outcome, Schema, StratumFactor, Subject, load_cohort, load_schema
from .engine import (
    AdaptivePolicy,
    FixedPolicy,
    ParametricPolicy,
    PRPolicy,
    RerandConfig,
    RerandReport,
    parse_policy,
    run_test,
    run_with_store,
)
from .minimization import MinimizationParams, randomize_batch, randomize_cohort
from .policy import AdaptiveParams, adaptive_bounds, adaptive_step, pr_repetitions, rule_table
from .stats import StatKind, TestStatistic, stratified_logrank, wald_linear, wald_logistic
from .store import ReplicateStore, pregenerate

__all__ = [
    "Cohort",
    "CohortError",
    "Outcome",
    "Schema",
    "StratumFactor",
    "Subject",
    "load_cohort",
    "load_schema",
    "AdaptivePolicy",
    "FixedPolicy",
    "ParametricPolicy",
    "PRPolicy",
    "RerandConfig",
    "RerandReport",
    "parse_policy",
    "run_test",
    "run_with_store",
    "MinimizationParams",
    "randomize_batch",
    "randomize_cohort",
    "AdaptiveParams",
    "adaptive_bounds",
    "adaptive_step",
    "pr_repetitions",
    "rule_table",
    "StatKind",
    "TestStatistic",
    "stratified_logrank",
    "wald_linear",
    "wald_logistic",
    "ReplicateStore",
    "pregenerate",
]
