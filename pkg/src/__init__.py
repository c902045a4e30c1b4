"""
Fork-Join Lab - Limited Fork-Join Simulation and Verification Package

A laboratory for the limited fork-join queueing model: steady-state job
delay simulation, the independence upper bound, coupling and busy-period
experiments, exact association checks under Poisson oversampling, and the
balance-equation evidence against product-form independence.

Author: Fork-Join Lab Team
Version: 1.0.0
License: MIT
"""

__version__ = "1.0.0"
__author__ = "Fork-Join Lab Team"
__email__ = "team@forkjoinlab.dev"
__license__ = "MIT"

from .association import (
    ArrivalPatternDist,
    AssociationVerdict,
    EnumerationLimitError,
    MonotoneBooleanFunction,
    arrival_pattern_dist,
    beta_threshold,
    check_association,
    covariance_check,
    enumerate_monotone_functions,
)
from .bounds import AnalyticMM1, Empirical, TaskDelayCdf, independence_ccdf
from .config import ConfigError, Scenario, parse_config
from .harness import MissingOutputsError, ResultManifest, emit_plotdata, run_scenario
from .model import (
    Deterministic,
    Exponential,
    HyperExponential,
    ServiceDistribution,
    SystemConfig,
    TruncatedPareto,
    UnstableSystemError,
    random_stream,
)
from .simulator import simulate_coupled, simulate_forkjoin, simulate_single_queue

__all__ = [
    "AnalyticMM1",
    "ArrivalPatternDist",
    "AssociationVerdict",
    "ConfigError",
    "Deterministic",
    "Empirical",
    "EnumerationLimitError",
    "Exponential",
    "HyperExponential",
    "MissingOutputsError",
    "MonotoneBooleanFunction",
    "ResultManifest",
    "Scenario",
    "ServiceDistribution",
    "SystemConfig",
    "TaskDelayCdf",
    "TruncatedPareto",
    "UnstableSystemError",
    "arrival_pattern_dist",
    "beta_threshold",
    "check_association",
    "covariance_check",
    "emit_plotdata",
    "enumerate_monotone_functions",
    "independence_ccdf",
    "parse_config",
    "random_stream",
    "run_scenario",
    "simulate_coupled",
    "simulate_forkjoin",
    "simulate_single_queue",
]
