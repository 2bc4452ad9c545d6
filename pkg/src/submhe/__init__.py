"""Suboptimal moving horizon estimation with a robustly stable auxiliary observer."""

from .analysis import GainReport, TheoryParams, aggregate_gains, empirical_rges_check, gain_table, reactor_theory_params
from .errors import (
    CertificateError,
    ConfigurationError,
    ContractViolation,
    NumericalOverflowError,
    SubMHEError,
    WindowUnderflowError,
)
from .harness import MetricsTable, RunConfig, RunRecord, emit, monte_carlo, run_single, sample_box_uniform
from .mhe import CostWeights, Decision, MheConfig, MovingHorizonEstimator, Window, accept, cost_function
from .model import BoxSet, DiscreteSystem, linear_model, reactor_model, simulate
from .observer import OutputInjectionObserver, contraction_check, derive_rges_constants, reactor_observer
from .solver import SolverSettings, brute_force_reference, solve

__version__ = "0.1.0"
