"""Coupled two-fidelity Bayesian optimization for analog circuit sizing."""

from .coupling import CoupledGp, build_coupled, estimate_rho, predict_expensive, transfer_update
from .evaluator import BENCHMARKS, BuiltinEvaluator, SubprocessEvaluator, get_benchmark
from .gp import GpModel, KernelHyper, expected_improvement, fit_gp, gp_posterior
from .objective import Constraint, FomSpec, Term, effective_fom
from .orchestrator import (
    RunConfig, RunResult, incumbent, run_coupled, run_fusion_baseline, run_plain_baseline,
)
from .space import ParameterSpace, ParameterSpec, validate_space

__version__ = "0.1.0"
