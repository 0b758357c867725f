"""Annealed flow transport Monte Carlo.

Sequential Monte Carlo over a geometric annealing path where each step
first pushes particles through a normalizing flow fitted to that step,
with SMC and flow-based variational baselines for comparison.
"""

from .config import ConfigError, RunConfig, build_config, parse_config
from .ensemble import Ensemble, ess, init_ensemble, logsumexp, resample_multinomial, reweight
from .flows import FlowParams, make_flow
from .kernels import KernelConfig, StepSchedule, mutate
from .sampler import RunReport, run, run_aft, run_smc, run_vi
from .targets import AnnealedFamily, linear_schedule, make_family
from .trainer import OptimizerConfig, learn_flow

__version__ = "0.1.0"

__all__ = [
    "AnnealedFamily", "ConfigError", "Ensemble", "FlowParams", "KernelConfig", "OptimizerConfig",
    "RunConfig", "RunReport", "StepSchedule", "build_config", "ess", "init_ensemble",
    "learn_flow", "linear_schedule", "logsumexp", "make_family", "make_flow", "mutate",
    "parse_config", "resample_multinomial", "reweight", "run", "run_aft", "run_smc", "run_vi",
]
