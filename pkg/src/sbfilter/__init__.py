"""Training-free Schrödinger-bridge ensemble filtering and generation.

A toolkit for nonlinear optimal filtering built around a static,
derivative-free Schrödinger-bridge sampler: given an ensemble of samples from
a target distribution, an explicit softmax-form drift steers a diffusion from
a point mass onto that target in unit time, with no training loop.  The same
map, reweighted by an observation likelihood, performs the Bayesian analysis
step of a sequential filter.

Modules
-------
core
    Ensembles, stable log-weight arithmetic, splittable RNG streams, metrics.
sbgen
    The bridge drift and Euler–Maruyama generator (anchored/weighted forms).
linear_sde
    Closed-form linear-SDE transition moments, Gaussian mixtures, and the
    numerical verification that the bridge drift equals the score of the
    time-reversed diffusion.
filters
    Bridge-based analysis steps plus particle-filter and ensemble-Kalman
    baselines over a common state-space-model interface.
models
    Benchmark systems: sine dynamics, switching double well, cyclic
    Lorenz-96, a conjugate Gaussian-mixture posterior case, two-moons data.
harness
    Config-driven, reproducible experiment runner and metrics.
cli
    ``sbfilter`` command-line interface.
"""

from sbfilter.core import (
    DegenerateWeightsError,
    RngStream,
    log_sum_exp,
    normalize_log_weights,
    rmse,
    smoothed_rmse,
)
from sbfilter.sbgen import (
    DriftSpec,
    GenSchedule,
    SchrodingerBridgeGenerator,
    sb_drift,
    sb_generate,
    sb_log_kernel,
)
from sbfilter.filters import (
    FilterParams,
    StateSpaceModel,
    ensbf_analysis,
    ensbf_is_analysis,
    enkf_step,
    pf_step,
    run_filter,
)
from sbfilter.linear_sde import GaussianMixture, check_score_control_identity
from sbfilter.harness import (
    ExperimentConfig,
    convergence_sweep,
    energy_distance,
    load_config,
    run_experiment,
)

__all__ = [
    "DegenerateWeightsError",
    "RngStream",
    "log_sum_exp",
    "normalize_log_weights",
    "rmse",
    "smoothed_rmse",
    "DriftSpec",
    "GenSchedule",
    "SchrodingerBridgeGenerator",
    "sb_log_kernel",
    "sb_drift",
    "sb_generate",
    "FilterParams",
    "StateSpaceModel",
    "ensbf_analysis",
    "ensbf_is_analysis",
    "pf_step",
    "enkf_step",
    "run_filter",
    "GaussianMixture",
    "check_score_control_identity",
    "ExperimentConfig",
    "load_config",
    "run_experiment",
    "convergence_sweep",
    "energy_distance",
]

__version__ = "0.1.0"
