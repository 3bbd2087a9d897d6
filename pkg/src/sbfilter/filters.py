"""Sequential ensemble filtering with bridge-based analysis steps.

Four methods over one state-space-model interface:

``ensbf``
    Predict by propagating each particle, then replace the weighted-prior
    analysis update with a bridge generation whose per-sample extra
    log-weights are the observation log-likelihoods.  Training-free and
    derivative-free.
``ensbf_is``
    Change-of-measure variant: particles are proposed from Q(. | X_j, y),
    and the bridge weights become log-lik + (log P - log Q).  With the
    prior-transition proposal the correction term is exactly zero, computed
    in that order so results are bit-identical to ``ensbf`` under shared
    streams.
``pf``
    Bootstrap particle filter: propagate, weight, resample.
``enkf``
    Stochastic (perturbed-observation) ensemble Kalman filter.

RNG layout inside ``run_filter``: the initial ensemble uses ``rng.child(0)``;
step j uses ``rng.child(1 + j)``, which splits into ``.child(0)`` for
propagation / proposal sampling, ``.child(1)`` for bridge noise, and
``.child(2)`` for resampling or observation perturbations.  This keying is
what makes the ensbf/ensbf_is bit-identity testable.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, List, Optional

import numpy as np
from scipy import linalg

from sbfilter.core import (
    DegenerateWeightsError,
    RngStream,
    normalize_log_weights,
    rmse,
    validate_ensemble,
)
from sbfilter.sbgen import DriftSpec, GenSchedule, sb_generate

__all__ = [
    "StateSpaceModel",
    "FilterParams",
    "PosteriorSummary",
    "FilterRun",
    "PriorTransitionProposal",
    "NudgedGaussianProposal",
    "log_likelihood",
    "predict",
    "ensbf_analysis",
    "ensbf_is_analysis",
    "pf_step",
    "enkf_step",
    "run_filter",
]


@dataclass(frozen=True)
class StateSpaceModel:
    """Dynamics, observation map, and observation noise.

    propagate : (ensemble (B, d), RngStream) -> (B, d)
        One step of X_{j+1} = f(X_j, noise), applied particlewise.
    observe_mean : (B, d) -> (B, n)
        Deterministic observation map g, vectorized over the batch.
    obs_cov : (n, n) symmetric positive definite
        Observation noise covariance; validated by Cholesky at construction.
    transition_mean, proc_sigma : optional
        For models of the form X_{j+1} = m(X_j) + proc_sigma * xi with
        isotropic Gaussian noise, these two enable the exact transition
        log-density needed by the importance-sampling variant.
    """

    propagate: Callable[[np.ndarray, RngStream], np.ndarray]
    observe_mean: Callable[[np.ndarray], np.ndarray]
    obs_cov: np.ndarray
    transition_mean: Optional[Callable[[np.ndarray], np.ndarray]] = None
    proc_sigma: Optional[float] = None

    def __post_init__(self):
        cov = np.atleast_2d(np.asarray(self.obs_cov, dtype=np.float64))
        if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
            raise ValueError("obs_cov must be a square matrix")
        if not np.allclose(cov, cov.T, rtol=1e-12, atol=0):
            raise ValueError("obs_cov must be symmetric")
        try:
            chol = linalg.cholesky(cov, lower=True)
        except linalg.LinAlgError as exc:
            raise ValueError("obs_cov must be positive definite") from exc
        cov = np.ascontiguousarray(cov)
        cov.flags.writeable = False
        object.__setattr__(self, "obs_cov", cov)
        object.__setattr__(self, "_obs_chol", chol)
        if self.proc_sigma is not None and self.proc_sigma <= 0:
            raise ValueError("proc_sigma must be positive when given")

    @property
    def obs_dim(self) -> int:
        return self.obs_cov.shape[0]

    @property
    def has_transition_density(self) -> bool:
        return self.transition_mean is not None and self.proc_sigma is not None

    def transition_log_density(self, x_next: np.ndarray, x_prev: np.ndarray) -> np.ndarray:
        """log P(x_next | x_prev) for additive isotropic Gaussian dynamics, (B,)."""
        if not self.has_transition_density:
            raise ValueError(
                "model does not expose a transition density "
                "(needs transition_mean and proc_sigma)"
            )
        mean = self.transition_mean(x_prev)
        d = x_next.shape[1]
        s2 = self.proc_sigma ** 2
        quad = np.sum((x_next - mean) ** 2, axis=1) / (2.0 * s2)
        return -quad - 0.5 * d * np.log(2.0 * np.pi * s2)


def log_likelihood(model: StateSpaceModel, x, y) -> np.ndarray:
    """Observation log-likelihood up to its constant normalizer.

    ``-(g(x) - y)^T Sigma^{-1} (g(x) - y) / 2`` for a single state vector or
    a (B, d) batch; every consumer cancels the dropped constant.
    """
    X = np.asarray(x, dtype=np.float64)
    single = X.ndim == 1
    if single:
        X = X[None, :]
    y = np.asarray(y, dtype=np.float64).ravel()
    resid = model.observe_mean(X) - y[None, :]
    if resid.shape[1] != model.obs_dim:
        raise ValueError("observation dimension mismatch")
    solved = linalg.cho_solve((model._obs_chol, True), resid.T)
    # an absurdly unlikely observation overflows the quadratic form to -inf,
    # which is exactly the weight it deserves
    with np.errstate(over="ignore"):
        out = -0.5 * np.sum(resid.T * solved, axis=0)
    return float(out[0]) if single else out


def _apply_weight_floor(lw: np.ndarray, floor: Optional[float]) -> np.ndarray:
    if floor is None:
        return lw
    return np.maximum(lw, floor)


@dataclass(frozen=True)
class FilterParams:
    """Knobs shared by all analysis steps.

    B is both the ensemble size and the bridge data size (M = B).  N is the
    number of Euler steps per analysis.  anchor_mode 'prior_mean' starts the
    bridge at the predicted-ensemble mean (the default, better when states
    live far from the origin); 'zero' starts at the origin.
    """

    B: int
    N: int
    T: float = 1.0
    anchor_mode: str = "prior_mean"
    sb_sigma: float = 1.0
    resampling: str = "systematic"
    is_proposal: Optional[object] = None
    weight_floor: Optional[float] = None
    drift_eval: str = "auto"

    def __post_init__(self):
        if self.B < 2:
            raise ValueError(f"B must be >= 2, got {self.B}")
        if self.N < 1:
            raise ValueError(f"N must be >= 1, got {self.N}")
        if self.T <= 0:
            raise ValueError("T must be positive")
        if self.anchor_mode not in ("zero", "prior_mean"):
            raise ValueError(f"unknown anchor_mode {self.anchor_mode!r}")
        if self.resampling not in ("systematic", "multinomial"):
            raise ValueError(f"unknown resampling {self.resampling!r}")
        if self.sb_sigma <= 0:
            raise ValueError("sb_sigma must be positive")


@dataclass(frozen=True)
class PosteriorSummary:
    """Per-step posterior statistics (population variance, ddof=0)."""

    mean: np.ndarray
    variance: np.ndarray
    ensemble: Optional[np.ndarray] = None

    @classmethod
    def from_ensemble(cls, ens: np.ndarray, keep: bool = False) -> "PosteriorSummary":
        return cls(mean=ens.mean(axis=0), variance=ens.var(axis=0),
                   ensemble=ens.copy() if keep else None)


def predict(model: StateSpaceModel, posterior: np.ndarray, rng: RngStream) -> np.ndarray:
    """Propagate every particle one model step with independent noise."""
    posterior = validate_ensemble(posterior, "posterior")
    out = np.asarray(model.propagate(posterior, rng), dtype=np.float64)
    if out.shape != posterior.shape:
        raise ValueError(
            f"propagate changed ensemble shape {posterior.shape} -> {out.shape}"
        )
    if not np.all(np.isfinite(out)):
        raise RuntimeError("model diverged")
    return out


def _anchor_for(prior: np.ndarray, params: FilterParams) -> np.ndarray:
    if params.anchor_mode == "prior_mean":
        return prior.mean(axis=0)
    return np.zeros(prior.shape[1])


def _bridge(prior: np.ndarray, lw: np.ndarray, params: FilterParams,
            rng: RngStream) -> np.ndarray:
    spec = DriftSpec(
        data=prior,
        T=params.T,
        anchor=_anchor_for(prior, params),
        diffusion_sigma=params.sb_sigma,
        extra_log_weights=lw,
        drift_eval=params.drift_eval,
    )
    return sb_generate(spec, GenSchedule(N=params.N, B_out=params.B), rng)


def ensbf_analysis(prior: np.ndarray, y, model: StateSpaceModel,
                   params: FilterParams, rng: RngStream) -> np.ndarray:
    """Bridge analysis: resample the prior reweighted by the likelihood of y.

    The observation enters only through per-particle log-likelihoods used as
    extra log-weights in the bridge drift; no derivatives, no training.
    """
    prior = validate_ensemble(prior, "prior")
    lw = _apply_weight_floor(log_likelihood(model, prior, y), params.weight_floor)
    return _bridge(prior, lw, params, rng)


def ensbf_is_analysis(posterior: np.ndarray, y, model: StateSpaceModel,
                      params: FilterParams, rng: RngStream) -> np.ndarray:
    """Change-of-measure analysis: propose from Q, correct by log P - log Q.

    The correction is computed first and added to the log-likelihood, so the
    prior-transition proposal (log P == log Q termwise) contributes exactly
    0.0 and reproduces ``ensbf_analysis`` bit-for-bit under shared streams.
    """
    proposal = params.is_proposal
    if proposal is None:
        raise ValueError("ensbf_is requires params.is_proposal")
    if not model.has_transition_density:
        raise ValueError(
            "ensbf_is requires a model transition density "
            "(needs transition_mean and proc_sigma)"
        )
    posterior = validate_ensemble(posterior, "posterior")
    proposed = np.asarray(proposal.sample(model, posterior, y, rng.child(0)),
                          dtype=np.float64)
    if not np.all(np.isfinite(proposed)):
        raise RuntimeError("model diverged")
    correction = (model.transition_log_density(proposed, posterior)
                  - proposal.log_density(model, proposed, posterior, y))
    lw = log_likelihood(model, proposed, y) + correction
    lw = _apply_weight_floor(lw, params.weight_floor)
    return _bridge(proposed, lw, params, rng.child(1))


class PriorTransitionProposal:
    """Q = P(X_{j+1} | X_j): importance weights reduce to the likelihood."""

    def sample(self, model, posterior, y, rng: RngStream) -> np.ndarray:
        return model.propagate(posterior, rng)

    def log_density(self, model, x_next, x_prev, y) -> np.ndarray:
        return model.transition_log_density(x_next, x_prev)


class NudgedGaussianProposal:
    """Gaussian proposal whose mean is pulled toward the observation.

    Demonstration proposal for models with additive isotropic Gaussian noise
    and a scalar-scaled full-state observation y = obs_scale * x + noise:
    the proposal mean is (1 - gain) * m(X) + gain * y / obs_scale with the
    model's own process noise.  Not part of any benchmark protocol.
    """

    def __init__(self, gain: float, obs_scale: float = 1.0):
        if not 0.0 <= gain <= 1.0:
            raise ValueError("gain must lie in [0, 1]")
        if obs_scale == 0.0:
            raise ValueError("obs_scale must be nonzero")
        self.gain = gain
        self.obs_scale = obs_scale

    def _mean(self, model, posterior, y):
        target = np.asarray(y, dtype=np.float64).ravel() / self.obs_scale
        return (1.0 - self.gain) * model.transition_mean(posterior) \
            + self.gain * target[None, :]

    def sample(self, model, posterior, y, rng: RngStream) -> np.ndarray:
        mean = self._mean(model, posterior, y)
        eps = rng.generator().standard_normal(mean.shape)
        return mean + model.proc_sigma * eps

    def log_density(self, model, x_next, x_prev, y) -> np.ndarray:
        mean = self._mean(model, x_prev, y)
        s2 = model.proc_sigma ** 2
        d = x_next.shape[1]
        return -np.sum((x_next - mean) ** 2, axis=1) / (2.0 * s2) \
            - 0.5 * d * np.log(2.0 * np.pi * s2)


def _resample_indices(p: np.ndarray, scheme: str, rng: RngStream) -> np.ndarray:
    B = p.size
    gen = rng.generator()
    if scheme == "multinomial":
        return gen.choice(B, size=B, p=p)
    # systematic: one uniform offset, B evenly spaced positions
    positions = (gen.random() + np.arange(B)) / B
    cum = np.cumsum(p)
    cum[-1] = 1.0  # guard against round-off at the top
    return np.minimum(np.searchsorted(cum, positions, side="right"), B - 1)


def pf_step(posterior: np.ndarray, y, model: StateSpaceModel,
            params: FilterParams, rng: RngStream) -> np.ndarray:
    """Bootstrap particle filter step: propagate, weight, resample."""
    pred = predict(model, posterior, rng.child(0))
    lw = _apply_weight_floor(log_likelihood(model, pred, y), params.weight_floor)
    p = normalize_log_weights(lw)
    idx = _resample_indices(p, params.resampling, rng.child(2))
    return pred[idx]


def enkf_step(posterior: np.ndarray, y, model: StateSpaceModel,
              params: FilterParams, rng: RngStream) -> np.ndarray:
    """Stochastic ensemble Kalman step with perturbed observations."""
    pred = predict(model, posterior, rng.child(0))
    B = pred.shape[0]
    H = model.observe_mean(pred)
    Xa = pred - pred.mean(axis=0)
    Ha = H - H.mean(axis=0)
    c_xh = Xa.T @ Ha / (B - 1)
    c_hh = Ha.T @ Ha / (B - 1)
    y = np.asarray(y, dtype=np.float64).ravel()
    eta = rng.child(2).generator().standard_normal(H.shape) @ model._obs_chol.T
    innov = y[None, :] + eta - H
    gain_t = linalg.solve(c_hh + model.obs_cov, c_xh.T, assume_a="pos")
    return pred + innov @ gain_t


@dataclass
class FilterRun:
    """Per-step posterior summaries for one filtering trajectory."""

    method: str
    means: np.ndarray          # (J+1, d), row 0 is the initial ensemble
    variances: np.ndarray      # (J+1, d)
    rmse: np.ndarray           # (J+1,) vs the truth path
    wall_time: float
    weight_floor_steps: List[int] = field(default_factory=list)
    ensembles: Optional[List[np.ndarray]] = None


_STEP_FNS = {"pf": pf_step, "enkf": enkf_step}


def run_filter(method: str, model: StateSpaceModel, params: FilterParams,
               truth: np.ndarray, observations: np.ndarray, rng: RngStream,
               init: Optional[np.ndarray] = None,
               init_spread: Optional[float] = None,
               keep_ensembles: bool = False) -> FilterRun:
    """Run one filtering trajectory against a truth/observation sequence.

    ``truth`` has J+1 rows (row j is the state observed by observation row
    j-1); ``observations`` has J rows.  The initial ensemble is ``init`` if
    given, else truth[0] + init_spread * standard normal.  Step errors are
    re-raised with the filtering step appended.
    """
    if method not in ("ensbf", "ensbf_is", "pf", "enkf"):
        raise ValueError(f"unknown method {method!r}")
    truth = np.asarray(truth, dtype=np.float64)
    if truth.ndim == 1:
        truth = truth[:, None]
    observations = np.asarray(observations, dtype=np.float64)
    if observations.ndim == 1:
        observations = observations[:, None]
    J = observations.shape[0]
    if truth.shape[0] != J + 1:
        raise ValueError(
            f"truth must have J+1={J + 1} rows, got {truth.shape[0]}"
        )
    d = truth.shape[1]
    if init is not None:
        ens = validate_ensemble(init, "init")
        if ens.shape != (params.B, d):
            raise ValueError(f"init must be ({params.B}, {d})")
    else:
        if init_spread is None:
            raise ValueError("provide init or init_spread")
        ens = truth[0] + init_spread * rng.child(0).generator() \
            .standard_normal((params.B, d))

    t_start = time.perf_counter()
    means = np.empty((J + 1, d))
    variances = np.empty((J + 1, d))
    errs = np.empty(J + 1)
    floor_steps: List[int] = []
    kept: Optional[List[np.ndarray]] = [] if keep_ensembles else None

    def record(j: int, ens: np.ndarray) -> None:
        means[j] = ens.mean(axis=0)
        variances[j] = ens.var(axis=0)
        errs[j] = rmse(means[j], truth[j])
        if kept is not None:
            kept.append(ens.copy())

    record(0, ens)
    for j in range(J):
        step_rng = rng.child(1 + j)
        y = observations[j]
        try:
            if method == "ensbf":
                pred = predict(model, ens, step_rng.child(0))
                if params.weight_floor is not None and \
                        np.any(log_likelihood(model, pred, y) < params.weight_floor):
                    floor_steps.append(j)
                ens = ensbf_analysis(pred, y, model, params, step_rng.child(1))
            elif method == "ensbf_is":
                ens = ensbf_is_analysis(ens, y, model, params, step_rng)
            else:
                if method == "pf" and params.weight_floor is not None:
                    # deterministic replay of the propagation this step will do
                    look = predict(model, ens, step_rng.child(0))
                    if np.any(log_likelihood(model, look, y) < params.weight_floor):
                        floor_steps.append(j)
                ens = _STEP_FNS[method](ens, y, model, params, step_rng)
        except (DegenerateWeightsError, RuntimeError, ValueError) as exc:
            raise type(exc)(f"{exc} (filtering step {j})") from exc
        record(j + 1, ens)
    return FilterRun(
        method=method,
        means=means,
        variances=variances,
        rmse=errs,
        wall_time=time.perf_counter() - t_start,
        weight_floor_steps=floor_steps,
        ensembles=kept,
    )
