"""Benchmark systems: dynamics models, reference distributions, datasets.

All dynamics are exposed as ``StateSpaceModel`` instances whose ``propagate``
acts on a (B, d) ensemble.  Truth simulation and CSV round-tripping live here
too, so experiment inputs can be regenerated or reused outside the package.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from sbfilter.core import RngStream
from sbfilter.filters import StateSpaceModel
from sbfilter.linear_sde import GaussianMixture

__all__ = [
    "sine_model",
    "double_well_model",
    "double_well_truth",
    "lorenz96_drift",
    "lorenz96_model",
    "MixturePosteriorCase",
    "mixture_posterior_case",
    "two_moons",
    "simulate_truth",
    "save_truth_csv",
    "load_truth_csv",
]


def sine_model(alpha: float = 2.5, proc_sigma: float = 0.2,
               obs_gamma: float = 1.0) -> StateSpaceModel:
    """Scalar sine dynamics x -> alpha sin(x) + proc_sigma xi, observed directly."""
    if obs_gamma <= 0:
        raise ValueError("obs_gamma must be positive")
    if proc_sigma <= 0:
        raise ValueError("proc_sigma must be positive")

    def mean(X: np.ndarray) -> np.ndarray:
        return alpha * np.sin(X)

    def propagate(X: np.ndarray, rng: RngStream) -> np.ndarray:
        return mean(X) + proc_sigma * rng.generator().standard_normal(X.shape)

    return StateSpaceModel(
        propagate=propagate,
        observe_mean=lambda X: X,
        obs_cov=np.array([[obs_gamma ** 2]]),
        transition_mean=mean,
        proc_sigma=proc_sigma,
    )


def double_well_model(beta: float, dt: float = 0.1,
                      obs_var: float = 0.1) -> StateSpaceModel:
    """Bistable scalar diffusion: drift -4 s (s^2 - 1), Euler step of size dt.

    The model knows nothing about the forced regime switches applied to the
    truth path; that mismatch is the point of the benchmark.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    if beta < 0:
        raise ValueError("beta must be >= 0")
    if obs_var <= 0:
        raise ValueError("obs_var must be positive")

    def mean(X: np.ndarray) -> np.ndarray:
        return X - 4.0 * X * (X ** 2 - 1.0) * dt

    step_sigma = beta * np.sqrt(dt)

    def propagate(X: np.ndarray, rng: RngStream) -> np.ndarray:
        out = mean(X)
        if step_sigma > 0:
            out = out + step_sigma * rng.generator().standard_normal(X.shape)
        return out

    return StateSpaceModel(
        propagate=propagate,
        observe_mean=lambda X: X,
        obs_cov=np.array([[obs_var]]),
        transition_mean=mean if step_sigma > 0 else None,
        proc_sigma=step_sigma if step_sigma > 0 else None,
    )


def double_well_truth(J: int, beta: float, rng: RngStream, dt: float = 0.1,
                      obs_var: float = 0.1, switch_period: int = 40,
                      s0: float = 1.0) -> Tuple[np.ndarray, np.ndarray]:
    """Truth path with forced regime switches, plus noisy observations.

    Every ``switch_period`` steps (at n = 40, 80, ... by default) the state
    sign is flipped after the Euler update — the "manual switch" the filter
    model does not know about.  Returns truth (J+1, 1) and obs (J, 1).
    """
    if J < 0:
        raise ValueError("J must be >= 0")
    gen = rng.generator()
    truth = np.empty((J + 1, 1))
    obs = np.empty((J, 1))
    s = float(s0)
    truth[0, 0] = s
    obs_sigma = np.sqrt(obs_var)
    for n in range(1, J + 1):
        s = s - 4.0 * s * (s ** 2 - 1.0) * dt + beta * np.sqrt(dt) * gen.standard_normal()
        if switch_period and n % switch_period == 0:
            s = -s
        truth[n, 0] = s
        obs[n - 1, 0] = s + obs_sigma * gen.standard_normal()
    return truth, obs


def lorenz96_drift(x: np.ndarray, F: float = 8.0,
                   include_damping: bool = False) -> np.ndarray:
    """Cyclic advection drift: (x_{i+1} - x_{i-2}) x_{i-1} + F per coordinate.

    ``include_damping`` subtracts x_i (the standard extra term some
    formulations carry).  Works on a single d-vector or a (B, d) batch.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] < 4:
        raise ValueError(f"need dimension >= 4, got {x.shape[-1]}")
    out = (np.roll(x, -1, axis=-1) - np.roll(x, 2, axis=-1)) * np.roll(x, 1, axis=-1) + F
    if include_damping:
        out = out - x
    return out


def lorenz96_model(d: int, F: float = 8.0, dt: float = 0.01,
                   steps_per_obs: int = 5, proc_sigma: float = 0.1,
                   obs_alpha: float = 0.2, obs_cov_scale: float = 0.04,
                   include_damping: bool = False) -> StateSpaceModel:
    """Cyclic Lorenz-96 dynamics observed as y = obs_alpha * x + noise.

    Each model step integrates ``steps_per_obs`` Euler-Maruyama substeps of
    size dt with per-substep isotropic process noise.  A transition density
    is only available in the single-substep case.
    """
    if d < 4:
        raise ValueError(f"need dimension >= 4, got {d}")
    if dt <= 0 or steps_per_obs < 1:
        raise ValueError("dt must be positive and steps_per_obs >= 1")
    if proc_sigma < 0 or obs_cov_scale <= 0:
        raise ValueError("proc_sigma must be >= 0 and obs_cov_scale > 0")
    sq = proc_sigma * np.sqrt(dt)

    def propagate(X: np.ndarray, rng: RngStream) -> np.ndarray:
        noise = rng.generator().standard_normal((steps_per_obs,) + X.shape)
        out = X
        # overflow here is legitimate (divergence is detected downstream by
        # the finite checks), so keep it from warning
        with np.errstate(over="ignore", invalid="ignore"):
            for s in range(steps_per_obs):
                out = out + lorenz96_drift(out, F, include_damping) * dt + sq * noise[s]
        return out

    one_step_mean = None
    if steps_per_obs == 1 and proc_sigma > 0:
        def one_step_mean(X: np.ndarray) -> np.ndarray:
            return X + lorenz96_drift(X, F, include_damping) * dt

    return StateSpaceModel(
        propagate=propagate,
        observe_mean=lambda X: obs_alpha * X,
        obs_cov=obs_cov_scale * np.eye(d),
        transition_mean=one_step_mean,
        proc_sigma=sq if one_step_mean is not None else None,
    )


@dataclass(frozen=True)
class MixturePosteriorCase:
    """A conjugate setup where the Bayesian update stays a Gaussian mixture."""

    prior: GaussianMixture
    likelihood_center: np.ndarray
    likelihood_var: float
    exact_posterior: GaussianMixture


def mixture_posterior_case() -> MixturePosteriorCase:
    """Four Gaussian bumps updated by one Gaussian likelihood, in closed form.

    Prior: uniform mixture over means (1.5,1), (1,-1), (-1.5,1), (-1,-1)
    with isotropic variance 0.2^2.  Likelihood: center (1.2, 0), variance
    0.25^2.  Posterior component k has mean (eps^2 mu_k + sigma^2 mu_0) /
    (sigma^2 + eps^2), shared variance sigma^2 eps^2 / (sigma^2 + eps^2),
    and weight proportional to exp(-|mu_k - mu_0|^2 / (2 (sigma^2 + eps^2))).
    """
    mu0 = np.array([1.2, 0.0])
    mus = np.array([[1.5, 1.0], [1.0, -1.0], [-1.5, 1.0], [-1.0, -1.0]])
    sigma2 = 0.2 ** 2
    eps2 = 0.25 ** 2
    tot = sigma2 + eps2
    post_means = (eps2 * mus + sigma2 * mu0[None, :]) / tot
    post_var = sigma2 * eps2 / tot
    lw = -np.sum((mus - mu0[None, :]) ** 2, axis=1) / (2.0 * tot)
    w = np.exp(lw - lw.max())
    w /= w.sum()
    return MixturePosteriorCase(
        prior=GaussianMixture(weights=np.full(4, 0.25), means=mus, var=sigma2),
        likelihood_center=mu0,
        likelihood_var=eps2,
        exact_posterior=GaussianMixture(weights=w, means=post_means, var=post_var),
    )


def two_moons(n: int, noise: float, rng: RngStream) -> np.ndarray:
    """Two interleaved half-circles with Gaussian jitter, (n, 2).

    Parametrization (fixed for reproducibility): the first ceil(n/2) rows
    are the upper arc (cos t, sin t) and the rest the lower arc
    (1 - cos t, -sin t + 0.5), with t drawn uniformly on [0, pi] per point
    and N(0, noise^2) added to both coordinates.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if noise < 0:
        raise ValueError("noise must be >= 0")
    gen = rng.generator()
    n_up = (n + 1) // 2
    t_up = gen.uniform(0.0, np.pi, size=n_up)
    t_lo = gen.uniform(0.0, np.pi, size=n - n_up)
    pts = np.concatenate([
        np.column_stack([np.cos(t_up), np.sin(t_up)]),
        np.column_stack([1.0 - np.cos(t_lo), -np.sin(t_lo) + 0.5]),
    ])
    if noise > 0:
        pts = pts + noise * gen.standard_normal(pts.shape)
    return pts


def simulate_truth(model: StateSpaceModel, x0, J: int,
                   rng: RngStream) -> Tuple[np.ndarray, np.ndarray]:
    """Roll the model forward J steps from x0; return truth (J+1, d), obs (J, n).

    Observation j (row j of obs) sees truth row j+1 through the model's
    observation map plus N(0, obs_cov) noise.
    """
    x0 = np.asarray(x0, dtype=np.float64).ravel()
    d = x0.size
    truth = np.empty((J + 1, d))
    obs = np.empty((J, model.obs_dim))
    truth[0] = x0
    for j in range(J):
        nxt = model.propagate(truth[j][None, :], rng.child(j, 0))
        if not np.all(np.isfinite(nxt)):
            raise RuntimeError("model diverged")
        truth[j + 1] = nxt[0]
        eta = rng.child(j, 1).generator().standard_normal(model.obs_dim)
        obs[j] = model.observe_mean(truth[j + 1][None, :])[0] + model._obs_chol @ eta
    return truth, obs


def save_truth_csv(path, truth: np.ndarray, obs: np.ndarray) -> None:
    """Write step, truth_1..d, obs_1..n rows; step 0 has empty obs cells.

    Floats are written with repr (shortest round-trip), so identical inputs
    produce byte-identical files.
    """
    truth = np.atleast_2d(np.asarray(truth, dtype=np.float64))
    obs = np.atleast_2d(np.asarray(obs, dtype=np.float64))
    d, n = truth.shape[1], obs.shape[1]
    header = ",".join(
        ["step"]
        + [f"truth_{k + 1}" for k in range(d)]
        + [f"obs_{k + 1}" for k in range(n)]
    )
    lines = [header]
    for j in range(truth.shape[0]):
        cells = [str(j)] + [repr(float(v)) for v in truth[j]]
        if j == 0:
            cells += [""] * n
        else:
            cells += [repr(float(v)) for v in obs[j - 1]]
        lines.append(",".join(cells))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_truth_csv(path) -> Tuple[np.ndarray, np.ndarray]:
    """Inverse of save_truth_csv."""
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        d = sum(1 for c in header if c.startswith("truth_"))
        n = sum(1 for c in header if c.startswith("obs_"))
        rows = [line.strip().split(",") for line in fh if line.strip()]
    truth = np.array([[float(c) for c in r[1:1 + d]] for r in rows])
    obs = np.array([[float(c) for c in r[1 + d:]] for r in rows[1:]])
    return truth, obs.reshape(len(rows) - 1, n)
