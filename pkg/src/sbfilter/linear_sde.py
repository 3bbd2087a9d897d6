"""Linear-SDE transition moments, Gaussian mixtures, and the score identity.

For ``dX = b(t) X dt + sigma(t) dW`` the transition law is Gaussian,
``X_t | X_t0 = x  ~  N(mu x, var I)`` with ``mu = exp(int b)`` and
``var = int exp(2 int_s^t b) sigma(s)^2 ds``.  Schedules may declare these
moments in closed form; otherwise they are computed by adaptive quadrature to
relative tolerance 1e-10.

The module's reason to exist is ``check_score_control_identity``: pushing a
Gaussian mixture forward through the SDE and taking the score of the marginal
must agree with the gradient of the log of the reverse-time transition kernel
integrated against the mixture.  Both sides stay in closed form for mixtures,
so the agreement can be checked to near machine precision on a grid.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy import integrate

from sbfilter.core import log_sum_exp

__all__ = [
    "LinearSDE",
    "TransitionMoments",
    "GaussianMixture",
    "transition_moments",
    "brownian_schedule",
    "vp_schedule",
    "gm_forward_marginal",
    "gm_score",
    "check_score_control_identity",
]

_QUAD_REL_TOL = 1e-10
# schedules with an integrable singularity at t=1 are evaluated no closer
# to the endpoint than this
_VP_T_MAX = 1.0 - 1e-4


@dataclass(frozen=True)
class TransitionMoments:
    """Conditional law multiplier and variance: X_t | X_t0 = x ~ N(mu x, var I)."""

    mu: float
    var: float


@dataclass(frozen=True)
class LinearSDE:
    """dX = b(t) X dt + sigma(t) dW on [0, 1), acting per component.

    ``closed_moments`` optionally supplies (t0, t) -> TransitionMoments in
    closed form; when absent, moments come from adaptive quadrature.
    """

    b: Callable[[float], float]
    sigma: Callable[[float], float]
    closed_moments: Optional[Callable[[float, float], TransitionMoments]] = None


def _quad(f, lo, hi) -> float:
    with warnings.catch_warnings():
        warnings.simplefilter("error", integrate.IntegrationWarning)
        try:
            val, err = integrate.quad(f, lo, hi, epsabs=1e-13, epsrel=_QUAD_REL_TOL,
                                      limit=200)
        except (integrate.IntegrationWarning, ValueError, ZeroDivisionError,
                OverflowError) as exc:
            raise RuntimeError("quadrature failed") from exc
    if not np.isfinite(val) or err > max(1e-13, 10 * _QUAD_REL_TOL * abs(val)):
        raise RuntimeError("quadrature failed")
    return val


def transition_moments(sde: LinearSDE, t0: float, t: float) -> TransitionMoments:
    """Moments of X_t given X_t0, preferring the schedule's closed form.

    Requires 0 <= t0 <= t < 1.
    """
    if not (0.0 <= t0 <= t):
        raise ValueError(f"need 0 <= t0 <= t, got t0={t0}, t={t}")
    if t >= 1.0:
        raise ValueError(f"need t < 1, got t={t}")
    if sde.closed_moments is not None:
        return sde.closed_moments(t0, t)
    if t == t0:
        return TransitionMoments(mu=1.0, var=0.0)

    def log_mu(s: float, upper: float) -> float:
        return _quad(sde.b, s, upper)

    mu = float(np.exp(log_mu(t0, t)))
    var = _quad(lambda s: np.exp(2.0 * log_mu(s, t)) * sde.sigma(s) ** 2, t0, t)
    return TransitionMoments(mu=mu, var=float(var))


def brownian_schedule(sigma0: float = 1.0) -> LinearSDE:
    """Pure diffusion: b = 0, sigma constant, with closed-form moments."""
    if sigma0 < 0:
        raise ValueError("sigma0 must be >= 0")

    def moments(t0: float, t: float) -> TransitionMoments:
        return TransitionMoments(mu=1.0, var=sigma0 ** 2 * (t - t0))

    return LinearSDE(b=lambda t: 0.0, sigma=lambda t: sigma0, closed_moments=moments)


def vp_schedule() -> LinearSDE:
    """The noising schedule whose marginal from 0 is N((1-t) x, t I).

    Coefficients: b(t) = -1/(1-t) and sigma(t)^2 = 1 + 2t/(1-t).  Both are
    singular at t = 1; coefficient evaluation raises at t >= 1 and the
    closed-form moments clamp times to 1 - 1e-4.
    """

    def b(t: float) -> float:
        if t >= 1.0:
            raise ValueError(f"schedule is singular at t >= 1, got t={t}")
        return -1.0 / (1.0 - t)

    def sigma(t: float) -> float:
        if t >= 1.0:
            raise ValueError(f"schedule is singular at t >= 1, got t={t}")
        return float(np.sqrt(1.0 + 2.0 * t / (1.0 - t)))

    def moments(t0: float, t: float) -> TransitionMoments:
        t = min(t, _VP_T_MAX)
        t0 = min(t0, _VP_T_MAX)
        mu = (1.0 - t) / (1.0 - t0)
        return TransitionMoments(mu=mu, var=t - mu * mu * t0)

    return LinearSDE(b=b, sigma=sigma, closed_moments=moments)


@dataclass(frozen=True)
class GaussianMixture:
    """Isotropic Gaussian mixture: sum_k w_k N(m_k, v_k I).

    ``var`` may be one scalar (shared) or a length-K vector.
    """

    weights: np.ndarray
    means: np.ndarray
    var: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64).ravel()
        m = np.asarray(self.means, dtype=np.float64)
        if m.ndim == 1:
            m = m[:, None]
        if m.ndim != 2 or m.shape[0] != w.size:
            raise ValueError("means must be (K, d) matching weights")
        v = np.asarray(self.var, dtype=np.float64).ravel()
        if v.size == 1:
            v = np.full(w.size, v[0])
        if v.size != w.size:
            raise ValueError("var must be scalar or length K")
        if np.any(v <= 0):
            raise ValueError("component variances must be positive")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("weights must lie on the simplex (sum 1 within 1e-12)")
        if not (np.all(np.isfinite(m)) and np.all(np.isfinite(v))):
            raise ValueError("means and variances must be finite")
        for name, arr in (("weights", w), ("means", m), ("var", v)):
            arr = np.ascontiguousarray(arr)
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)

    @property
    def K(self) -> int:
        return self.weights.size

    @property
    def d(self) -> int:
        return self.means.shape[1]

    def _log_resp(self, X: np.ndarray) -> np.ndarray:
        """Unnormalized log-responsibilities, shape (B, K)."""
        d2 = np.sum((X[:, None, :] - self.means[None, :, :]) ** 2, axis=2)
        with np.errstate(divide="ignore"):
            logw = np.log(self.weights)
        return logw[None, :] - 0.5 * d2 / self.var[None, :] \
            - 0.5 * self.d * np.log(2.0 * np.pi * self.var)[None, :]

    def logpdf(self, x) -> np.ndarray:
        X, single = _as_batch(x, self.d)
        lr = self._log_resp(X)
        out = np.array([log_sum_exp(row) for row in lr])
        return out[0] if single else out

    def score(self, x) -> np.ndarray:
        """Gradient of log-density, computed with log-space responsibilities."""
        X, single = _as_batch(x, self.d)
        lr = self._log_resp(X)
        m = lr.max(axis=1, keepdims=True)
        r = np.exp(lr - m)
        r /= r.sum(axis=1, keepdims=True)
        comp = (self.means[None, :, :] - X[:, None, :]) / self.var[None, :, None]
        out = np.sum(r[:, :, None] * comp, axis=1)
        return out[0] if single else out

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        ks = rng.choice(self.K, size=n, p=self.weights / self.weights.sum())
        eps = rng.standard_normal((n, self.d))
        return self.means[ks] + np.sqrt(self.var[ks])[:, None] * eps


def _as_batch(x, d: int):
    X = np.atleast_1d(np.asarray(x, dtype=np.float64))
    single = X.ndim == 1 and X.size == d
    if X.ndim == 1:
        X = X.reshape(1, -1) if single and d > 1 else X.reshape(-1, 1)
    if X.ndim != 2 or X.shape[1] != d:
        raise ValueError(f"points must have dimension {d}")
    return X, single


def gm_forward_marginal(p_data: GaussianMixture, sde: LinearSDE, t: float) -> GaussianMixture:
    """Law of X_t when X_0 ~ p_data: means scale by mu, vars become mu^2 v + var."""
    if not (0.0 <= t < 1.0):
        raise ValueError(f"need t in [0, 1), got {t}")
    tm = transition_moments(sde, 0.0, t)
    return GaussianMixture(
        weights=p_data.weights,
        means=tm.mu * p_data.means,
        var=tm.mu ** 2 * p_data.var + tm.var,
    )


def gm_score(mix: GaussianMixture, x) -> np.ndarray:
    """Gradient of the mixture log-density at x (single point or batch)."""
    return mix.score(x)


def check_score_control_identity(p_data: GaussianMixture, sde_forward: LinearSDE,
                                 t_grid, x_grid) -> float:
    """Max grid error between the marginal score and the reverse-kernel gradient.

    Left side: score of the forward marginal of ``p_data`` at time ``1 - t``.
    Right side: gradient of ``log int q(t, x, 1, y) p_data(y) dy`` where q is
    the transition kernel of the SDE with reversed coefficients
    ``b(u) = -b_fwd(1-u)``, ``sigma(u) = sigma_fwd(1-u)``.  Its moments over
    [t, 1] follow from the forward moments over [0, 1-t]:
    ``mu_rev = 1/mu_fwd`` and ``var_rev = var_fwd / mu_fwd^2``, which keeps
    the right side in closed form as a rescaled mixture score.  Returns the
    maximum absolute componentwise discrepancy over the grid.
    """
    t_grid = np.asarray(t_grid, dtype=np.float64).ravel()
    X = np.asarray(x_grid, dtype=np.float64)
    if X.ndim == 1:
        X = X.reshape(-1, 1) if p_data.d == 1 else X.reshape(1, -1)
    if X.shape[1] != p_data.d:
        raise ValueError(f"x_grid must have dimension {p_data.d}")
    if t_grid.size == 0 or np.any(t_grid < 0.0) or np.any(t_grid >= 1.0) \
            or not np.all(np.isfinite(X)):
        raise ValueError("grid outside domain")
    worst = 0.0
    for t in t_grid:
        # the transition-moment domain is open at 1; at the t=0 endpoint both
        # sides use the same clamped horizon, so the comparison is unaffected
        tau = min(1.0 - t, 1.0 - 1e-12)
        fwd = transition_moments(sde_forward, 0.0, tau)
        lhs = gm_forward_marginal(p_data, sde_forward, tau).score(X)
        mu_rev = 1.0 / fwd.mu
        var_rev = fwd.var / fwd.mu ** 2
        if var_rev == 0.0:
            rhs = p_data.score(X)
        else:
            blurred = GaussianMixture(weights=p_data.weights, means=p_data.means,
                                      var=p_data.var + var_rev)
            rhs = mu_rev * blurred.score(mu_rev * X)
        worst = max(worst, float(np.max(np.abs(lhs - rhs))))
    return worst
