"""Transition moments, Gaussian mixtures, and the score identity check."""

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from sbfilter.linear_sde import (
    GaussianMixture,
    LinearSDE,
    brownian_schedule,
    check_score_control_identity,
    gm_forward_marginal,
    gm_score,
    transition_moments,
    vp_schedule,
)

# uniform four-component prior used across the test battery
PRIOR_MEANS = np.array([[1.5, 1.0], [1.0, -1.0], [-1.5, 1.0], [-1.0, -1.0]])
PRIOR = GaussianMixture(weights=np.full(4, 0.25), means=PRIOR_MEANS, var=0.04)


class TestTransitionMoments:
    def test_brownian_closed_form(self):
        sde = brownian_schedule(sigma0=0.7)
        tm = transition_moments(sde, 0.2, 0.6)
        assert tm.mu == 1.0
        assert tm.var == pytest.approx(0.49 * 0.4, rel=1e-14)

    def test_identity_at_equal_times(self):
        for sde in (brownian_schedule(), vp_schedule()):
            tm = transition_moments(sde, 0.3, 0.3)
            assert tm.mu == pytest.approx(1.0, abs=1e-14)
            assert tm.var == pytest.approx(0.0, abs=1e-14)

    def test_quadrature_matches_brownian(self):
        # same coefficients without the declared closed form
        bare = LinearSDE(b=lambda t: 0.0, sigma=lambda t: 0.7)
        tm = transition_moments(bare, 0.2, 0.6)
        assert tm.mu == pytest.approx(1.0, rel=1e-12)
        assert tm.var == pytest.approx(0.49 * 0.4, rel=1e-9)

    def test_quadrature_matches_declared_form(self):
        vp = vp_schedule()
        bare = LinearSDE(b=vp.b, sigma=vp.sigma)
        for t in np.arange(0.1, 0.95, 0.1):
            byquad = transition_moments(bare, 0.0, t)
            assert byquad.mu == pytest.approx(1.0 - t, rel=1e-9)
            assert byquad.var == pytest.approx(t, rel=1e-8)

    def test_composition(self):
        # Chapman-Kolmogorov: moments over [t0,t2] from [t0,t1] and [t1,t2]
        gen = LinearSDE(b=lambda t: -t, sigma=lambda t: 1.0 + 0.5 * t)
        rng = np.random.default_rng(3)
        for _ in range(5):
            t0, t1, t2 = np.sort(rng.uniform(0.0, 0.95, size=3))
            a = transition_moments(gen, t0, t1)
            b = transition_moments(gen, t1, t2)
            full = transition_moments(gen, t0, t2)
            assert full.mu == pytest.approx(a.mu * b.mu, abs=1e-9)
            assert full.var == pytest.approx(b.mu ** 2 * a.var + b.var, abs=1e-9)

    def test_preconditions(self):
        sde = brownian_schedule()
        with pytest.raises(ValueError):
            transition_moments(sde, 0.5, 0.4)
        with pytest.raises(ValueError):
            transition_moments(sde, 0.0, 1.0)
        with pytest.raises(ValueError):
            transition_moments(sde, -0.1, 0.5)

    def test_quadrature_failure(self):
        # non-integrable pole inside the interval
        bad = LinearSDE(b=lambda t: 1.0 / (0.5 - t) ** 2, sigma=lambda t: 1.0)
        with pytest.raises(RuntimeError, match="quadrature failed"):
            transition_moments(bad, 0.0, 0.9)


class TestVpSchedule:
    def test_coefficients(self):
        vp = vp_schedule()
        assert vp.b(0.0) == pytest.approx(-1.0)
        assert vp.b(0.5) == pytest.approx(-2.0)
        assert vp.sigma(0.0) ** 2 == pytest.approx(1.0)
        assert vp.sigma(0.5) ** 2 == pytest.approx(3.0)

    def test_singularity_raises(self):
        vp = vp_schedule()
        with pytest.raises(ValueError):
            vp.b(1.0)
        with pytest.raises(ValueError):
            vp.sigma(1.2)

    def test_closed_moments(self):
        vp = vp_schedule()
        for t in (0.1, 0.5, 0.9):
            tm = transition_moments(vp, 0.0, t)
            assert (tm.mu, tm.var) == (pytest.approx(1.0 - t), pytest.approx(t))

    def test_moment_invariants(self):
        vp = vp_schedule()
        rng = np.random.default_rng(4)
        for _ in range(50):
            t0, t = np.sort(rng.uniform(0.0, 0.999, size=2))
            tm = transition_moments(vp, t0, t)
            assert tm.mu > 0
            assert tm.var >= -1e-15


class TestGaussianMixture:
    def test_validation(self):
        with pytest.raises(ValueError):
            GaussianMixture(weights=[0.5, 0.6], means=[[0.0], [1.0]], var=1.0)
        with pytest.raises(ValueError):
            GaussianMixture(weights=[1.0], means=[[0.0]], var=0.0)
        with pytest.raises(ValueError):
            GaussianMixture(weights=[0.5, 0.5], means=[[0.0]], var=1.0)

    def test_logpdf_standard_normal(self):
        gm = GaussianMixture(weights=[1.0], means=[[0.0]], var=1.0)
        assert gm.logpdf([0.0]) == pytest.approx(-0.9189385332046727, abs=1e-14)
        assert gm.logpdf([2.0]) == pytest.approx(-0.9189385332046727 - 2.0, abs=1e-13)

    def test_logpdf_mixture_vs_direct(self):
        gm = GaussianMixture(weights=[0.3, 0.7], means=[[-1.0, 0.0], [2.0, 1.0]],
                             var=[0.5, 2.0])
        x = np.array([0.3, -0.4])
        direct = 0.0
        for w, m, v in zip(gm.weights, gm.means, gm.var):
            direct += w * np.exp(-np.sum((x - m) ** 2) / (2 * v)) / (2 * np.pi * v)
        assert gm.logpdf(x) == pytest.approx(np.log(direct), rel=1e-12)

    def test_score_single_gaussian(self):
        gm = GaussianMixture(weights=[1.0], means=[[1.0, -2.0]], var=0.25)
        assert_allclose(gm.score([2.0, 0.0]), [-4.0, -8.0], rtol=1e-13)

    def test_score_symmetry_midpoint(self):
        gm = GaussianMixture(weights=[0.5, 0.5], means=[[-1.0], [1.0]], var=0.3)
        assert_allclose(gm.score([0.0]), [0.0], atol=1e-15)

    def test_score_matches_finite_difference(self):
        h = 1e-5
        x = PRIOR_MEANS[0]
        s = PRIOR.score(x)
        for k in range(2):
            e = np.zeros(2)
            e[k] = h
            fd = (PRIOR.logpdf(x + e) - PRIOR.logpdf(x - e)) / (2 * h)
            assert s[k] == pytest.approx(fd, abs=1e-6)

    def test_score_fd_on_random_points(self):
        rng = np.random.default_rng(11)
        h = 1e-5
        for _ in range(10):
            x = rng.uniform(-2, 2, size=2)
            s = PRIOR.score(x)
            for k in range(2):
                e = np.zeros(2)
                e[k] = h
                fd = (PRIOR.logpdf(x + e) - PRIOR.logpdf(x - e)) / (2 * h)
                assert s[k] == pytest.approx(fd, abs=1e-6)

    def test_sample_moments(self):
        gm = GaussianMixture(weights=[0.5, 0.5], means=[[-2.0], [2.0]], var=0.25)
        draws = gm.sample(60_000, np.random.default_rng(12))
        assert draws.mean() == pytest.approx(0.0, abs=0.05)
        # total variance: within-component 0.25 + between-component 4.0
        assert draws.var() == pytest.approx(4.25, rel=0.03)

    def test_batch_score_shape(self):
        X = np.zeros((7, 2))
        assert PRIOR.score(X).shape == (7, 2)
        assert PRIOR.score(X[0]).shape == (2,)


class TestForwardMarginal:
    def test_time_zero_identity(self):
        out = gm_forward_marginal(PRIOR, vp_schedule(), 0.0)
        assert_array_equal(out.weights, PRIOR.weights)
        assert_allclose(out.means, PRIOR.means, rtol=1e-14)
        assert_allclose(out.var, PRIOR.var, rtol=1e-14)

    def test_heat_flow(self):
        gm = GaussianMixture(weights=[1.0], means=[[3.0]], var=0.5)
        out = gm_forward_marginal(gm, brownian_schedule(1.0), 0.25)
        assert out.means[0, 0] == pytest.approx(3.0)
        assert out.var[0] == pytest.approx(0.75, rel=1e-12)

    def test_noising_limit_is_standard_normal(self):
        out = gm_forward_marginal(PRIOR, vp_schedule(), 0.999)
        # overall mean and per-component variance collapse to N(0, 1)
        overall_mean = out.weights @ out.means
        assert np.all(np.abs(overall_mean) < 1e-2)
        assert np.all(np.abs(out.var - 1.0) < 1e-2)
        assert np.all(np.abs(out.means) < 1e-2)

    def test_weights_preserved_exactly(self):
        out = gm_forward_marginal(PRIOR, vp_schedule(), 0.37)
        assert_array_equal(out.weights, PRIOR.weights)

    def test_domain(self):
        with pytest.raises(ValueError):
            gm_forward_marginal(PRIOR, vp_schedule(), 1.0)
        with pytest.raises(ValueError):
            gm_forward_marginal(PRIOR, vp_schedule(), -0.1)


class TestScoreControlIdentity:
    def test_single_gaussian_closed_form(self):
        p = GaussianMixture(weights=[1.0], means=[[0.0]], var=1.0)
        sde = brownian_schedule(1.0)
        xs = np.linspace(-3, 3, 13)
        # the marginal at 1-t is N(0, 2-t), so both sides must be -x/(2-t)
        for t in (0.3, 0.7):
            marg = gm_forward_marginal(p, sde, 1.0 - t)
            assert_allclose(marg.score(xs.reshape(-1, 1))[:, 0],
                            -xs / (2.0 - t), rtol=1e-12)
        err = check_score_control_identity(p, sde, [0.0, 0.3, 0.7], xs)
        assert err < 1e-10

    def test_mixture_vp_grid(self):
        g = np.linspace(-2.0, 2.0, 5)
        xx, yy = np.meshgrid(g, g)
        pts = np.column_stack([xx.ravel(), yy.ravel()])
        err = check_score_control_identity(PRIOR, vp_schedule(),
                                           np.linspace(0.1, 0.9, 5), pts)
        assert err < 1e-8

    def test_t_zero_endpoint(self):
        p = GaussianMixture(weights=[0.5, 0.5], means=[[-1.0], [1.5]], var=0.3)
        err = check_score_control_identity(p, brownian_schedule(1.0), [0.0],
                                           np.linspace(-2, 2, 9))
        assert err < 1e-10

    def test_grid_domain_errors(self):
        p = GaussianMixture(weights=[1.0], means=[[0.0]], var=1.0)
        with pytest.raises(ValueError, match="grid outside domain"):
            check_score_control_identity(p, brownian_schedule(), [1.0], [0.0])
        with pytest.raises(ValueError, match="grid outside domain"):
            check_score_control_identity(p, brownian_schedule(), [-0.2], [0.0])
        with pytest.raises(ValueError, match="grid outside domain"):
            check_score_control_identity(p, brownian_schedule(), [0.5], [np.nan])

    def test_reversed_moments_match_quadrature(self):
        # the identity check derives the reverse-kernel moments algebraically
        # from the forward ones; integrate the reversed coefficients directly
        # (stopping just short of the endpoint) and compare
        vp = vp_schedule()
        rev = LinearSDE(b=lambda u: -vp.b(1.0 - u), sigma=lambda u: vp.sigma(1.0 - u))
        t, u = 0.3, 1.0 - 1e-7
        byquad = transition_moments(rev, t, u)
        # forward interval [1-u, 1-t]: mu = t/u, so reversed mu = u/t
        fwd_mu = t / u
        fwd_var = (1.0 - t) - fwd_mu ** 2 * (1.0 - u)
        assert byquad.mu == pytest.approx(1.0 / fwd_mu, rel=1e-7)
        assert byquad.var == pytest.approx(fwd_var / fwd_mu ** 2, rel=1e-6)

    def test_gm_score_alias(self):
        x = np.array([0.4, -0.2])
        assert_array_equal(gm_score(PRIOR, x), PRIOR.score(x))
