from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from bayes_sandwich import robust
from bayes_sandwich.errors import DataError, NumericalError
from bayes_sandwich.models import (
    Dataset,
    ModelSpec,
    ParamPoint,
    empirical_fisher,
    score_outer_mean,
)
from bayes_sandwich.posterior import McmcConfig, PosteriorSample, PriorSpec, posterior_cov, sample_posterior
from bayes_sandwich.robust import (
    balanced_inference_loss,
    balanced_posterior_risk,
    brse_intervals,
    closed_form_normal_mean,
    compute_brse,
    glm_balanced_inference_loss,
    inference_loss,
    inference_posterior_risk,
    normal_quantile,
    omega_hat,
    quasi_omega,
    quasi_sigma_hat,
    sigma_hat,
)


def bisect_quantile(prob: float) -> float:
    """Inverse standard normal CDF by bisection on math.erf."""
    lo, hi = -40.0, 40.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if 0.5 * (1 + math.erf(mid / math.sqrt(2))) < prob:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def random_pd(rng, p, scale=1.0):
    A = rng.standard_normal((p, p))
    return scale * (A @ A.T / p + np.eye(p))


def random_glm_instance(rng, family):
    n = int(rng.integers(5, 40))
    p = int(rng.integers(1, 4))
    X = np.column_stack([np.ones(n), rng.uniform(-1.5, 1.5, (n, p - 1))])
    beta = rng.normal(0, 0.7, p)
    if family == "linear":
        data = Dataset(X @ beta + rng.normal(0, 2, n), X)
        theta = ParamPoint(beta + rng.normal(0, 0.3, p), float(rng.uniform(0.3, 3)))
    else:
        data = Dataset(rng.poisson(np.exp(X @ beta)).astype(float), X)
        theta = ParamPoint(beta + rng.normal(0, 0.3, p))
    return data, theta, rng.standard_normal(p), random_pd(rng, p), random_pd(rng, p)


def linear_posterior(rng, n=100, a=2.0, seed=0, cfg=None):
    u = rng.uniform(0, 3, n)
    X = np.column_stack([np.ones(n), u])
    data = Dataset(u + a * u ** 2 + rng.standard_normal(n), X)
    cfg = cfg or McmcConfig(n_chains=2, n_iter=4000, n_burnin=1000, seed=seed)
    return data, sample_posterior(ModelSpec.linear(), PriorSpec(), data, cfg)


class TestInferenceLoss:
    def test_zero_at_identity(self):
        assert inference_loss(np.zeros(2), np.zeros(2), np.eye(2)).total == 0.0

    def test_scalar(self):
        np.testing.assert_allclose(inference_loss([1.0], [0.0], [[1.0]]).total, 1.0)

    def test_two_by_two(self):
        loss = inference_loss([1.0, 1.0], [0.0, 0.0], 2 * np.eye(2))
        np.testing.assert_allclose(loss.total, 2 * np.log(2) + 1, rtol=1e-14)
        np.testing.assert_allclose(loss.logdet_term + loss.estimation_term, loss.total)

    def test_not_pd(self):
        with pytest.raises(NumericalError):
            inference_loss([0.0, 0.0], [0.0, 0.0], np.diag([1.0, -1.0]))


class TestBalancedLoss:
    def test_normal_mean_by_hand(self):
        data = Dataset.normal_sample([0.0, 2.0])
        loss = balanced_inference_loss(ModelSpec.normal_mean(1.0), [1.0], [1.0], [[1.0]], [[1.0]], data)
        np.testing.assert_allclose([loss.logdet_term, loss.estimation_term, loss.lack_of_fit_term], [0, 0, 1])
        np.testing.assert_allclose(loss.total, 1.0)

    def test_normal_mean_scalar_form(self, rng):
        # log s2 + w (t - d)^2 / s2 + sum (y - t)^2 / (n w tau)
        y = rng.standard_normal(7)
        tau, t, d, s2, w = 2.0, 0.3, -0.1, 0.7, 1.6
        loss = balanced_inference_loss(ModelSpec.normal_mean(tau), [t], [d], [[s2]], [[w]], Dataset.normal_sample(y))
        expected = np.log(s2) + w * (t - d) ** 2 / s2 + np.sum((y - t) ** 2) / (7 * w * tau)
        np.testing.assert_allclose(loss.total, expected, rtol=1e-13)

    def test_exact_fit_no_lack_of_fit(self):
        X = np.array([[1.0, 0.0], [1.0, 1.0], [1.0, 2.0]])
        beta = np.array([0.5, 2.0])
        data = Dataset(X @ beta, X)
        loss = balanced_inference_loss(ModelSpec.linear(), ParamPoint(beta, 1.0), beta, np.eye(2), np.eye(2), data)
        assert loss.lack_of_fit_term == 0.0

    @given(seed=st.integers(0, 2 ** 32 - 1))
    def test_components_sum(self, seed):
        rng = np.random.default_rng(seed)
        data, theta, d, Sigma, Omega = random_glm_instance(rng, "poisson")
        loss = balanced_inference_loss(ModelSpec.poisson(), theta, d, Sigma, Omega, data)
        np.testing.assert_allclose(loss.total, loss.logdet_term + loss.estimation_term + loss.lack_of_fit_term)

    @pytest.mark.parametrize("family", ["linear", "poisson"])
    def test_glm_form_equals_generic(self, family):
        rng = np.random.default_rng(2024)
        model = getattr(ModelSpec, family)()
        for _ in range(100):
            data, theta, d, Sigma, Omega = random_glm_instance(rng, family)
            a = balanced_inference_loss(model, theta, d, Sigma, Omega, data)
            b = glm_balanced_inference_loss(model, theta, d, Sigma, Omega, data)
            np.testing.assert_allclose(b.total, a.total, rtol=1e-10)
            np.testing.assert_allclose(b.lack_of_fit_term, a.lack_of_fit_term, rtol=1e-10)

    def test_glm_form_rejects_survival(self):
        data = Dataset.survival([1.0, 2.0], [1.0, 0.0], [[1.0], [1.0]])
        with pytest.raises(DataError):
            glm_balanced_inference_loss(ModelSpec.exp_ph(), [0.0], [0.0], [[1.0]], [[1.0]], data)

    def test_singular_omega(self):
        data = Dataset([1.0, 2.0, 4.0], [[1.0, 0.0], [1.0, 1.0], [1.0, 2.0]])
        with pytest.raises(NumericalError):
            balanced_inference_loss(ModelSpec.poisson(), [0.0, 0.1], [0.0, 0.0], np.eye(2), np.zeros((2, 2)), data)


class TestOmegaSigma:
    def test_degenerate_posterior_is_a_n(self, rng):
        X = np.column_stack([np.ones(12), rng.uniform(size=12)])
        data = Dataset(rng.poisson(3.0, 12).astype(float), X)
        theta = np.array([0.9, 0.3])
        s = PosteriorSample.from_draws(np.tile(theta, (5, 1)))
        M = score_outer_mean(ModelSpec.poisson(), theta, data)
        F = empirical_fisher(ModelSpec.poisson(), theta, data)
        np.testing.assert_allclose(omega_hat(ModelSpec.poisson(), s, data), M @ np.linalg.inv(F), rtol=1e-12)

    def test_average_of_a_n(self, rng):
        X = np.column_stack([np.ones(15), rng.uniform(size=15)])
        data = Dataset(rng.standard_normal(15), X)
        draws = rng.normal(0, 0.2, (7, 2))
        s2 = rng.uniform(0.5, 2.0, 7)
        s = PosteriorSample.from_draws(draws, s2)
        expected = np.mean([
            score_outer_mean(ModelSpec.linear(), ParamPoint(b, v), data)
            @ np.linalg.inv(empirical_fisher(ModelSpec.linear(), ParamPoint(b, v), data))
            for b, v in zip(draws, s2)
        ], axis=0)
        np.testing.assert_allclose(omega_hat(ModelSpec.linear(), s, data), expected, rtol=1e-12)

    def test_chunking_does_not_matter(self, rng, monkeypatch):
        X = np.column_stack([np.ones(10), rng.uniform(size=10)])
        data = Dataset(rng.poisson(2.0, 10).astype(float), X)
        s = PosteriorSample.from_draws(rng.normal(0.5, 0.1, (50, 2)))
        whole = omega_hat(ModelSpec.poisson(), s, data)
        monkeypatch.setattr(robust, "DRAW_CHUNK", 7)
        np.testing.assert_allclose(omega_hat(ModelSpec.poisson(), s, data), whole, rtol=1e-13)

    def test_singular_fisher_names_draw(self):
        X = np.array([[1.0, 0.0], [1.0, 1.0], [1.0, 2.0]])
        data = Dataset([1.0, 2.0, 3.0], X)
        draws = np.array([[0.0, 0.1], [0.0, 0.2], [0.1, 0.0], [0.0, -340.0]])
        with pytest.raises(NumericalError, match="draw 3"):
            omega_hat(ModelSpec.poisson(), PosteriorSample.from_draws(draws), data)

    def test_correct_specification_near_identity(self):
        rng = np.random.default_rng(8)
        n = 2000
        u = rng.uniform(0, 3, n)
        X = np.column_stack([np.ones(n), u])
        data = Dataset(1 + u + rng.standard_normal(n), X)
        prior = PriorSpec(0.0, 1e12, 1e-3, 1e-3)
        s = sample_posterior(ModelSpec.linear(), prior, data, McmcConfig(n_chains=2, n_iter=3000, n_burnin=1000))
        # eigenvalues are invariant to rescaling the covariates
        eig = np.linalg.eigvals(omega_hat(ModelSpec.linear(), s, data))
        np.testing.assert_allclose(np.sort(eig.real), [1.0, 1.0], atol=0.1)
        np.testing.assert_allclose(eig.imag, 0.0, atol=1e-12)

    def test_sigma_hat_is_exact_product(self, rng):
        data, s = linear_posterior(rng)
        res = compute_brse(ModelSpec.linear(), s, data)
        np.testing.assert_array_equal(res.sigma_hat, res.post_cov @ res.omega_hat)
        np.testing.assert_array_equal(res.sigma_hat, sigma_hat(s, res.omega_hat))
        np.testing.assert_array_equal(res.symmetrized_sigma, 0.5 * (res.sigma_hat + res.sigma_hat.T))
        np.testing.assert_allclose(res.brse, np.sqrt(np.diag(res.sigma_hat)))

    def test_identity_omega(self, rng):
        s = PosteriorSample.from_draws(rng.standard_normal((30, 3)))
        np.testing.assert_array_equal(sigma_hat(s, np.eye(3)), posterior_cov(s))

    def test_nonpositive_diagonal_is_reported(self, rng, monkeypatch):
        data, s = linear_posterior(rng)
        monkeypatch.setattr(robust, "omega_hat", lambda *a: np.array([[1.0, 1e4], [1e4, 1.0]]))
        res = compute_brse(ModelSpec.linear(), s, data)
        assert not res.valid and "nonpositive" in res.error
        assert np.isnan(res.brse).any()
        assert res.intervals == []


class TestBayesRuleOptimality:
    @pytest.fixture(scope="class")
    @staticmethod
    def fitted():
        rng = np.random.default_rng(77)
        data, s = linear_posterior(rng, n=60, a=1.0, seed=4)
        res = compute_brse(ModelSpec.linear(), s, data)
        return data, s, res

    @staticmethod
    def symmetric_perturbation(rng, p):
        E = rng.standard_normal((p, p))
        E = 0.5 * (E + E.T)
        return E * rng.uniform(0.05, 0.1) / np.linalg.norm(E)

    def test_joint_perturbations(self, fitted):
        data, s, res = fitted
        model = ModelSpec.linear()
        base = balanced_posterior_risk(model, s, data, res.d_hat, res.sigma_hat, res.omega_hat)
        rng = np.random.default_rng(5)
        lower = 0
        for _ in range(50):
            eps = rng.standard_normal(2)
            eps *= rng.uniform(0.05, 0.1) / np.linalg.norm(eps)
            E = self.symmetric_perturbation(rng, 2)
            I_E = np.eye(2) + E
            risk = balanced_posterior_risk(model, s, data, res.d_hat + eps, res.sigma_hat @ I_E, res.omega_hat @ I_E)
            assert risk >= base
            lower += risk > base
        assert lower >= 48

    @pytest.mark.parametrize("which", ["d", "sigma", "omega"])
    def test_single_component_perturbations(self, fitted, which):
        data, s, res = fitted
        model = ModelSpec.linear()
        base = balanced_posterior_risk(model, s, data, res.d_hat, res.sigma_hat, res.omega_hat)
        rng = np.random.default_rng(6)
        lower = 0
        for _ in range(50):
            d, Sig, Om = res.d_hat, res.sigma_hat, res.omega_hat
            if which == "d":
                eps = rng.standard_normal(2)
                d = d + eps * rng.uniform(0.05, 0.1) / np.linalg.norm(eps)
            elif which == "sigma":
                Sig = Sig @ (np.eye(2) + self.symmetric_perturbation(rng, 2))
            else:
                Om = Om @ (np.eye(2) + self.symmetric_perturbation(rng, 2))
            lower += balanced_posterior_risk(model, s, data, d, Sig, Om) > base
        assert lower >= 48

    def test_minimized_inference_risk(self, fitted):
        _, s, res = fitted
        risk = inference_posterior_risk(s, res.d_hat, res.post_cov)
        p = s.p
        np.testing.assert_allclose(risk, np.linalg.slogdet(res.post_cov)[1] + p, atol=p / s.S * 2)

    def test_inference_risk_minimized_by_mean_and_cov(self, fitted):
        _, s, res = fitted
        base = inference_posterior_risk(s, res.d_hat, res.post_cov)
        rng = np.random.default_rng(9)
        for _ in range(20):
            E = self.symmetric_perturbation(rng, 2)
            assert inference_posterior_risk(s, res.d_hat + 0.01 * rng.standard_normal(2),
                                            res.post_cov @ (np.eye(2) + E)) > base


class TestIntervals:
    @pytest.mark.parametrize("prob", [0.5, 0.6, 0.9, 0.975, 0.995, 1e-6])
    def test_quantile_against_bisection(self, prob):
        np.testing.assert_allclose(normal_quantile(prob), bisect_quantile(prob), atol=1e-9)

    def test_z_975(self):
        assert abs(normal_quantile(0.975) - 1.959964) < 1e-6

    def test_age_row_arithmetic(self):
        (pair,) = brse_intervals([0.570], [0.046], [0.042], 0.95)
        np.testing.assert_allclose(np.round(pair.robust, 3), [0.488, 0.652])

    def test_half_level_symmetric(self):
        (pair,) = brse_intervals([1.3], [0.2], [0.4], 0.5)
        assert np.mean(pair.robust) == pytest.approx(1.3)
        assert np.mean(pair.credible) == pytest.approx(1.3)

    @pytest.mark.parametrize("level", [0.0, 1.0, -0.1, 1.5])
    def test_level_out_of_range(self, level):
        with pytest.raises(DataError):
            brse_intervals([0.0], [1.0], [1.0], level)

    def test_nonpositive_brse(self):
        with pytest.raises(NumericalError):
            brse_intervals([0.0], [1.0], [0.0])

    def test_quantile_credible(self, rng):
        draws = rng.standard_normal((20000, 1))
        (pair,) = brse_intervals([0.0], [1.0], [1.0], 0.95, method="quantile", draws=draws)
        np.testing.assert_allclose(pair.credible, [-1.96, 1.96], atol=0.06)
        with pytest.raises(DataError):
            brse_intervals([0.0], [1.0], [1.0], method="quantile")


class TestQuasi:
    def test_exact_fit_is_zero(self):
        X = np.array([[1.0, 0.0], [1.0, 1.0], [1.0, 2.0]])
        beta = np.array([1.0, -1.0])
        s = PosteriorSample.from_draws(np.tile(beta, (4, 1)), np.ones(4))
        assert quasi_omega(ModelSpec.linear(), s, Dataset(X @ beta, X)) == 0.0

    def test_equidispersed_poisson(self):
        rng = np.random.default_rng(1)
        n = 3000
        u = rng.uniform(-1, 1, n)
        X = np.column_stack([np.ones(n), u])
        data = Dataset(rng.poisson(np.exp(0.5 + u)).astype(float), X)
        s = sample_posterior(ModelSpec.poisson(), PriorSpec(0.0, 1e12), data, McmcConfig(n_chains=1, n_iter=3000, n_burnin=1000))
        np.testing.assert_allclose(quasi_omega(ModelSpec.poisson(), s, data), 1.0, rtol=0.1)

    def test_matches_full_sigma_when_omega_is_scalar(self):
        # X'X = nI and residuals paired within each sign group, for every draw
        sign = np.array([1.0, 1.0, -1.0, -1.0, 1.0, 1.0, -1.0, -1.0])
        X = np.column_stack([np.ones(8), sign])
        slope, c = 0.7, 2.0
        offsets = np.array([0.5, -0.5, 0.5, -0.5, 1.5, -1.5, 1.5, -1.5])
        y = c + slope * sign + offsets
        rng = np.random.default_rng(3)
        b0 = c + rng.normal(0, 0.3, 200)
        draws = np.column_stack([b0, np.full(200, slope)])
        s = PosteriorSample.from_draws(draws, rng.uniform(0.5, 2.0, 200))
        data = Dataset(y, X)
        model = ModelSpec.linear()
        om = omega_hat(model, s, data)
        np.testing.assert_allclose(om, om[0, 0] * np.eye(2), atol=1e-12)
        np.testing.assert_allclose(quasi_sigma_hat(model, s, data), sigma_hat(s, om), rtol=1e-12, atol=1e-15)

    def test_rejects_non_glm(self):
        data = Dataset.survival([1.0, 2.0], [1.0, 1.0], [[1.0], [1.0]])
        s = PosteriorSample.from_draws([[0.0], [0.1]])
        with pytest.raises(DataError):
            quasi_omega(ModelSpec.exp_ph(), s, data)


class TestClosedForm:
    def test_two_point_example(self):
        np.testing.assert_allclose(closed_form_normal_mean(np.array([0.0, 2.0]), 0.0, 1.0), (2 / 3, 13 / 9, 13 / 27), rtol=1e-14)

    @given(y=st.lists(st.floats(-50, 50), min_size=1, max_size=20), mu=st.floats(-5, 5), eta2=st.floats(0.01, 100))
    def test_internal_consistency(self, y, mu, eta2):
        d, w, s2 = closed_form_normal_mean(np.array(y), mu, eta2)
        k = len(y) * eta2 + 1
        np.testing.assert_allclose(s2, w * eta2 / k, rtol=1e-9, atol=1e-300)

    def test_flat_prior_limit(self, rng):
        y = rng.standard_normal(9) * 3 + 1
        d, _, _ = closed_form_normal_mean(y, 5.0, 1e12)
        assert abs(d - y.mean()) < 1e-9

    def test_large_n_variance(self, rng):
        y = rng.normal(0.0, 2.0, 100_000)
        _, _, s2 = closed_form_normal_mean(y, 0.0, 1.0)
        np.testing.assert_allclose(y.size * s2, y.var(), rtol=1e-3)

    def test_empty(self):
        with pytest.raises(DataError):
            closed_form_normal_mean(np.array([]), 0.0, 1.0)

    def test_pipeline_matches_closed_form(self):
        data = Dataset.normal_sample([0.0, 2.0])
        s = sample_posterior(ModelSpec.normal_mean(1.0), PriorSpec(0.0, 1.0), data,
                             McmcConfig(n_chains=4, n_iter=25000, n_burnin=0, seed=2))
        res = compute_brse(ModelSpec.normal_mean(1.0), s, data)
        d, w, s2 = closed_form_normal_mean(data, 0.0, 1.0)
        draws = s.draws[:, 0]
        S = s.S
        # i.i.d. draws: delta-method standard errors of each Monte Carlo estimate
        se_d = draws.std() / np.sqrt(S)
        a_n = 1 + (1 - draws) ** 2  # A_n(theta) = (1/2)((0 - t)^2 + (2 - t)^2)
        se_w = a_n.std() / np.sqrt(S)
        se_s2 = np.sqrt((w * np.sqrt(2 / (S - 1)) / 3) ** 2 + (se_w / 3) ** 2)
        assert abs(res.d_hat[0] - d) < 3 * se_d
        assert abs(res.omega_hat[0, 0] - w) < 3 * se_w
        assert abs(res.sigma_hat[0, 0] - s2) < 3 * se_s2
