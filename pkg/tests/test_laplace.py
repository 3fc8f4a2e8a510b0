import numpy as np
import pytest

from bayesdesign.core import (
    BlockStructure,
    LinearTransform,
    ModelSet,
    ModelSpec,
    RatioTransform,
    UniformBoxPrior,
    fd_gradient,
    fd_jacobian,
    identity_transform,
)
from bayesdesign.laplace import (
    FitError,
    ScoringConfig,
    approx_model_posteriors,
    fit_batch,
    information_matrix,
    laplace_log_evidence,
    model_log_probs,
    sample_approx_posterior,
    scoring_mode,
    transform_posterior,
)
from bayesdesign.linalg import ArrowheadFactor, DenseFactor, cholesky_jitter, factorize
from bayesdesign.models import (
    BOX_HILL_BOUNDS,
    LogisticModel,
    build_box_hill,
    build_hier_logistic,
    build_linear_gaussian,
    build_standard_logistic,
)

from oracles import grid_golden_mode, log_evidence_quadrature_1d


class FlatLogistic(LogisticModel):
    """Logistic model whose normal approximation keeps the flat box prior."""

    @property
    def laplace_prior(self):
        return self.prior


class NoParameters(ModelSpec):
    """y ~ N(0, I): a model without parameters."""

    dim = 0
    prior = None
    name = "fixed"

    def log_likelihood(self, theta, y, x):
        y = np.asarray(y, dtype=float)
        return -0.5 * np.sum(y * y + np.log(2 * np.pi), axis=-1)


def random_linear_gaussian(rng, p, n=None):
    n = n or p + 3
    A = rng.normal(size=(p, p))
    cov = A @ A.T / p + 0.5 * np.eye(p)
    model = build_linear_gaussian(rng.normal(size=p), cov, sigma=rng.uniform(0.3, 2.0))
    x = rng.normal(size=(n, p))
    y = model.simulate(model.prior.sample(rng, 1)[0], x, rng)
    return model, x, y


class TestInformationMatrix:
    def test_flat_prior_equals_fisher(self, rng):
        m = FlatLogistic()
        x = rng.uniform(-1, 1, (6, 4))
        th = m.prior.sample(rng, 4)
        np.testing.assert_array_equal(information_matrix(m, th, x), m.fisher_information(th, x))

    def test_normal_prior_adds_precision(self, rng):
        m = build_standard_logistic()
        x = rng.uniform(-1, 1, (6, 4))
        th = m.prior.sample(rng, 4)
        np.testing.assert_allclose(
            information_matrix(m, th, x), m.fisher_information(th, x) + np.eye(5) / 3.0, rtol=1e-14
        )

    def test_hier_pattern(self, rng):
        m = build_hier_logistic((1, 1, 0, 0, 1), 2)
        x = rng.uniform(-1, 1, (12, 4))
        th = m.laplace_prior.sample(rng, 1)[0]
        H = information_matrix(m, th, x)
        prior_hess = -fd_jacobian(lambda t: fd_gradient(m.laplace_prior.log_density, t), th)
        np.testing.assert_allclose(H, m.fisher_information(th, x) + prior_hess, atol=1e-5)
        assert np.all(H[3:6, 6:9] == 0) and np.all(H[6:9, 3:6] == 0)

    def test_non_finite_source_named(self):
        m = build_standard_logistic()
        with pytest.raises(FitError, match="Fisher"):
            information_matrix(m, np.full(5, np.nan), np.zeros((6, 4)))


class TestScoringMode:
    def test_linear_gaussian_exact(self, rng):
        model, x, y = random_linear_gaussian(rng, 4)
        post = scoring_mode(model, y, x)
        mean, cov = model.exact_posterior(y, x)
        assert post.converged
        np.testing.assert_allclose(post.mode, mean, atol=1e-8)
        np.testing.assert_allclose(post.covariance, cov, atol=1e-8)

    def test_one_parameter_logistic(self, rng):
        m = build_standard_logistic((1, 0, 0, 0, 0))
        x = rng.uniform(-1, 1, (6, 4))
        y = rng.integers(0, 2, 6).astype(float)
        post = scoring_mode(m, y, x)

        def logpost(t):
            t = np.atleast_1d(t)
            return float(m.log_likelihood(t, y, x) + m.laplace_prior.log_density(t))

        oracle = grid_golden_mode(logpost, [-20.0], [20.0])
        assert post.converged
        np.testing.assert_allclose(post.mode, oracle, atol=1e-4)

    @pytest.mark.parametrize("step2,damped", [(9e-5, 1), (2e-4, 3)])
    def test_convergence_threshold(self, step2, damped):
        # prior N(0, 1), one run x = 1, sigma = 1: posterior mean y / 2 and
        # the damped iterates move a quarter of the remaining distance, so the
        # first squared step is (y / 8)^2 and later ones shrink by (3/4)^2
        m = build_linear_gaussian([0.0], [[1.0]])
        y = np.array([8 * np.sqrt(step2)])
        fit = fit_batch(m, y[None, :], np.ones((1, 1)), ScoringConfig(polish_steps=0))
        assert fit.damped_iterations[0] == damped
        assert fit.converged[0]

    def test_kappa_is_used(self):
        m = build_linear_gaussian([0.0], [[1.0]])
        fit = fit_batch(m, np.array([[4.0]]), np.ones((1, 1)),
                        ScoringConfig(max_iter=1, polish_steps=0))
        # one quarter of the way from 0 to the posterior mean 2
        assert fit.mode[0, 0] == pytest.approx(0.5)
        assert not fit.converged[0]

    def test_config_validation(self):
        with pytest.raises(ValueError):
            ScoringConfig(kappa=0.0)
        with pytest.raises(ValueError):
            ScoringConfig(epsilon=-1.0)

    def test_projection_onto_box(self):
        m = FlatLogistic((1, 0, 0, 0, 0))
        # all successes: the flat-prior mode is the upper edge of the box
        fit = fit_batch(m, np.ones((1, 6)), np.zeros((6, 4)))
        assert fit.mode[0, 0] == pytest.approx(3.0)
        assert fit.boundary_hit[0]

    def test_batch_matches_single(self, rng):
        m = build_standard_logistic()
        x = rng.uniform(-1, 1, (6, 4))
        y = m.simulate(m.prior.sample(rng, 5), x, rng)
        batch = fit_batch(m, y, x)
        for b in range(5):
            one = scoring_mode(m, y[b], x)
            np.testing.assert_allclose(one.mode, batch.mode[b], atol=1e-12)


class TestLaplaceEvidence:
    @pytest.mark.invariant
    @pytest.mark.parametrize("p", range(1, 11))
    def test_exact_for_linear_gaussian(self, p, seed):
        model, x, y = random_linear_gaussian(np.random.default_rng(seed + p), p)
        post = scoring_mode(model, y, x)
        exact = model.exact_log_evidence(y, x)
        assert post.log_evidence == pytest.approx(exact, abs=1e-8)
        assert laplace_log_evidence(model, post, y, x) == pytest.approx(exact, abs=1e-8)

    def test_logistic_quadrature(self, rng):
        m = build_standard_logistic((1, 0, 0, 0, 0))
        x = rng.uniform(-1, 1, (6, 4))
        y = rng.integers(0, 2, 6).astype(float)
        post = scoring_mode(m, y, x)
        oracle = log_evidence_quadrature_1d(
            lambda t: float(m.log_likelihood(np.array([t]), y, x)),
            lambda t: float(m.laplace_prior.log_density(np.array([t]))),
            -30.0, 30.0,
        )
        assert post.log_evidence == pytest.approx(oracle, abs=0.05)

    def test_no_parameters(self, rng):
        m = NoParameters()
        y = rng.normal(size=4)
        fit = fit_batch(m, y[None, :], np.zeros((4, 1)))
        assert fit.log_evidence[0] == pytest.approx(m.log_likelihood(None, y, None))


class TestModelPosteriors:
    def test_single_model(self, rng):
        m = build_standard_logistic()
        x = rng.uniform(-1, 1, (6, 4))
        mps = approx_model_posteriors(ModelSet((m,)), rng.integers(0, 2, (3, 6)), x)
        np.testing.assert_array_equal(mps.probs, 1.0)

    def test_identical_models(self, rng):
        m = build_standard_logistic()
        x = rng.uniform(-1, 1, (6, 4))
        mps = approx_model_posteriors(ModelSet((m, m)), rng.integers(0, 2, (3, 6)), x)
        np.testing.assert_allclose(mps.probs, 0.5, atol=1e-15)

    @pytest.mark.invariant
    def test_shift_invariance(self, rng):
        log_ev = rng.normal(scale=30, size=(20, 4))
        lp = np.log(np.array([0.1, 0.2, 0.3, 0.4]))
        for c in (-500.0, 1e-3, 700.0):
            np.testing.assert_allclose(model_log_probs(log_ev + c, lp), model_log_probs(log_ev, lp),
                                       atol=1e-12)

    def test_probabilities_sum_to_one(self, rng):
        ms = build_box_hill()
        x = np.column_stack([rng.uniform(0, 150, 8), rng.uniform(450, 600, 8)])
        y = ms[1].simulate(ms[1].prior.sample(rng, 20), x, rng)
        mps = approx_model_posteriors(ms, y, x)
        assert np.all(mps.probs >= 0)
        np.testing.assert_allclose(mps.probs.sum(-1), 1.0, atol=1e-12)

    def test_box_hill_identifies_true_model(self, seed):
        rng = np.random.default_rng(seed)
        ms = build_box_hill()
        x = np.column_stack([rng.uniform(0, 150, 50), rng.uniform(450, 600, 50)])
        theta = ms[0].prior.sample(rng, 100)
        theta[:, 2] = rng.uniform(0.0, 0.01, 100)
        y = ms[0].simulate(theta, x, rng)
        p = approx_model_posteriors(ms, y, x).probs
        wins = np.all(p[:, :1] > p[:, 1:], axis=-1)
        assert wins.mean() > 0.5

    def test_all_failed(self):
        with pytest.raises(FitError):
            model_log_probs(np.full((1, 2), np.nan), np.log([0.5, 0.5]))


class TestTransformPosterior:
    def test_linear(self, rng):
        model, x, y = random_linear_gaussian(rng, 3)
        post = scoring_mode(model, y, x)
        A = rng.normal(size=(2, 3))
        mean, cov = transform_posterior(post, LinearTransform(A))
        np.testing.assert_allclose(mean, A @ post.mode, atol=1e-12)
        np.testing.assert_allclose(cov, A @ post.covariance @ A.T, atol=1e-12)

    def test_identity(self, rng):
        model, x, y = random_linear_gaussian(rng, 3)
        post = scoring_mode(model, y, x)
        mean, cov = transform_posterior(post, identity_transform(3))
        np.testing.assert_allclose(mean, post.mode, atol=1e-15)
        np.testing.assert_allclose(cov, post.covariance, atol=1e-15)

    def test_ratio_jacobian(self):
        g = RatioTransform(1, 0)
        theta = np.array([400.0, 5000.0, 0.01])
        J = g.jacobian(theta)[0]
        np.testing.assert_allclose(J, [-5000.0 / 400.0**2, 1 / 400.0, 0.0], rtol=1e-14)
        np.testing.assert_allclose(J, fd_jacobian(g, theta)[0], rtol=1e-6, atol=1e-12)


class TestSampleApproxPosterior:
    def _single(self, rng):
        model, x, y = random_linear_gaussian(rng, 2)
        mps = approx_model_posteriors(ModelSet((model,)), y, x)
        return model, mps

    def test_mean(self, rng):
        model, mps = self._single(rng)
        g = LinearTransform([[1.0, 2.0]])
        phi = sample_approx_posterior(mps, [g], 100_000, rng)[0]
        mean, cov = transform_posterior(mps.fits[0][0], g)
        assert abs(phi.mean() - mean[0]) < 5 * np.sqrt(cov[0, 0] / phi.shape[0])

    def test_median(self, rng):
        model, mps = self._single(rng)
        phi = sample_approx_posterior(mps, [identity_transform(2)], 100_000, rng)[0]
        sd = np.sqrt(np.diag(mps.fits[0].covariance[0]))
        se_median = np.sqrt(np.pi / 2) * sd / np.sqrt(phi.shape[0])
        assert np.all(np.abs(np.median(phi, 0) - mps.fits[0].mode[0]) < 5 * se_median)

    def test_zero_probability_model_never_drawn(self, rng):
        m1 = build_linear_gaussian([0.0], [[1.0]])
        m2 = build_linear_gaussian([100.0], [[1.0]])
        ms = ModelSet((m1, m2), [1.0, 0.0])
        mps = approx_model_posteriors(ms, np.zeros((2, 3)), np.ones((3, 1)))
        phi = sample_approx_posterior(mps, ms.transforms, 5000, rng)
        assert np.all(np.abs(phi) < 20)


class TestInvariants:
    @pytest.mark.invariant
    @pytest.mark.parametrize("family", ["logistic", "logistic_sub", "hier", "linear"])
    def test_gradient_small_at_convergence(self, family, seed):
        rng = np.random.default_rng(seed)
        if family == "linear":
            model = build_linear_gaussian(np.zeros(3), np.eye(3) * 4.0)
            x = rng.normal(size=(6, 3))
        elif family == "hier":
            model = build_hier_logistic((1, 1, 1, 0, 0), 2)
            x = rng.uniform(-1, 1, (12, 4))
        else:
            model = build_standard_logistic((1, 1, 1, 1, 1) if family == "logistic" else (1, 0, 1, 1, 0))
            x = rng.uniform(-1, 1, (6, 4))
        y = model.simulate(model.prior.sample(rng, 200), x, rng)
        fit = fit_batch(model, y, x)
        ok = fit.converged
        assert ok.mean() > 0.95
        f = model.score(fit.mode, y, x) + model.laplace_prior.grad_log_density(fit.mode)
        assert np.max(np.abs(f[ok])) < 1e-3

    @pytest.mark.invariant
    @pytest.mark.parametrize("G", [2, 3, 4])
    def test_block_solve_matches_dense(self, G, seed):
        rng = np.random.default_rng(seed)
        model = build_hier_logistic((1, 1, 0, 1, 1), G)
        x = rng.uniform(-1, 1, (6 * G, 4))
        th = model.laplace_prior.sample(rng, 10)
        H = information_matrix(model, th, x)
        f = rng.normal(size=th.shape)
        arrow = factorize(H, model.block_structure)
        assert isinstance(arrow, ArrowheadFactor)
        dense = DenseFactor(H)
        np.testing.assert_allclose(arrow.solve(f), np.linalg.solve(H, f[..., None])[..., 0],
                                   rtol=1e-10, atol=1e-10)
        np.testing.assert_allclose(arrow.logdet(), dense.logdet(), atol=1e-10)
        np.testing.assert_allclose(arrow.inverse(), dense.inverse(), rtol=1e-9, atol=1e-10)

    def test_jitter_recorded(self):
        A = np.array([[1.0, 1.0], [1.0, 1.0]])
        L, jit = cholesky_jitter(A[None])
        assert jit[0] > 0
        np.testing.assert_allclose(L[0] @ L[0].T, A + jit[0] * np.eye(2))

    def test_arrowhead_shape_checked(self):
        with pytest.raises(ValueError):
            ArrowheadFactor(np.eye(5), BlockStructure(2, 2, 2))
