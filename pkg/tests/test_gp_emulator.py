import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bayesdesign.gp_emulator import gp_fit, gp_predict_mean, minimize_predictive_mean


def noisy_curve(rng, Q=20, lo=-1.0, hi=1.0):
    xs = np.append(np.linspace(lo, hi, Q - 1), rng.uniform(lo, hi))
    zs = np.sin(3 * xs) + 0.5 * xs**2 + 0.05 * rng.standard_normal(Q)
    return xs, zs


class TestFit:
    def test_constant_outputs(self):
        gp = gp_fit(np.linspace(0, 1, 5), np.full(5, 2.5))
        assert gp.constant
        np.testing.assert_array_equal(gp.predict(np.linspace(-1, 2, 7)), 2.5)

    def test_linear_interpolation(self):
        xs = np.linspace(-1, 1, 20)
        gp = gp_fit(xs, xs)
        np.testing.assert_allclose(gp.predict(xs), xs, atol=1e-3)

    def test_reproduces_training_outputs(self, rng):
        xs = np.sort(rng.uniform(0, 1, 12))
        zs = np.cos(4 * xs)
        gp = gp_fit(xs, zs, (0.0, 1.0), nugget=1e-12)
        np.testing.assert_allclose(gp.predict(xs), zs, atol=1e-6)

    def test_recovers_lengthscale(self, seed):
        rng = np.random.default_rng(seed)
        xs = np.linspace(0, 1, 20)
        K = np.exp(-0.5 * ((xs[:, None] - xs[None, :]) / 0.3) ** 2) + 1e-8 * np.eye(20)
        L = np.linalg.cholesky(K)
        logs = [np.log(gp_fit(xs, L @ rng.standard_normal(20), (0, 1)).lengthscale) for _ in range(20)]
        assert abs(np.median(logs) - np.log(0.3)) <= 1.0

    def test_too_few_inputs(self):
        with pytest.raises(ValueError, match="three distinct"):
            gp_fit([0.0, 1.0, 1.0], [1.0, 2.0, 3.0])

    def test_non_finite_outputs(self):
        with pytest.raises(ValueError):
            gp_fit([0.0, 0.5, 1.0], [1.0, np.nan, 3.0])

    def test_kernel_factorizes(self, rng):
        xs, zs = noisy_curve(rng)
        gp = gp_fit(xs, zs)
        R = np.exp(-0.5 * ((gp.xs[:, None] - gp.xs[None, :]) / gp.lengthscale) ** 2)
        np.linalg.cholesky(R + gp.nugget * np.eye(xs.size))
        assert gp.lengthscale > 0 and gp.signal_variance > 0


class TestPredict:
    def test_far_from_data(self, rng):
        xs, zs = noisy_curve(rng)
        gp = gp_fit(xs, zs)
        far = 1.0 + 10 * gp.lengthscale * 2.0 + 1.0
        assert gp_predict_mean(gp, far) == pytest.approx(np.mean(zs), abs=1e-9)

    def test_symmetric_data(self, rng):
        xs = np.linspace(-1, 1, 11)
        zs = np.cosh(xs) + 0.01 * np.abs(np.round(xs * 7))
        gp = gp_fit(xs, zs)
        t = rng.uniform(0, 1, 20)
        np.testing.assert_allclose(gp.predict(t), gp.predict(-t), atol=1e-9)

    def test_scalar_output(self, rng):
        xs, zs = noisy_curve(rng)
        assert isinstance(gp_predict_mean(gp_fit(xs, zs), 0.1), float)


class TestMinimize:
    def test_parabola(self):
        xs = np.linspace(0, 1, 20)
        gp = gp_fit(xs, (xs - 0.3) ** 2)
        x, v = minimize_predictive_mean(gp, (0, 1))
        assert x == pytest.approx(0.3, abs=1e-3)
        assert v == pytest.approx(gp_predict_mean(gp, x))

    def test_constant_returns_lower_endpoint(self):
        gp = gp_fit([0.0, 0.5, 1.0], [1.0, 1.0, 1.0])
        assert minimize_predictive_mean(gp, (0.0, 1.0)) == (0.0, 1.0)

    def test_vertex_outside(self):
        xs = np.linspace(-1, 1, 20)
        gp = gp_fit(xs, (xs - 3.0) ** 2)
        x, _ = minimize_predictive_mean(gp, (-1.0, 1.0))
        assert x == 1.0

    def test_deterministic(self, rng):
        xs, zs = noisy_curve(rng)
        a = minimize_predictive_mean(gp_fit(xs, zs), (-1, 1))
        b = minimize_predictive_mean(gp_fit(xs, zs), (-1, 1))
        assert a == b and -1 <= a[0] <= 1


class TestInvariants:
    @pytest.mark.invariant
    def test_permutation(self, rng):
        xs, zs = noisy_curve(rng)
        perm = rng.permutation(xs.size)
        grid = np.linspace(-1, 1, 101)
        a = gp_fit(xs, zs, (-1, 1)).predict(grid)
        b = gp_fit(xs[perm], zs[perm], (-1, 1)).predict(grid)
        np.testing.assert_allclose(a, b, atol=1e-9, rtol=0)

    @pytest.mark.invariant
    def test_shift(self, rng):
        # outputs and shift are exactly representable, so standardization
        # removes the shift without rounding
        xs = np.linspace(-1, 1, 20)
        zs = rng.integers(-64, 64, 20) / 64.0
        c = float(rng.integers(-1000, 1000))
        grid = np.linspace(-1, 1, 101)
        a = gp_fit(xs, zs).predict(grid)
        b = gp_fit(xs, zs + c).predict(grid)
        np.testing.assert_allclose(b - a, c, atol=1e-9, rtol=0)

    @pytest.mark.invariant
    def test_minimum_below_training_outputs(self, rng):
        xs, zs = noisy_curve(rng)
        gp = gp_fit(xs, zs, (-1, 1))
        _, v = minimize_predictive_mean(gp, (-1, 1))
        assert v <= np.min(gp.predict(xs)) + 1e-12
        assert v <= np.min(zs) + 10 * np.sqrt(gp.nugget) * gp.z_sd + np.max(np.abs(gp.predict(xs) - zs))

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.floats(-10, 10, allow_nan=False), min_size=5, max_size=15), st.integers(0, 2**32 - 1))
    def test_minimizer_in_interval(self, zs, s):
        zs = np.array(zs)
        xs = np.linspace(2.0, 5.0, zs.size)
        x, v = minimize_predictive_mean(gp_fit(xs, zs), (2.0, 5.0))
        assert 2.0 <= x <= 5.0 and np.isfinite(v)
