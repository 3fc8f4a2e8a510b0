"""Ready-made model families.

* first-order logistic regression in four factors, with a uniform box prior
  on the regression coefficients and optional block effects;
* the four Box-Hill chemical-kinetics models with unknown response variance;
* a linear model with normal errors and a normal prior, whose posterior and
  evidence are available in closed form (used as an exact reference).
"""
from __future__ import annotations

import itertools
from math import comb

import numpy as np
from scipy.special import expit, log_expit

from .core import (
    LOG_2PI,
    BlockStructure,
    ModelSet,
    ModelSpec,
    NormalPrior,
    PriorSpec,
    ProductPrior,
    RatioTransform,
    UniformBoxPrior,
    identity_transform,
    log_normal_pdf,
    select_transform,
)

LOGISTIC_LOWER = np.array([-3.0, 4.0, 5.0, -6.0, -2.5])
LOGISTIC_UPPER = np.array([3.0, 10.0, 11.0, 0.0, 3.5])
BLOCK_EFFECT_LIMITS = np.array([3.0, 3.0, 3.0, 1.0, 1.0])
RUNS_PER_BLOCK = 6
LOGISTIC_BOUNDS = np.tile([-1.0, 1.0], (4, 1))

BOX_HILL_BOUNDS = np.array([[0.0, 150.0], [450.0, 600.0]])
SIGMA2_MIN = 1e-6


def _softplus(eta):
    return -log_expit(-eta)


def _active(v):
    v = np.asarray(v, dtype=int)
    if v.shape != (5,) or v[0] != 1 or not np.all((v == 0) | (v == 1)):
        raise ValueError(f"inclusion vector must be binary of length 5 with v0 = 1, got {v}")
    return np.flatnonzero(v)


def _model_matrix(x, cols):
    x = np.asarray(x, dtype=float)
    X = np.concatenate([np.ones(x.shape[:-1] + (1,)), x], axis=-1)
    return X[..., cols]


# ---------------------------------------------------------------------------
# Logistic regression
# ---------------------------------------------------------------------------


def moment_matched_normal(prior: PriorSpec) -> NormalPrior:
    """Normal distribution with the mean and variance of ``prior``."""
    return NormalPrior(prior.mean, prior.variance)


class LogisticModel(ModelSpec):
    """Bernoulli responses with logit link on the active columns of ``[1, x]``.

    The prior is uniform on a box. With few runs the data are usually
    separable, so the flat prior leaves the posterior mode on the edge of the
    box with an almost singular information matrix. The normal
    approximation therefore uses the moment-matched normal prior
    ``N((L + U) / 2, diag((U - L)**2 / 12))``.
    """

    def __init__(self, v=(1, 1, 1, 1, 1)):
        self.v = np.asarray(v, dtype=int)
        self.cols = _active(self.v)
        self.dim = len(self.cols)
        self.name = "logistic" + "".join(map(str, self.v[1:]))
        self.prior = UniformBoxPrior(LOGISTIC_LOWER[self.cols], LOGISTIC_UPPER[self.cols])
        self._laplace_prior = moment_matched_normal(self.prior)
        self.transform = identity_transform(self.dim)

    @property
    def laplace_prior(self):
        return self._laplace_prior

    def _eta(self, theta, x):
        return np.asarray(theta, dtype=float) @ _model_matrix(x, self.cols).T

    def log_likelihood(self, theta, y, x):
        eta = self._eta(theta, x)
        return np.sum(y * eta - _softplus(eta), axis=-1)

    def score(self, theta, y, x):
        return (y - expit(self._eta(theta, x))) @ _model_matrix(x, self.cols)

    def fisher_information(self, theta, x):
        X = _model_matrix(x, self.cols)
        rho = expit(self._eta(theta, x))
        w = rho * (1 - rho)
        outer = (X[:, :, None] * X[:, None, :]).reshape(X.shape[0], -1)
        return (w @ outer).reshape(w.shape[:-1] + (self.dim, self.dim))

    def simulate(self, theta, x, rng):
        rho = expit(self._eta(theta, x))
        return (rng.random(rho.shape) < rho).astype(float)

    def log_likelihood_matrix(self, y, thetas, x):
        eta = self._eta(thetas, x)  # (J, n)
        return np.asarray(y, dtype=float) @ eta.T - _softplus(eta).sum(axis=-1)


def build_standard_logistic(v=(1, 1, 1, 1, 1)) -> LogisticModel:
    return LogisticModel(v)


def _hier_gamma_integral(M, Z, G):
    """``int_M^Z zeta^-G (Z - zeta) d zeta`` for ``0 < M < Z``."""
    M = np.asarray(M, dtype=float)
    if G == 1:
        closed = Z * np.log(Z / M) - (Z - M)
    elif G == 2:
        closed = Z * (1.0 / M - 1.0 / Z) - np.log(Z / M)
    else:
        closed = Z * (M ** (1 - G) - Z ** (1 - G)) / (G - 1) - (
            M ** (2 - G) - Z ** (2 - G)
        ) / (G - 2)
    # cancellation near the upper limit: fall back to Gauss-Legendre there
    near = (Z - M) < 1e-2 * Z
    if np.any(near):
        nodes, weights = np.polynomial.legendre.leggauss(20)
        Mn = M[near]
        half = 0.5 * (Z - Mn)[..., None]
        zeta = Mn[..., None] + half * (nodes + 1)
        closed = np.array(closed, dtype=float)
        closed[near] = np.sum(weights * half * zeta ** (-G) * (Z - zeta), axis=-1)
    return closed


def hier_gamma_log_prior(gamma_t, Z: float):
    """Marginal log prior density of the ``G`` block effects of one factor.

    Given ``zeta``, the effects are iid ``U[-zeta, zeta]`` and ``zeta`` has
    the triangular density ``2 (Z - zeta) / Z**2`` on ``(0, Z)``. Integrating
    ``zeta`` out leaves a density depending on ``M = max |gamma_t|`` only::

        log int_M^Z (2 zeta)^-G 2 (Z - zeta) / Z**2 d zeta

    The result is ``-inf`` when ``M >= Z`` and ``+inf`` at ``M = 0``, where the
    integral diverges for every ``G >= 1``.
    """
    gamma_t = np.asarray(gamma_t, dtype=float)
    G = gamma_t.shape[-1]
    if G < 1 or Z <= 0:
        raise ValueError("need G >= 1 and Z > 0")
    M = np.max(np.abs(gamma_t), axis=-1)
    out = np.full(M.shape, -np.inf)
    out[M == 0] = np.inf
    ok = (M > 0) & (M < Z)
    if np.any(ok):
        J = _hier_gamma_integral(M[ok], Z, G)
        out[ok] = (1 - G) * np.log(2.0) - 2 * np.log(Z) + np.log(J)
    return out if out.ndim else float(out)


class HierGammaPrior(PriorSpec):
    """Block effects ``gamma_{ti} ~ U[-zeta_t, zeta_t]`` with triangular ``zeta_t``.

    Parameters are ordered group by group: ``(gamma_1, ..., gamma_G)`` with
    ``gamma_i`` holding one entry per active factor.
    """

    def __init__(self, Z, G: int):
        self.Z = np.asarray(Z, dtype=float)
        self.G = int(G)
        b = self.Z.size
        self.dim = b * self.G
        lim = np.tile(self.Z, self.G)
        self.lower, self.upper = -lim, lim

    def sample(self, rng, size):
        zeta = rng.triangular(0.0, 0.0, self.Z, size=(size, self.Z.size))
        u = rng.uniform(-1.0, 1.0, size=(size, self.G, self.Z.size))
        return (u * zeta[:, None, :]).reshape(size, self.dim)

    def log_density(self, theta):
        gam = np.asarray(theta, dtype=float)
        gam = gam.reshape(gam.shape[:-1] + (self.G, self.Z.size))
        return sum(
            hier_gamma_log_prior(gam[..., :, t], self.Z[t]) for t in range(self.Z.size)
        )

    @property
    def mean(self):
        return np.zeros(self.dim)

    @property
    def variance(self):
        return np.diag(np.tile(self.Z**2 / 18.0, self.G))


class HierLogisticModel(ModelSpec):
    """Logistic regression for ``G`` blocks of six runs with block effects.

    ``theta = (beta, gamma_1, ..., gamma_G)``, each piece over the active
    columns. Run ``r`` belongs to block ``r // 6``.

    The normal approximation uses the moment-matched normal prior: the
    coefficients as in :class:`LogisticModel` and ``N(0, Z_t**2 / 18)`` for
    each block effect (whose exact marginal prior is unbounded at zero, see
    :func:`hier_gamma_log_prior`).
    """

    def __init__(self, v=(1, 1, 1, 1, 1), G: int = 2):
        if G < 2:
            raise ValueError("the hierarchical model needs G >= 2 blocks")
        self.v = np.asarray(v, dtype=int)
        self.cols = _active(self.v)
        self.G = int(G)
        b = len(self.cols)
        self.b = b
        self.dim = (1 + self.G) * b
        self.name = f"hier_logistic{''.join(map(str, self.v[1:]))}_G{self.G}"
        box = UniformBoxPrior(LOGISTIC_LOWER[self.cols], LOGISTIC_UPPER[self.cols])
        Z = BLOCK_EFFECT_LIMITS[self.cols]
        self.prior = ProductPrior([box, HierGammaPrior(Z, self.G)])
        self._laplace_prior = NormalPrior(
            np.concatenate([box.mean, np.zeros(b * self.G)]),
            np.concatenate([np.diag(box.variance), np.tile(Z**2 / 18.0, self.G)]),
        )
        self.transform = select_transform(self.dim, range(b))
        self.block_structure = BlockStructure(b, self.G, b)
        self.groups = np.repeat(np.arange(self.G), RUNS_PER_BLOCK)

    @property
    def laplace_prior(self):
        return self._laplace_prior

    def _check_runs(self, x):
        n = np.asarray(x).shape[-2]
        if n != self.G * RUNS_PER_BLOCK:
            raise ValueError(f"design has {n} runs, model expects {self.G * RUNS_PER_BLOCK}")

    def _coef(self, theta):
        theta = np.asarray(theta, dtype=float)
        beta = theta[..., : self.b]
        gam = theta[..., self.b :].reshape(theta.shape[:-1] + (self.G, self.b))
        return (beta[..., None, :] + gam)[..., self.groups, :]  # (..., n, b)

    def _eta(self, theta, x):
        self._check_runs(x)
        return np.sum(_model_matrix(x, self.cols) * self._coef(theta), axis=-1)

    def log_likelihood(self, theta, y, x):
        eta = self._eta(theta, x)
        return np.sum(y * eta - _softplus(eta), axis=-1)

    def _by_group(self, r, X):
        # per-group X^T r, shape (..., G, b)
        return np.einsum("...gr,grb->...gb", r.reshape(r.shape[:-1] + (self.G, RUNS_PER_BLOCK)),
                         X.reshape(self.G, RUNS_PER_BLOCK, self.b))

    def score(self, theta, y, x):
        X = _model_matrix(x, self.cols)
        resid = y - expit(self._eta(theta, x))
        per_group = self._by_group(resid, X)
        beta_part = per_group.sum(axis=-2)
        return np.concatenate(
            [beta_part, per_group.reshape(per_group.shape[:-2] + (self.G * self.b,))], axis=-1
        )

    def group_blocks(self, theta, x):
        """Per-group Fisher blocks ``sum_{r in block} w_r x_r x_r^T``, shape (..., G, b, b)."""
        X = _model_matrix(x, self.cols)
        rho = expit(self._eta(theta, x))
        w = (rho * (1 - rho)).reshape(rho.shape[:-1] + (self.G, RUNS_PER_BLOCK))
        Xg = X.reshape(self.G, RUNS_PER_BLOCK, self.b)
        return np.einsum("...gr,gri,grj->...gij", w, Xg, Xg)

    def fisher_information(self, theta, x):
        D = self.group_blocks(theta, x)
        batch = D.shape[:-3]
        b, G = self.b, self.G
        out = np.zeros(batch + (self.dim, self.dim))
        out[..., :b, :b] = D.sum(axis=-3)
        for g in range(G):
            s = slice(b * (g + 1), b * (g + 2))
            out[..., :b, s] = D[..., g, :, :]
            out[..., s, :b] = D[..., g, :, :]
            out[..., s, s] = D[..., g, :, :]
        return out

    def simulate(self, theta, x, rng):
        rho = expit(self._eta(theta, x))
        return (rng.random(rho.shape) < rho).astype(float)

    def log_likelihood_matrix(self, y, thetas, x):
        eta = self._eta(thetas, x)
        return np.asarray(y, dtype=float) @ eta.T - _softplus(eta).sum(axis=-1)


def build_hier_logistic(v=(1, 1, 1, 1, 1), G: int = 2) -> HierLogisticModel:
    return HierLogisticModel(v, G)


def selection_vectors() -> list[tuple[int, ...]]:
    """The 16 inclusion vectors ``(1, v1, ..., v4)``, null model first."""
    return [(1,) + v for v in itertools.product((0, 1), repeat=4)]


def multiplicity_model_prior(vs=None) -> np.ndarray:
    """``pi(m) = 1 / (5 * C(4, b_m - 1))`` with ``b_m`` the number of coefficients.

    Each model size gets total probability 1/5, shared equally among the
    models of that size.
    """
    if vs is None:
        vs = selection_vectors()
    probs = []
    for v in vs:
        v = np.asarray(v)
        s = int(v[-4:].sum())
        probs.append(1.0 / (5 * comb(4, s)))
    return np.array(probs)


def build_logistic_selection(G: int | None = None) -> ModelSet:
    """All 16 submodels with the multiplicity-correcting model prior.

    ``G=None`` gives standard logistic regression, otherwise the
    hierarchical model with ``G`` blocks. The submodels share no parameter
    of interest, so their ``transform`` is ``None``.
    """
    vs = selection_vectors()
    if G is None:
        models = tuple(LogisticModel(v) for v in vs)
    else:
        models = tuple(HierLogisticModel(v, G) for v in vs)
    for m in models:
        m.transform = None
    return ModelSet(models, multiplicity_model_prior(vs))


# ---------------------------------------------------------------------------
# Box-Hill models
# ---------------------------------------------------------------------------


class BoxHillModel(ModelSpec):
    """``y_i ~ N(eta_m(theta; x_i), sigma^2)`` with ``theta = (theta1, theta2, sigma2)``.

    With ``u = theta1 * x1 * exp(-theta2 / x2)`` the mean is ``exp(-u)`` for
    model 1 and ``(1 + u) ** (-a)`` with ``a = 1, 1/2, 1/3`` for models 2-4.
    """

    _powers = {2: 1.0, 3: 0.5, 4: 1.0 / 3.0}

    def __init__(self, m: int, transform: str = "identity"):
        if m not in (1, 2, 3, 4):
            raise ValueError("Box-Hill model index must be 1..4")
        self.m = m
        self.dim = 3
        self.name = f"box_hill{m}"
        self.prior = ProductPrior(
            [
                NormalPrior([400.0, 5000.0], [25.0**2, 250.0**2]),
                UniformBoxPrior([0.0], [1.0], open=True, clip_margin=SIGMA2_MIN),
            ]
        )
        self.transform = box_hill_transform(transform)

    def _u(self, theta, x):
        theta = np.asarray(theta, dtype=float)
        x = np.asarray(x, dtype=float)
        return theta[..., 0, None] * x[:, 0] * np.exp(-theta[..., 1, None] / x[:, 1])

    def mean_response(self, theta, x):
        u = self._u(theta, x)
        if self.m == 1:
            return np.exp(-u)
        return (1.0 + u) ** (-self._powers[self.m])

    def mean_gradient(self, theta, x):
        """``d eta / d (theta1, theta2)`` with shape (..., n, 2)."""
        theta = np.asarray(theta, dtype=float)
        x = np.asarray(x, dtype=float)
        u = self._u(theta, x)
        if self.m == 1:
            deta_du = -np.exp(-u)
        else:
            a = self._powers[self.m]
            deta_du = -a * (1.0 + u) ** (-a - 1)
        du1 = x[:, 0] * np.exp(-theta[..., 1, None] / x[:, 1])
        du2 = -u / x[:, 1]
        return np.stack([deta_du * du1, deta_du * du2], axis=-1)

    def log_likelihood(self, theta, y, x):
        theta = np.asarray(theta, dtype=float)
        s2 = theta[..., 2]
        r = y - self.mean_response(theta, x)
        n = r.shape[-1]
        return -0.5 * n * (LOG_2PI + np.log(s2)) - 0.5 * np.sum(r * r, axis=-1) / s2

    def score(self, theta, y, x):
        theta = np.asarray(theta, dtype=float)
        s2 = theta[..., 2]
        r = y - self.mean_response(theta, x)
        g = np.einsum("...r,...ri->...i", r, self.mean_gradient(theta, x)) / s2[..., None]
        n = r.shape[-1]
        gs = -0.5 * n / s2 + 0.5 * np.sum(r * r, axis=-1) / s2**2
        return np.concatenate([g, gs[..., None]], axis=-1)

    def fisher_information(self, theta, x):
        theta = np.asarray(theta, dtype=float)
        s2 = theta[..., 2]
        grad = self.mean_gradient(theta, x)
        n = grad.shape[-2]
        out = np.zeros(theta.shape[:-1] + (3, 3))
        out[..., :2, :2] = np.einsum("...ri,...rj->...ij", grad, grad) / s2[..., None, None]
        out[..., 2, 2] = 0.5 * n / s2**2
        return out

    def simulate(self, theta, x, rng):
        theta = np.asarray(theta, dtype=float)
        mu = self.mean_response(theta, x)
        return mu + np.sqrt(theta[..., 2, None]) * rng.standard_normal(mu.shape)

    def log_likelihood_matrix(self, y, thetas, x):
        y = np.asarray(y, dtype=float)
        mu = self.mean_response(thetas, x)  # (J, n)
        s2 = thetas[:, 2]
        n = y.shape[-1]
        quad = (
            np.sum(y * y, axis=-1)[:, None]
            - 2.0 * (y @ mu.T)
            + np.sum(mu * mu, axis=-1)[None, :]
        )
        return -0.5 * n * (LOG_2PI + np.log(s2)) - 0.5 * quad / s2


def box_hill_transform(kind: str = "identity"):
    """``identity`` gives ``(theta1, theta2)``; ``ratio`` gives ``theta2 / theta1``."""
    if kind == "identity":
        return select_transform(3, [0, 1])
    if kind == "ratio":
        return RatioTransform(1, 0)
    raise ValueError(f"unknown Box-Hill transform {kind!r}")


def build_box_hill(transform: str = "identity") -> ModelSet:
    return ModelSet(tuple(BoxHillModel(m, transform) for m in (1, 2, 3, 4)), np.full(4, 0.25))


# ---------------------------------------------------------------------------
# Linear-Gaussian reference model
# ---------------------------------------------------------------------------


class LinearGaussianModel(ModelSpec):
    """``y ~ N(x theta, sigma^2 I)`` with a normal prior; the design is the model matrix."""

    def __init__(self, prior_mean, prior_cov, sigma: float = 1.0):
        self.prior = NormalPrior(prior_mean, prior_cov)
        self.dim = self.prior.dim
        self.sigma = float(sigma)
        self.name = "linear_gaussian"
        self.transform = identity_transform(self.dim)

    def log_likelihood(self, theta, y, x):
        r = y - np.asarray(theta, dtype=float) @ np.asarray(x, dtype=float).T
        n = r.shape[-1]
        s2 = self.sigma**2
        return -0.5 * n * (LOG_2PI + np.log(s2)) - 0.5 * np.sum(r * r, axis=-1) / s2

    def score(self, theta, y, x):
        x = np.asarray(x, dtype=float)
        return (y - np.asarray(theta, dtype=float) @ x.T) @ x / self.sigma**2

    def fisher_information(self, theta, x):
        x = np.asarray(x, dtype=float)
        info = x.T @ x / self.sigma**2
        theta = np.asarray(theta, dtype=float)
        return np.broadcast_to(info, theta.shape[:-1] + info.shape).copy()

    def simulate(self, theta, x, rng):
        mu = np.asarray(theta, dtype=float) @ np.asarray(x, dtype=float).T
        return mu + self.sigma * rng.standard_normal(mu.shape)

    def log_likelihood_matrix(self, y, thetas, x):
        y = np.asarray(y, dtype=float)
        mu = thetas @ np.asarray(x, dtype=float).T
        n = y.shape[-1]
        s2 = self.sigma**2
        quad = np.sum(y * y, axis=-1)[:, None] - 2.0 * (y @ mu.T) + np.sum(mu * mu, axis=-1)
        return -0.5 * n * (LOG_2PI + np.log(s2)) - 0.5 * quad / s2

    # closed forms
    def exact_posterior(self, y, x):
        x = np.asarray(x, dtype=float)
        prec = self.prior._prec + x.T @ x / self.sigma**2
        cov = np.linalg.inv(prec)
        mean = (np.asarray(y, dtype=float) @ x / self.sigma**2 + self.prior.mean @ self.prior._prec) @ cov
        return mean, cov

    def exact_log_evidence(self, y, x):
        x = np.asarray(x, dtype=float)
        cov = self.sigma**2 * np.eye(x.shape[0]) + x @ self.prior.variance @ x.T
        return log_normal_pdf(y, x @ self.prior.mean, cov)

    def exact_expected_si_loss(self, x):
        """``-0.5 log |I + Psi X^T X / sigma^2|``, the expected self-information loss."""
        x = np.asarray(x, dtype=float)
        M = np.eye(self.dim) + self.prior.variance @ x.T @ x / self.sigma**2
        return -0.5 * np.linalg.slogdet(M)[1]

    def exact_expected_se_loss(self, x):
        """Trace of the (data-independent) posterior covariance."""
        x = np.asarray(x, dtype=float)
        prec = self.prior._prec + x.T @ x / self.sigma**2
        return float(np.trace(np.linalg.inv(prec)))


def build_linear_gaussian(prior_mean, prior_cov, sigma: float = 1.0) -> LinearGaussianModel:
    return LinearGaussianModel(prior_mean, prior_cov, sigma)
