"""Posterior modes by scoring, Laplace evidence and normal approximations.

For model ``m`` and response ``y`` the posterior of ``theta`` is approximated
by ``N(mode, H(mode)^-1)`` where ``H`` is the Fisher information plus the
negative Hessian of the log prior. The mode is found by the damped scoring
iteration

    theta <- theta + kappa * H(theta)^-1 f(theta)

started at the prior mean, with ``f`` the gradient of the log posterior.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .core import LOG_2PI, ModelSet, ModelSpec, TransformSpec
from .linalg import cholesky_jitter, factorize


class FitError(RuntimeError):
    pass


@dataclass(frozen=True)
class ScoringConfig:
    """Tuning of the scoring iteration.

    ``kappa`` and ``epsilon`` drive the damped phase: it stops once the
    squared norm of a step falls below ``epsilon``. A step that would lower
    the log posterior is retried with ``kappa`` halved. Up to ``polish_steps``
    undamped steps then refine the mode until the squared step is below
    ``polish_tol``; set ``polish_steps=0`` to skip them.
    """

    kappa: float = 0.25
    epsilon: float = 1e-4
    max_iter: int = 100
    polish_steps: int = 10
    polish_tol: float = 1e-18
    jitter_tries: int = 3

    def __post_init__(self):
        if not 0 < self.kappa <= 1:
            raise ValueError("kappa must lie in (0, 1]")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")


@dataclass(frozen=True)
class NormalPosterior:
    mode: np.ndarray
    covariance: np.ndarray
    log_evidence: float
    iterations: int
    converged: bool
    boundary_hit: bool
    jitter: float = 0.0


@dataclass
class BatchPosterior:
    """Normal approximations for a batch of responses under one model."""

    mode: np.ndarray  # (B, p)
    covariance: np.ndarray  # (B, p, p)
    log_evidence: np.ndarray  # (B,)
    iterations: np.ndarray
    converged: np.ndarray
    boundary_hit: np.ndarray
    jitter: np.ndarray
    damped_iterations: np.ndarray = None
    last_damped_step: np.ndarray = None
    _cov_chol: np.ndarray = field(default=None, repr=False)

    def __len__(self):
        return self.mode.shape[0]

    def __getitem__(self, b) -> NormalPosterior:
        return NormalPosterior(
            self.mode[b],
            self.covariance[b],
            float(self.log_evidence[b]),
            int(self.iterations[b]),
            bool(self.converged[b]),
            bool(self.boundary_hit[b]),
            float(self.jitter[b]),
        )

    @property
    def cov_chol(self):
        if self._cov_chol is None:
            self._cov_chol, _ = cholesky_jitter(self.covariance)
        return self._cov_chol

    @classmethod
    def stack(cls, posts) -> "BatchPosterior":
        posts = list(posts)
        return cls(
            np.stack([p.mode for p in posts]),
            np.stack([p.covariance for p in posts]),
            np.array([p.log_evidence for p in posts]),
            np.array([p.iterations for p in posts]),
            np.array([p.converged for p in posts]),
            np.array([p.boundary_hit for p in posts]),
            np.array([p.jitter for p in posts]),
        )


def information_matrix(model: ModelSpec, theta, x) -> np.ndarray:
    """``H(theta)``: Fisher information minus the Hessian of the log prior."""
    x = np.asarray(x, dtype=float)
    fisher = model.fisher_information(theta, x)
    if not np.all(np.isfinite(fisher)):
        raise FitError(f"non-finite Fisher information for {model.name}")
    prior_term = model.laplace_prior.neg_hess_log_density(theta)
    if not np.all(np.isfinite(prior_term)):
        raise FitError(f"non-finite prior Hessian for {model.name}")
    H = fisher + prior_term
    return 0.5 * (H + np.swapaxes(H, -1, -2))


def _log_post(model, theta, y, x):
    return model.log_likelihood(theta, y, x) + model.laplace_prior.log_density(theta)


def _step(model, theta, y, x, tries):
    prior = model.laplace_prior
    f = model.score(theta, y, x) + prior.grad_log_density(theta)
    H = model.fisher_information(theta, x) + prior.neg_hess_log_density(theta)
    # coordinates held on a bound by an outward gradient stay fixed
    held = ((theta <= prior.clip_lower) & (f < 0)) | ((theta >= prior.clip_upper) & (f > 0))
    if np.any(held):
        free = ~held
        H = H * (free[..., :, None] & free[..., None, :])
        H = H + np.eye(theta.shape[-1]) * held[..., None, :]
        f = np.where(held, 0.0, f)
    fac = factorize(H, model.block_structure, tries)
    step = fac.solve(f)
    bad = np.isnan(fac.jitter) | ~np.all(np.isfinite(step), axis=-1)
    return np.where(bad[:, None], 0.0, step), bad


def fit_batch(model: ModelSpec, y, x, cfg: ScoringConfig | None = None) -> BatchPosterior:
    """Fit the normal approximation to every row of ``y`` (shape ``(B, n)``)."""
    cfg = cfg or ScoringConfig()
    x = np.asarray(x, dtype=float)
    y = np.atleast_2d(np.asarray(y, dtype=float))
    B, p = y.shape[0], model.dim
    prior = model.laplace_prior
    if p == 0:
        ll = model.log_likelihood(np.zeros((B, 0)), y, x)
        return BatchPosterior(
            np.zeros((B, 0)), np.zeros((B, 0, 0)), ll, np.zeros(B, int), np.ones(B, bool),
            np.zeros(B, bool), np.zeros(B), np.zeros(B, int), np.zeros(B),
        )

    theta = np.broadcast_to(prior.mean, (B, p)).copy()
    iters = np.zeros(B, dtype=int)
    converged = np.zeros(B, dtype=bool)
    failed = np.zeros(B, dtype=bool)
    boundary = np.zeros(B, dtype=bool)
    last_step = np.full(B, np.nan)
    kappa = np.full(B, cfg.kappa)
    halvings = np.zeros(B, dtype=int)
    lp = _log_post(model, theta, y, x)
    active = np.arange(B)
    for _ in range(cfg.max_iter):
        if active.size == 0:
            break
        th = theta[active]
        step, bad = _step(model, th, y[active], x, cfg.jitter_tries)
        new, clipped = prior.project(th + kappa[active, None] * step)
        lp_new = _log_post(model, new, y[active], x)
        # step halving only when the log posterior would decrease
        up = lp_new >= lp[active] - 1e-10 * (1 + np.abs(lp[active]))
        down = ~up & ~bad & (halvings[active] < 20)
        kappa[active[down]] *= 0.5
        halvings[active[down]] += 1
        take = ~down
        delta2 = np.where(take, np.sum((new - th) ** 2, axis=-1), np.inf)
        # convergence is only judged on full-size steps
        delta2 = np.where(kappa[active] == cfg.kappa, delta2, np.inf)
        kappa[active[take]] = cfg.kappa
        halvings[active[take]] = 0
        theta[active[take]] = new[take]
        lp[active[take]] = lp_new[take]
        boundary[active[take]] |= clipped[take]
        iters[active] += 1
        last_step[active[take]] = delta2[take]
        failed[active[bad]] = True
        done = (delta2 < cfg.epsilon) & ~bad
        converged[active[done]] = True
        active = active[~(done | bad)]
    damped = iters.copy()

    # undamped refinement of converged fits
    polish = np.flatnonzero(converged)
    if cfg.polish_steps > 0 and polish.size:
        lp = lp[polish]
        for _ in range(cfg.polish_steps):
            if polish.size == 0:
                break
            th = theta[polish]
            step, bad = _step(model, th, y[polish], x, cfg.jitter_tries)
            new, clipped = prior.project(th + step)
            lp_new = _log_post(model, new, y[polish], x)
            ok = ~bad & np.isfinite(lp_new) & (lp_new >= lp - 1e-10 * (1 + np.abs(lp)))
            theta[polish[ok]] = new[ok]
            boundary[polish[ok]] |= clipped[ok]
            iters[polish[ok]] += 1
            lp = np.where(ok, lp_new, lp)
            delta2 = np.sum((new - th) ** 2, axis=-1)
            keep = ok & (delta2 >= cfg.polish_tol)
            polish, lp = polish[keep], lp[keep]

    H = information_matrix(model, theta, x) if np.all(np.isfinite(theta)) else None
    if H is None:
        raise FitError(f"non-finite iterate for {model.name}")
    fac = factorize(H, model.block_structure, cfg.jitter_tries)
    cov = fac.inverse()
    cov = 0.5 * (cov + np.swapaxes(cov, -1, -2))
    logdet_H = fac.logdet()
    ll = model.log_likelihood(theta, y, x)
    lprior = prior.log_density(theta)
    log_ev = 0.5 * p * LOG_2PI - 0.5 * logdet_H + ll + lprior
    jitter = np.asarray(fac.jitter, dtype=float)
    log_ev = np.where(np.isnan(jitter), np.nan, log_ev)
    converged &= ~failed
    return BatchPosterior(
        theta, cov, log_ev, iters, converged, boundary, jitter, damped, last_step
    )


def scoring_mode(model: ModelSpec, y, d, cfg: ScoringConfig | None = None) -> NormalPosterior:
    """Posterior mode, covariance and Laplace log-evidence for one response vector."""
    return fit_batch(model, np.asarray(y, dtype=float)[None, :], np.asarray(d), cfg)[0]


def laplace_log_evidence(model: ModelSpec, posterior: NormalPosterior, y, d) -> float:
    """``(p/2) log 2 pi + 0.5 log|Sigma| + log p(y | mode) + log pi(mode)``."""
    p = model.dim
    if p == 0:
        return float(model.log_likelihood(np.zeros(0), np.asarray(y, dtype=float), np.asarray(d)))
    sign, logdet = np.linalg.slogdet(posterior.covariance)
    if sign <= 0:
        raise FitError("posterior covariance is not positive definite")
    x = np.asarray(d)
    return float(
        0.5 * p * LOG_2PI
        + 0.5 * logdet
        + model.log_likelihood(posterior.mode, np.asarray(y, dtype=float), x)
        + model.laplace_prior.log_density(posterior.mode)
    )


@dataclass
class ModelPosteriorSet:
    """Normal approximations under every model plus approximate model probabilities.

    ``log_probs[b, m]`` is the log posterior probability of model ``m`` for
    response ``b``.
    """

    fits: list
    log_probs: np.ndarray

    @property
    def probs(self) -> np.ndarray:
        return np.exp(self.log_probs)

    def __len__(self):
        return self.log_probs.shape[0]

    @property
    def log_evidence(self) -> np.ndarray:
        return np.stack([f.log_evidence for f in self.fits], axis=-1)

    @property
    def converged(self) -> np.ndarray:
        return np.stack([f.converged for f in self.fits], axis=-1)


def model_log_probs(log_evidence, log_prior_probs):
    """Normalize ``log_evidence + log pi(m)`` over models (last axis)."""
    a = np.asarray(log_evidence, dtype=float) + log_prior_probs
    a = np.where(np.isnan(a), -np.inf, a)
    norm = logsumexp(a, axis=-1, keepdims=True)
    if np.any(~np.isfinite(norm)):
        raise FitError("every model failed to produce a finite evidence")
    return a - norm


def approx_model_posteriors(
    ms: ModelSet, y, d, cfg: ScoringConfig | None = None
) -> ModelPosteriorSet:
    """Fit every model in ``ms`` to ``y`` (one vector or a ``(B, n)`` batch)."""
    x = np.asarray(d)
    y = np.atleast_2d(np.asarray(y, dtype=float))
    fits = [fit_batch(m, y, x, cfg) for m in ms]
    log_ev = np.stack([f.log_evidence for f in fits], axis=-1)
    return ModelPosteriorSet(fits, model_log_probs(log_ev, ms.log_prior_probs))


def transform_posterior(posterior, transform: TransformSpec | None):
    """Delta-method normal approximation of ``g(theta)``: ``(g(mode), J Sigma J^T)``.

    Works for a single :class:`NormalPosterior` or a :class:`BatchPosterior`.
    """
    if transform is None:
        return np.array(posterior.mode), np.array(posterior.covariance)
    mode = np.asarray(posterior.mode)
    J = transform.jacobian(mode)
    cov = J @ np.asarray(posterior.covariance) @ np.swapaxes(J, -1, -2)
    return transform(mode), 0.5 * (cov + np.swapaxes(cov, -1, -2))


def sample_approx_posterior(
    mps: ModelPosteriorSet, transforms, C: int, rng: np.random.Generator
) -> np.ndarray:
    """Draws of ``phi`` from the model-averaged normal approximation.

    Returns an array of shape ``(B, C, q)``: for each response, ``C`` draws
    with the model chosen by its approximate posterior probability, ``theta``
    from that model's normal approximation and ``phi = g_m(theta)``.
    """
    if C < 1:
        raise ValueError("C must be at least 1")
    probs = mps.probs
    B, M = probs.shape
    if M == 1:
        choice = np.zeros((B, C), dtype=int)
    else:
        cdf = np.cumsum(probs, axis=-1)
        cdf[:, -1] = 1.0
        u = rng.random((B, C))
        choice = np.minimum((u[:, :, None] > cdf[:, None, :]).sum(axis=-1), M - 1)
    q = next(t.q for t in transforms if t is not None)
    out = np.empty((B, C, q))
    for m, (fit, g) in enumerate(zip(mps.fits, transforms)):
        mask = choice == m
        if not mask.any():
            continue
        rows, cols = np.nonzero(mask)
        z = rng.standard_normal((rows.size, fit.mode.shape[-1]))
        L = fit.cov_chol
        for lo in range(0, rows.size, 65536):
            r, c = rows[lo : lo + 65536], cols[lo : lo + 65536]
            theta = fit.mode[r] + np.einsum("cij,cj->ci", L[r], z[lo : lo + 65536])
            out[r, c] = g(theta) if g is not None else theta
    return out
