"""Normal-based approximations of the loss of a single joint draw.

Given the true ``(m, theta, y)`` of an outer draw and the normal
approximations of the posterior under every model, each function returns the
approximate loss. All functions are batched: ``model_index`` has shape
``(B,)``, ``phi_true`` shape ``(B, q)`` and ``mps`` holds fits for the same
``B`` responses. Thin single-draw wrappers (``nb_*_loss``) are provided too.

Parameter-estimation losses (SI, AE, SE) concern ``phi = g_m(theta_m)``;
model-discrimination losses (0-1, MSI) concern the model index.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .core import LOG_2PI, JointDraw, JointSample, ModelSet
from .laplace import ModelPosteriorSet, sample_approx_posterior, transform_posterior
from .linalg import cholesky_jitter

LOSS_KINDS = ("SI", "AE", "SE", "ZeroOne", "MSI")
PARAMETER_LOSSES = ("SI", "AE", "SE")

# log of (roughly) the smallest positive double; caps the MSI loss
MSI_CAP = 745.0


@dataclass(frozen=True)
class LossSpec:
    """Which loss to evaluate.

    Parameters
    ----------
    kind : {"SI", "AE", "SE", "ZeroOne", "MSI"}
    C : int
        Size of the simulated posterior sample used by AE (several models)
        and by SE when some transform is nonlinear.
    transforms : sequence of TransformSpec, optional
        One per model; defaults to each model's own ``transform``.
    msi_cap : float
        When the approximate posterior probability of the true model
        underflows, the MSI loss is ``log pi(m) + msi_cap``.
    """

    kind: str
    C: int = 1000
    transforms: tuple | None = None
    msi_cap: float = MSI_CAP

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ValueError(f"unknown loss kind {self.kind!r}; expected one of {LOSS_KINDS}")
        if self.C < 1:
            raise ValueError("C must be at least 1")

    @property
    def is_binary(self) -> bool:
        return self.kind == "ZeroOne"

    def resolve_transforms(self, ms: ModelSet) -> list:
        ts = list(self.transforms) if self.transforms is not None else ms.transforms
        if len(ts) != len(ms):
            raise ValueError("one transform per model is required")
        if self.kind in PARAMETER_LOSSES:
            if any(t is None for t in ts):
                raise ValueError(f"{self.kind} loss needs a transform for every model")
            if len({t.q for t in ts}) != 1:
                raise ValueError("transforms must share the output dimension q")
        return ts


@dataclass
class MixtureOfNormals:
    """Batched mixture ``sum_m w_m N(mean_m, cov_m)``.

    ``log_weights`` has shape ``(B, M)``, ``means`` ``(B, M, q)`` and
    ``covs`` ``(B, M, q, q)``. Components with zero weight are ignored.
    """

    log_weights: np.ndarray
    means: np.ndarray
    covs: np.ndarray

    def __post_init__(self):
        w = np.exp(self.log_weights)
        if np.any(w < 0) or np.any(np.abs(w.sum(axis=-1) - 1.0) > 1e-8):
            raise ValueError("mixture weights must be nonnegative and sum to 1")

    def log_pdf(self, phi) -> np.ndarray:
        phi = np.asarray(phi, dtype=float)
        L, jit = cholesky_jitter(self.covs)
        r = phi[:, None, :] - self.means
        z = np.linalg.solve(L, r[..., None])[..., 0]
        q = r.shape[-1]
        comp = -0.5 * (q * LOG_2PI + np.sum(z * z, axis=-1)) - np.sum(
            np.log(np.diagonal(L, axis1=-2, axis2=-1)), axis=-1
        )
        comp = np.where(np.isnan(jit), -np.inf, comp)
        terms = np.where(np.isneginf(self.log_weights), -np.inf, self.log_weights + comp)
        return logsumexp(terms, axis=-1)


def true_phi(sample: JointSample, transforms) -> np.ndarray:
    """``g_m(theta)`` of every draw, in draw order."""
    q = next(t.q for t in transforms if t is not None)
    out = np.empty((len(sample), q))
    for m, (theta, pos) in enumerate(zip(sample.thetas, sample.members)):
        if len(pos):
            out[pos] = transforms[m](theta)
    return out


def posterior_mixture(mps: ModelPosteriorSet, transforms) -> MixtureOfNormals:
    """Delta-method normal mixture approximating the posterior of ``phi``."""
    means, covs = zip(*(transform_posterior(f, g) for f, g in zip(mps.fits, transforms)))
    return MixtureOfNormals(mps.log_probs, np.stack(means, axis=1), np.stack(covs, axis=1))


def prior_mixture(ms: ModelSet, transforms, B: int = 1) -> MixtureOfNormals:
    """Moment-matched normal mixture approximating the prior of ``phi``.

    Each model's prior is replaced by the normal with the same mean and
    variance and then pushed through ``g_m`` by the delta method. The
    mixture weights are the prior model probabilities.
    """
    means, covs = [], []
    for model, g in zip(ms, transforms):
        mu = np.asarray(model.prior.mean, dtype=float)
        psi = np.asarray(model.prior.variance, dtype=float)
        J = g.jacobian(mu)
        means.append(g(mu))
        cov = J @ psi @ J.T
        covs.append(0.5 * (cov + cov.T))
    logw = np.broadcast_to(ms.log_prior_probs, (B, len(ms)))
    return MixtureOfNormals(
        np.array(logw),
        np.broadcast_to(np.stack(means), (B,) + np.shape(means)).copy(),
        np.broadcast_to(np.stack(covs), (B,) + np.shape(covs)).copy(),
    )


# ---------------------------------------------------------------------------
# Batched losses
# ---------------------------------------------------------------------------


def si_losses(phi_true, mps: ModelPosteriorSet, ms: ModelSet, transforms) -> np.ndarray:
    """``log pi~(phi) - log pi~(phi | y)`` for every draw."""
    B = len(mps)
    post = posterior_mixture(mps, transforms).log_pdf(phi_true)
    prior = prior_mixture(ms, transforms, B).log_pdf(phi_true)
    return prior - post


def ae_losses(phi_true, mps: ModelPosteriorSet, transforms, C: int, rng) -> np.ndarray:
    """Sum of absolute deviations from the (approximate) posterior median."""
    if len(mps.fits) == 1:
        med = transform_posterior(mps.fits[0], transforms[0])[0]
    else:
        med = np.median(sample_approx_posterior(mps, transforms, C, rng), axis=1)
    return np.sum(np.abs(np.asarray(phi_true) - med), axis=-1)


def posterior_mean(mps: ModelPosteriorSet, transforms, C: int, rng) -> np.ndarray:
    """Model-averaged posterior mean of ``phi``.

    Closed form (probability-weighted delta-method means) when every
    transform is linear, otherwise the mean of ``C`` simulated draws.
    """
    if all(g.linear for g in transforms):
        means = np.stack(
            [transform_posterior(f, g)[0] for f, g in zip(mps.fits, transforms)], axis=1
        )
        w = mps.probs
        return np.einsum("bm,bmq->bq", np.where(w > 0, w, 0.0), np.nan_to_num(means))
    return np.mean(sample_approx_posterior(mps, transforms, C, rng), axis=1)


def se_losses(phi_true, mps: ModelPosteriorSet, transforms, C: int, rng) -> np.ndarray:
    r = np.asarray(phi_true) - posterior_mean(mps, transforms, C, rng)
    return np.sum(r * r, axis=-1)


def zero_one_losses(model_index, mps: ModelPosteriorSet) -> np.ndarray:
    """1 unless the true model is the approximate posterior modal model.

    Ties go to the lowest model index.
    """
    modal = np.argmax(mps.log_probs, axis=-1)
    return (modal != np.asarray(model_index)).astype(float)


def msi_losses(model_index, mps: ModelPosteriorSet, ms: ModelSet, cap: float = MSI_CAP):
    """``log pi(m) - log pi~(m | y)``; also returns which draws hit the cap."""
    idx = np.asarray(model_index)
    log_prior = ms.log_prior_probs[idx]
    log_post = mps.log_probs[np.arange(len(idx)), idx]
    capped = ~np.isfinite(log_post)
    values = np.where(capped, log_prior + cap, log_prior - np.where(capped, 0.0, log_post))
    return values, capped


def evaluate_losses(loss: LossSpec, ms: ModelSet, sample: JointSample, mps, rng):
    """Approximate loss of every draw in ``sample``.

    Returns the loss values and the number of draws whose MSI loss was
    capped (always 0 for other kinds).
    """
    if loss.kind == "ZeroOne":
        return zero_one_losses(sample.model_index, mps), 0
    if loss.kind == "MSI":
        values, capped = msi_losses(sample.model_index, mps, ms, loss.msi_cap)
        return values, int(capped.sum())
    ts = loss.resolve_transforms(ms)
    phi = true_phi(sample, ts)
    if loss.kind == "SI":
        return si_losses(phi, mps, ms, ts), 0
    if loss.kind == "AE":
        return ae_losses(phi, mps, ts, loss.C, rng), 0
    return se_losses(phi, mps, ts, loss.C, rng), 0


# ---------------------------------------------------------------------------
# Single-draw wrappers
# ---------------------------------------------------------------------------


def _phi_of(draw: JointDraw, transforms):
    return transforms[draw.model_index](draw.theta)[None, :]


def nb_si_loss(draw: JointDraw, mps, ms: ModelSet, transforms=None) -> float:
    ts = transforms if transforms is not None else ms.transforms
    return float(si_losses(_phi_of(draw, ts), mps, ms, ts)[0])


def nb_ae_loss(draw: JointDraw, mps, transforms, C: int = 1000, rng=None) -> float:
    rng = rng if rng is not None else np.random.default_rng(0)
    return float(ae_losses(_phi_of(draw, transforms), mps, transforms, C, rng)[0])


def nb_se_loss(draw: JointDraw, mps, transforms, C: int = 1000, rng=None) -> float:
    rng = rng if rng is not None else np.random.default_rng(0)
    return float(se_losses(_phi_of(draw, transforms), mps, transforms, C, rng)[0])


def nb_zero_one_loss(draw: JointDraw, mps) -> float:
    return float(zero_one_losses([draw.model_index], mps)[0])


def nb_msi_loss(draw: JointDraw, mps, ms: ModelSet, cap: float = MSI_CAP) -> float:
    return float(msi_losses([draw.model_index], mps, ms, cap)[0][0])
