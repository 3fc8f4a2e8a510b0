"""Monte Carlo estimators of the expected loss of a design.

* :func:`nbmc` averages the normal-based approximate loss over joint draws of
  ``(m, theta, y)``.
* :func:`dlmc` is the nested (double-loop) benchmark: inner prior samples
  estimate the evidence or posterior mean. It is biased by ``O(1 / B_tilde)``.
* :func:`pseudo_D` and :func:`pseudo_A` are the prior-averaged Fisher
  information criteria.

Draws are generated in fixed-size chunks whose random streams are derived
from ``(seed, purpose, chunk index)``. Results are therefore identical for
any number of worker processes.
"""
from __future__ import annotations

import math
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import logsumexp

from .core import (
    LOG_2PI,
    PURPOSE_INNER,
    PURPOSE_LOSS,
    PURPOSE_PERTURB,
    PURPOSE_SAMPLE,
    Design,
    LinearTransform,
    ModelSet,
    as_model_set,
    make_rng,
    sample_joint_arrays,
    seed_sequence,
)
from .laplace import ScoringConfig, approx_model_posteriors
from .losses import LossSpec, evaluate_losses, true_phi

ESTIMATORS = ("nbmc", "dlmc", "pseudo_D", "pseudo_A")
NON_POSITIVE_LOSSES = ("SI", "MSI")


class UnsupportedEstimatorError(ValueError):
    """The requested estimator cannot approximate the requested loss."""


@dataclass(frozen=True)
class EstimatorConfig:
    """Monte Carlo sizes and execution settings.

    Parameters
    ----------
    B : int
        Outer sample size.
    B_tilde : int, optional
        Inner sample size for DLMC; defaults to ``B``.
    workers : int
        Worker processes; results do not depend on it.
    chunk : int
        Draws per independently seeded chunk.
    exclude_diverged : bool
        Drop draws with a non-converged mode search from the average. By
        default they are kept (their last iterate is used) and only counted.
    """

    B: int = 1000
    B_tilde: int | None = None
    workers: int = 1
    chunk: int = 1000
    scoring: ScoringConfig = field(default_factory=ScoringConfig)
    exclude_diverged: bool = False

    def __post_init__(self):
        if self.B < 1:
            raise ValueError("B must be at least 1")
        if self.B_tilde is not None and self.B_tilde < 1:
            raise ValueError("B_tilde must be at least 1")
        if self.workers < 1 or self.chunk < 1:
            raise ValueError("workers and chunk must be at least 1")

    @property
    def inner(self) -> int:
        return self.B if self.B_tilde is None else self.B_tilde


@dataclass
class LossEstimate:
    value: float
    se: float
    B: int
    estimator: str
    diverged_fraction: float = 0.0
    seconds: float = 0.0
    warning: str | None = None
    extras: dict = field(default_factory=dict)

    def to_record(self) -> dict:
        rec = {k: v for k, v in asdict(self).items() if k not in ("warning", "extras")}
        if self.warning:
            rec["warning"] = self.warning
        rec.update(self.extras)
        return rec


@dataclass
class LossSamples:
    """Per-draw loss values of one evaluation."""

    values: np.ndarray
    diverged: np.ndarray
    capped: int = 0
    extras: dict = field(default_factory=dict)

    @property
    def usable(self) -> np.ndarray:
        return self.values[np.isfinite(self.values)]


def _seed_of(seed):
    if isinstance(seed, np.random.Generator):
        return int(seed.integers(2**63))
    return seed


def _design_array(d):
    if isinstance(d, Design):
        d.check()
        return d.values
    return np.asarray(d, dtype=float)


def _chunks(B, size):
    return [(i, min(size, B - i * size)) for i in range(math.ceil(B / size))]


def _run(fn, tasks, workers):
    if workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(tasks))) as pool:
            return list(pool.map(fn, tasks))
    return [fn(t) for t in tasks]


# ---------------------------------------------------------------------------
# NBMC
# ---------------------------------------------------------------------------


def _nbmc_chunk(task):
    ms, x, loss, seed, index, size, scoring = task
    js = sample_joint_arrays(ms, x, size, make_rng(seed, PURPOSE_SAMPLE, index))
    mps = approx_model_posteriors(ms, js.y, x, scoring)
    values, capped = evaluate_losses(loss, ms, js, mps, make_rng(seed, PURPOSE_LOSS, index))
    diverged = ~np.all(mps.converged, axis=-1) | ~np.isfinite(values)
    return values, diverged, capped


def nbmc_samples(d, ms, loss: LossSpec, B: int, seed=0, cfg: EstimatorConfig | None = None):
    """Approximate losses of ``B`` joint draws at design ``d``."""
    cfg = cfg or EstimatorConfig(B=B)
    ms = as_model_set(ms)
    x = _design_array(d)
    seed = _seed_of(seed)
    tasks = [(ms, x, loss, seed, i, s, cfg.scoring) for i, s in _chunks(B, cfg.chunk)]
    parts = _run(_nbmc_chunk, tasks, cfg.workers)
    values = np.concatenate([p[0] for p in parts])
    diverged = np.concatenate([p[1] for p in parts])
    if cfg.exclude_diverged:
        values = np.where(diverged, np.nan, values)
    return LossSamples(values, diverged, sum(p[2] for p in parts))


def _summarize(samples: LossSamples, B, estimator, start, max_diverged=0.5) -> LossEstimate:
    v = samples.usable
    frac = float(np.mean(samples.diverged)) if len(samples.diverged) else 0.0
    warning = None
    if frac > max_diverged:
        warning = f"{frac:.1%} of draws diverged"
        warnings.warn(warning, RuntimeWarning, stacklevel=3)
    if v.size == 0:
        value, se = float("nan"), float("nan")
    else:
        value = float(np.mean(v))
        se = float(np.std(v, ddof=1) / np.sqrt(v.size)) if v.size > 1 else 0.0
    extras = dict(samples.extras)
    if samples.capped:
        extras["capped"] = samples.capped
    return LossEstimate(
        value, se, B, estimator, frac, time.perf_counter() - start, warning, extras
    )


def nbmc(d, ms, loss: LossSpec, cfg: EstimatorConfig | None = None, seed=0) -> LossEstimate:
    """Normal-based Monte Carlo estimate of the expected loss.

    The standard error is the sample standard deviation over ``sqrt(B)``.
    More than half of the draws diverging sets ``warning``.
    """
    cfg = cfg or EstimatorConfig()
    start = time.perf_counter()
    samples = nbmc_samples(d, ms, loss, cfg.B, seed, cfg)
    return _summarize(samples, cfg.B, "nbmc", start)


# ---------------------------------------------------------------------------
# DLMC
# ---------------------------------------------------------------------------


def _is_identity(t, p) -> bool:
    return (
        isinstance(t, LinearTransform)
        and t.A.shape == (p, p)
        and np.array_equal(t.A, np.eye(p))
    )


def check_dlmc_supported(ms, loss: LossSpec) -> None:
    """Raise :class:`UnsupportedEstimatorError` unless DLMC handles ``loss``.

    Supported: SI with identity transforms, SE for one model or with linear
    transforms, and the model-discrimination losses. AE is not supported:
    its posterior median would require posterior samples.
    """
    ms = as_model_set(ms)
    if loss.kind == "AE":
        raise UnsupportedEstimatorError("DLMC does not support the AE loss")
    if loss.kind in ("ZeroOne", "MSI"):
        return
    ts = loss.resolve_transforms(ms)
    if loss.kind == "SI":
        if not all(_is_identity(t, m.dim) for t, m in zip(ts, ms)):
            raise UnsupportedEstimatorError(
                "DLMC supports the SI loss only for identity transforms"
            )
        if len({m.dim for m in ms}) != 1:
            raise UnsupportedEstimatorError("DLMC SI needs models of equal dimension")
    if loss.kind == "SE" and len(ms) > 1 and not all(t.linear for t in ts):
        raise UnsupportedEstimatorError(
            "DLMC supports the model-averaged SE loss only for linear transforms"
        )


def _inner_sample(ms, seed, B_tilde):
    return [m.prior.sample(make_rng(seed, PURPOSE_INNER, j), B_tilde) for j, m in enumerate(ms)]


def _dlmc_chunk(task):
    ms, x, loss, seed, index, size, B_tilde = task
    js = sample_joint_arrays(ms, x, size, make_rng(seed, PURPOSE_SAMPLE, index))
    # the inner prior sample is shared by all outer draws
    inner = _inner_sample(ms, seed, B_tilde)
    M = len(ms)
    rows = max(1, int(4e6 // max(B_tilde, 1)))
    log_ev = np.empty((size, M))
    se_means = None
    ts = loss.resolve_transforms(ms) if loss.kind == "SE" else None
    if ts is not None:
        q = ts[0].q
        se_means = np.empty((size, M, q))
        g_inner = [t(th) for t, th in zip(ts, inner)]
    for lo in range(0, size, rows):
        yb = js.y[lo : lo + rows]
        for j, model in enumerate(ms):
            ll = model.log_likelihood_matrix(yb, inner[j], x)
            log_ev[lo : lo + rows, j] = logsumexp(ll, axis=-1) - np.log(B_tilde)
            if se_means is not None:
                w = np.exp(ll - logsumexp(ll, axis=-1, keepdims=True))
                se_means[lo : lo + rows, j] = w @ g_inner[j]
    a = log_ev + ms.log_prior_probs
    log_py = logsumexp(a, axis=-1)
    log_post_m = a - log_py[:, None]
    idx = js.model_index
    capped = 0
    if loss.kind == "ZeroOne":
        values = (np.argmax(log_post_m, axis=-1) != idx).astype(float)
    elif loss.kind == "MSI":
        lp = log_post_m[np.arange(size), idx]
        cap = ~np.isfinite(lp)
        capped = int(cap.sum())
        values = np.where(cap, ms.log_prior_probs[idx] + loss.msi_cap,
                          ms.log_prior_probs[idx] - np.where(cap, 0.0, lp))
    elif loss.kind == "SE":
        w = np.exp(log_post_m)
        mean = np.einsum("bm,bmq->bq", w, se_means)
        r = true_phi(js, ts) - mean
        values = np.sum(r * r, axis=-1)
    else:  # SI with identity transforms: phi = theta
        phi = true_phi(js, [LinearTransform(np.eye(m.dim)) for m in ms])
        lprior = np.stack([m.prior.log_density(phi) for m in ms], axis=-1) + ms.log_prior_probs
        ll_true = np.stack([m.log_likelihood(phi, js.y, x) for m in ms], axis=-1)
        values = logsumexp(lprior, axis=-1) - logsumexp(lprior + ll_true, axis=-1) + log_py
    diverged = ~np.isfinite(values)
    return values, diverged, capped


def dlmc_samples(d, ms, loss: LossSpec, B: int, seed=0, cfg: EstimatorConfig | None = None):
    cfg = cfg or EstimatorConfig(B=B)
    ms = as_model_set(ms)
    check_dlmc_supported(ms, loss)
    x = _design_array(d)
    seed = _seed_of(seed)
    tasks = [(ms, x, loss, seed, i, s, cfg.inner) for i, s in _chunks(B, cfg.chunk)]
    parts = _run(_dlmc_chunk, tasks, cfg.workers)
    return LossSamples(
        np.concatenate([p[0] for p in parts]),
        np.concatenate([p[1] for p in parts]),
        sum(p[2] for p in parts),
    )


def dlmc(d, ms, loss: LossSpec, cfg: EstimatorConfig | None = None, seed=0) -> LossEstimate:
    """Double-loop Monte Carlo estimate of the expected loss.

    One inner prior sample of size ``B_tilde`` per model is drawn and reused
    for every outer draw. The estimate carries a bias of order
    ``1 / B_tilde``.
    """
    cfg = cfg or EstimatorConfig()
    start = time.perf_counter()
    samples = dlmc_samples(d, ms, loss, cfg.B, seed, cfg)
    est = _summarize(samples, cfg.B, "dlmc", start)
    est.extras["B_tilde"] = cfg.inner
    return est


# ---------------------------------------------------------------------------
# Pseudo-Bayesian criteria
# ---------------------------------------------------------------------------


def _pseudo_chunk(task):
    model, x, kind, seed, index, size = task
    theta = model.prior.sample(make_rng(seed, PURPOSE_SAMPLE, index), size)
    info = model.fisher_information(theta, x)
    eig = np.linalg.eigvalsh(info)
    singular = ~np.all(np.isfinite(eig), axis=-1) | (
        eig[..., 0] <= 1e-12 * np.maximum(np.abs(eig[..., -1]), 1e-300)
    )
    values = np.full(size, np.nan)
    ok = ~singular
    if kind == "pseudo_D":
        values[ok] = -0.5 * np.sum(np.log(eig[ok]), axis=-1)
    else:
        values[ok] = np.sum(1.0 / eig[ok], axis=-1)
    return values, singular, model.prior.log_density(theta)


def pseudo_samples(d, model, kind: str, n_mc: int, seed=0, cfg: EstimatorConfig | None = None):
    """Per-draw ``-0.5 log|I(theta; d)|`` or ``tr I(theta; d)^-1`` with ``theta`` from the prior."""
    if kind not in ("pseudo_D", "pseudo_A"):
        raise ValueError(f"unknown pseudo-Bayesian criterion {kind!r}")
    ms = as_model_set(model)
    if len(ms) != 1:
        raise UnsupportedEstimatorError("pseudo-Bayesian criteria need a single model")
    model = ms[0]
    cfg = cfg or EstimatorConfig(B=n_mc)
    x = _design_array(d)
    seed = _seed_of(seed)
    tasks = [(model, x, kind, seed, i, s) for i, s in _chunks(n_mc, cfg.chunk)]
    parts = _run(_pseudo_chunk, tasks, cfg.workers)
    values = np.concatenate([p[0] for p in parts])
    singular = np.concatenate([p[1] for p in parts])
    lprior = np.concatenate([p[2] for p in parts])
    p = model.dim
    extras = {
        "skipped": int(singular.sum()),
        # theta-free terms: E[lambda_SI] ~ constant + pseudo_D for diffuse priors
        "constant": float(0.5 * p * LOG_2PI + 0.5 * p + np.mean(lprior)),
    }
    return LossSamples(values, singular, 0, extras)


def _pseudo(kind, d, model, n_mc, seed, cfg) -> LossEstimate:
    start = time.perf_counter()
    samples = pseudo_samples(d, model, kind, n_mc, seed, cfg)
    if samples.diverged.mean() > 0.1:
        raise np.linalg.LinAlgError(
            f"Fisher information singular at {samples.diverged.mean():.1%} of prior draws"
        )
    return _summarize(samples, n_mc, kind, start, max_diverged=1.0)


def pseudo_D(d, model, n_mc: int = 1000, seed=0, cfg=None) -> LossEstimate:
    """Pseudo-Bayesian D criterion ``E_theta[-0.5 log |I(theta; d)|]``.

    ``extras["constant"]`` holds ``p/2 log(2 pi) + p/2 + E[log pi(theta)]``;
    adding it gives the diffuse-prior approximation of the expected SI loss.
    Draws with a singular information matrix are skipped; more than 10%
    skipped is an error.
    """
    return _pseudo("pseudo_D", d, model, n_mc, seed, cfg)


def pseudo_A(d, model, n_mc: int = 1000, seed=0, cfg=None) -> LossEstimate:
    """Pseudo-Bayesian A criterion ``E_theta[tr I(theta; d)^-1]``."""
    return _pseudo("pseudo_A", d, model, n_mc, seed, cfg)


# ---------------------------------------------------------------------------
# Dispatch
# ---------------------------------------------------------------------------


def loss_samples(estimator: str, d, ms, loss: LossSpec | None, B: int, seed, cfg=None):
    """Per-draw loss values from any estimator."""
    if estimator == "nbmc":
        return nbmc_samples(d, ms, loss, B, seed, cfg)
    if estimator == "dlmc":
        return dlmc_samples(d, ms, loss, B, seed, cfg)
    if estimator in ("pseudo_D", "pseudo_A"):
        return pseudo_samples(d, ms, estimator, B, seed, cfg)
    raise ValueError(f"unknown estimator {estimator!r}; expected one of {ESTIMATORS}")


def estimate(estimator: str, d, ms, loss: LossSpec | None, cfg=None, seed=0) -> LossEstimate:
    cfg = cfg or EstimatorConfig()
    if estimator == "nbmc":
        return nbmc(d, ms, loss, cfg, seed)
    if estimator == "dlmc":
        return dlmc(d, ms, loss, cfg, seed)
    if estimator == "pseudo_D":
        return pseudo_D(d, ms, cfg.B, seed, cfg)
    if estimator == "pseudo_A":
        return pseudo_A(d, ms, cfg.B, seed, cfg)
    raise ValueError(f"unknown estimator {estimator!r}; expected one of {ESTIMATORS}")


# ---------------------------------------------------------------------------
# Relative efficiency and perturbed designs
# ---------------------------------------------------------------------------


def efficiency_ratio(loss_d: float, loss_star: float, kind: str) -> float:
    """Relative efficiency of ``d`` against ``d*`` in percent.

    Non-positive losses (SI, MSI) give ``L(d) / L(d*)``; nonnegative losses
    give ``L(d*) / L(d)``. Either way a better ``d*`` yields values below 100.
    """
    if kind in NON_POSITIVE_LOSSES:
        if not loss_star < 0:
            raise ValueError(
                f"expected a negative loss at the reference design for {kind}, got {loss_star}"
            )
        return 100.0 * loss_d / loss_star
    if loss_d <= 0:
        return 100.0 if loss_star <= 0 else float("inf")
    return 100.0 * loss_star / loss_d


@dataclass
class RelativeEfficiency:
    efficiency: float
    design: LossEstimate
    reference: LossEstimate
    estimator: str

    def to_record(self) -> dict:
        return {
            "relative_efficiency": self.efficiency,
            "design": self.design.to_record(),
            "reference": self.reference.to_record(),
            "estimator": self.estimator,
        }


def relative_efficiency(d, d_star, ms, loss: LossSpec, cfg=None, seed=0, estimator=None):
    """Relative efficiency of ``d`` against ``d_star`` in percent.

    Both expected losses use DLMC when it supports ``loss`` and NBMC
    otherwise (unless ``estimator`` is given). The two designs get
    independent random streams.
    """
    cfg = cfg or EstimatorConfig()
    if estimator is None:
        try:
            check_dlmc_supported(ms, loss)
            estimator = "dlmc"
        except UnsupportedEstimatorError:
            estimator = "nbmc"
    seed = _seed_of(seed)
    ss = seed_sequence(seed)
    est_d = estimate(estimator, d, ms, loss, cfg, seed_sequence(ss, 0))
    est_s = estimate(estimator, d_star, ms, loss, cfg, seed_sequence(ss, 1))
    kind = loss.kind if loss is not None else estimator
    return RelativeEfficiency(efficiency_ratio(est_d.value, est_s.value, kind), est_d, est_s, estimator)


def perturb_design(
    d_star: Design, rng: np.random.Generator, u: float | None = None, return_u: bool = False
):
    """``(1 - u) d* + u d_rand`` with ``u ~ U(0, 1/2)`` and ``d_rand`` uniform on the bounds.

    With ``return_u=True`` the pair ``(u, design)`` is returned.
    """
    d_star.check()
    d_rand = Design.uniform(d_star.n, d_star.bounds, rng)
    if u is None:
        u = float(rng.uniform(0.0, 0.5))
    values = (1.0 - u) * d_star.values + u * d_rand.values
    # guard against rounding just past a bound
    b = np.asarray(d_star.bounds)
    d = d_star.with_values(np.clip(values, b[:, 0], b[:, 1]))
    return (float(u), d) if return_u else d


def perturbation_designs(d_star: Design, T: int, seed=0, u: float | None = None):
    """``T`` pairs ``(u, design)``, each from its own random stream."""
    return [perturb_design(d_star, make_rng(seed, PURPOSE_PERTURB, t), u, True) for t in range(T)]
