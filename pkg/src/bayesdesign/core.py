"""Designs, priors, transforms, models and the joint sampler of (m, theta, y).

Array conventions used throughout the package:

* a design is an ``(n, k)`` array of factor settings (:class:`Design` wraps one
  together with the per-factor bounds);
* parameter vectors carry leading batch dimensions, ``theta[..., p]``;
* responses carry the same batch dimensions, ``y[..., n]``.

Every model method broadcasts over the leading batch dimensions so a whole
Monte Carlo sample can be fitted at once.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np
from scipy.special import logsumexp

LOG_2PI = np.log(2.0 * np.pi)


class DesignError(ValueError):
    """A design violates its factor bounds or has the wrong shape."""


# ---------------------------------------------------------------------------
# Random streams
# ---------------------------------------------------------------------------

# purpose codes used as the last element of a spawn key
PURPOSE_SAMPLE = 0
PURPOSE_INNER = 1
PURPOSE_LOSS = 2
PURPOSE_INIT = 3
PURPOSE_EMULATOR = 4
PURPOSE_COMPARE_CURRENT = 5
PURPOSE_COMPARE_PROPOSED = 6
PURPOSE_ACCEPT = 7
PURPOSE_FINAL = 8
PURPOSE_PERTURB = 9


def seed_sequence(seed, *key: int) -> np.random.SeedSequence:
    """Derive an independent seed sequence for the tuple ``key``.

    The derivation is counter based: the same ``(seed, key)`` always yields the
    same stream, and distinct keys yield statistically independent streams,
    regardless of the order in which they are requested.
    """
    if isinstance(seed, np.random.SeedSequence):
        return np.random.SeedSequence(
            seed.entropy, spawn_key=tuple(seed.spawn_key) + tuple(int(k) for k in key)
        )
    return np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))


def make_rng(seed, *key: int) -> np.random.Generator:
    return np.random.default_rng(seed_sequence(seed, *key))


# ---------------------------------------------------------------------------
# Designs
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Design:
    """An ``n x k`` matrix of factor settings with closed per-factor bounds."""

    values: np.ndarray
    bounds: np.ndarray  # (k, 2) rows of (lo, hi)

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        if values.ndim == 1:
            values = values[:, None]
        bounds = np.array(self.bounds, dtype=float)
        if bounds.ndim == 1:
            bounds = np.broadcast_to(bounds, (values.shape[1], 2)).copy()
        if values.ndim != 2 or bounds.shape != (values.shape[1], 2):
            raise DesignError(
                f"values of shape {values.shape} do not match bounds of shape {bounds.shape}"
            )
        if np.any(bounds[:, 0] > bounds[:, 1]):
            raise DesignError("every factor needs lo <= hi")
        values.setflags(write=False)
        bounds.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "bounds", bounds)

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def k(self) -> int:
        return self.values.shape[1]

    @property
    def W(self) -> int:
        return self.values.size

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.values, dtype=dtype)

    def flat(self) -> np.ndarray:
        """Design as the length-W vector (run by run)."""
        return self.values.reshape(-1).copy()

    def coordinate_bounds(self, i: int) -> tuple[float, float]:
        lo, hi = self.bounds[i % self.k]
        return float(lo), float(hi)

    def with_coordinate(self, i: int, value: float) -> "Design":
        new = self.values.copy()
        new[i // self.k, i % self.k] = value
        return Design(new, self.bounds)

    def with_values(self, values) -> "Design":
        return Design(values, self.bounds)

    def check(self) -> "Design":
        """Raise :class:`DesignError` naming the first offending coordinate."""
        violations = validate_design(self)
        if violations:
            i, j, v = violations[0]
            lo, hi = self.bounds[j]
            raise DesignError(
                f"design value {v!r} at run {i}, factor {j} lies outside [{lo}, {hi}]"
                + (f" ({len(violations) - 1} further violations)" if len(violations) > 1 else "")
            )
        return self

    @classmethod
    def uniform(cls, n: int, bounds, rng: np.random.Generator) -> "Design":
        bounds = np.asarray(bounds, dtype=float)
        lo, hi = bounds[:, 0], bounds[:, 1]
        return cls(lo + (hi - lo) * rng.random((n, bounds.shape[0])), bounds)

    # -- CSV ---------------------------------------------------------------

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow([f"x{j + 1}" for j in range(self.k)])
        for row in self.values:
            writer.writerow([repr(float(v)) for v in row])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", encoding="utf-8", newline="") as fh:
                fh.write(text)
        return text

    @classmethod
    def from_csv(cls, path_or_text, bounds, n: int | None = None) -> "Design":
        """Read a design written by :meth:`to_csv`.

        ``path_or_text`` is a filesystem path, or CSV text when it contains a
        newline. Raises :class:`DesignError` naming the offending row.
        """
        if "\n" in str(path_or_text):
            text = str(path_or_text)
        else:
            with open(path_or_text, encoding="utf-8") as fh:
                text = fh.read()
        bounds = np.asarray(bounds, dtype=float)
        rows = list(csv.reader(io.StringIO(text)))
        if not rows:
            raise DesignError("empty design file")
        header, body = rows[0], [r for r in rows[1:] if r]
        k = bounds.shape[0]
        if header != [f"x{j + 1}" for j in range(k)]:
            raise DesignError(f"header {header} does not match {k} factors x1..x{k}")
        values = []
        for lineno, row in enumerate(body, start=2):
            if len(row) != k:
                raise DesignError(f"row {lineno}: expected {k} fields, got {len(row)}")
            try:
                values.append([float(v) for v in row])
            except ValueError as exc:
                raise DesignError(f"row {lineno}: {exc}") from None
        if n is not None and len(values) != n:
            raise DesignError(f"design file has {len(values)} runs, expected {n}")
        return cls(np.array(values).reshape(len(values), k), bounds).check()


def validate_design(d: Design) -> list[tuple[int, int, float]]:
    """Every ``(run, factor, value)`` lying outside its closed interval."""
    vals = np.asarray(d.values)
    lo, hi = d.bounds[:, 0], d.bounds[:, 1]
    bad = ~((vals >= lo) & (vals <= hi))
    return [(int(i), int(j), float(vals[i, j])) for i, j in zip(*np.nonzero(bad))]


# ---------------------------------------------------------------------------
# Finite differences
# ---------------------------------------------------------------------------


def _fd_steps(theta):
    return 1e-5 * (1.0 + np.abs(theta))


def fd_gradient(fun, theta):
    """Central-difference gradient of a batched scalar function."""
    theta = np.asarray(theta, dtype=float)
    h = _fd_steps(theta)
    grad = np.empty_like(theta)
    for j in range(theta.shape[-1]):
        e = np.zeros_like(theta)
        e[..., j] = h[..., j]
        grad[..., j] = (fun(theta + e) - fun(theta - e)) / (2 * h[..., j])
    return grad


def fd_jacobian(fun, theta):
    """Central-difference Jacobian ``[..., q, p]`` of a batched vector function."""
    theta = np.asarray(theta, dtype=float)
    h = _fd_steps(theta)
    cols = []
    for j in range(theta.shape[-1]):
        e = np.zeros_like(theta)
        e[..., j] = h[..., j]
        cols.append((fun(theta + e) - fun(theta - e)) / (2 * h[..., j, None]))
    return np.stack(cols, axis=-1)


# ---------------------------------------------------------------------------
# Priors
# ---------------------------------------------------------------------------


class PriorSpec:
    """Prior distribution of a parameter vector.

    Subclasses supply ``sample``, ``log_density``, ``mean``, ``variance`` and
    the support box. Derivatives fall back to central finite differences of
    ``log_density`` with step ``1e-5 * (1 + |theta_j|)``.
    """

    dim: int
    lower: np.ndarray
    upper: np.ndarray

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        raise NotImplementedError

    def log_density(self, theta) -> np.ndarray:
        raise NotImplementedError

    def grad_log_density(self, theta) -> np.ndarray:
        return fd_gradient(self.log_density, theta)

    def neg_hess_log_density(self, theta) -> np.ndarray:
        return -fd_jacobian(self.grad_log_density, theta)

    @property
    def mean(self) -> np.ndarray:
        raise NotImplementedError

    @property
    def variance(self) -> np.ndarray:
        raise NotImplementedError

    @property
    def clip_lower(self) -> np.ndarray:
        return self.lower

    @property
    def clip_upper(self) -> np.ndarray:
        return self.upper

    def project(self, theta) -> tuple[np.ndarray, np.ndarray]:
        """Clip onto the support box; also return which rows were clipped."""
        clipped = np.clip(theta, self.clip_lower, self.clip_upper)
        return clipped, np.any(clipped != theta, axis=-1)


class NormalPrior(PriorSpec):
    """Multivariate normal prior."""

    def __init__(self, mean, cov):
        self._mean = np.atleast_1d(np.asarray(mean, dtype=float))
        cov = np.asarray(cov, dtype=float)
        if cov.ndim == 1:
            cov = np.diag(cov)
        self._cov = cov
        self.dim = self._mean.size
        self._chol = np.linalg.cholesky(cov)
        self._prec = np.linalg.inv(cov)
        self._logdet = 2 * np.sum(np.log(np.diag(self._chol)))
        self.lower = np.full(self.dim, -np.inf)
        self.upper = np.full(self.dim, np.inf)

    def sample(self, rng, size):
        return self._mean + rng.standard_normal((size, self.dim)) @ self._chol.T

    def log_density(self, theta):
        r = np.asarray(theta, dtype=float) - self._mean
        quad = np.einsum("...i,ij,...j->...", r, self._prec, r)
        return -0.5 * (self.dim * LOG_2PI + self._logdet + quad)

    def grad_log_density(self, theta):
        return -(np.asarray(theta, dtype=float) - self._mean) @ self._prec

    def neg_hess_log_density(self, theta):
        theta = np.asarray(theta, dtype=float)
        return np.broadcast_to(self._prec, theta.shape[:-1] + self._prec.shape).copy()

    @property
    def mean(self):
        return self._mean.copy()

    @property
    def variance(self):
        return self._cov.copy()


class UniformBoxPrior(PriorSpec):
    """Independent uniforms on a box; flat, so zero derivatives inside.

    The box is closed unless ``open=True``. Projection during mode search
    keeps ``clip_margin`` away from the edges.
    """

    def __init__(self, lower, upper, open: bool = False, clip_margin: float = 0.0):
        self.lower = np.atleast_1d(np.asarray(lower, dtype=float))
        self.upper = np.atleast_1d(np.asarray(upper, dtype=float))
        if np.any(self.upper <= self.lower):
            raise ValueError("uniform prior needs lower < upper")
        self.dim = self.lower.size
        self.open = open
        self.clip_margin = clip_margin
        self._logvol = float(np.sum(np.log(self.upper - self.lower)))

    @property
    def clip_lower(self):
        return self.lower + self.clip_margin

    @property
    def clip_upper(self):
        return self.upper - self.clip_margin

    def sample(self, rng, size):
        return self.lower + (self.upper - self.lower) * rng.random((size, self.dim))

    def log_density(self, theta):
        theta = np.asarray(theta, dtype=float)
        if self.open:
            inside = np.all((theta > self.lower) & (theta < self.upper), axis=-1)
        else:
            inside = np.all((theta >= self.lower) & (theta <= self.upper), axis=-1)
        return np.where(inside, -self._logvol, -np.inf)

    def grad_log_density(self, theta):
        return np.zeros_like(np.asarray(theta, dtype=float))

    def neg_hess_log_density(self, theta):
        theta = np.asarray(theta, dtype=float)
        return np.zeros(theta.shape + (self.dim,))

    @property
    def mean(self):
        return 0.5 * (self.lower + self.upper)

    @property
    def variance(self):
        return np.diag((self.upper - self.lower) ** 2 / 12.0)


class ProductPrior(PriorSpec):
    """Independent blocks, each a :class:`PriorSpec`, concatenated in order."""

    def __init__(self, parts: Sequence[PriorSpec]):
        self.parts = list(parts)
        self.dim = sum(p.dim for p in self.parts)
        self._slices = []
        start = 0
        for p in self.parts:
            self._slices.append(slice(start, start + p.dim))
            start += p.dim
        self.lower = np.concatenate([p.lower for p in self.parts])
        self.upper = np.concatenate([p.upper for p in self.parts])

    @property
    def clip_lower(self):
        return np.concatenate([p.clip_lower for p in self.parts])

    @property
    def clip_upper(self):
        return np.concatenate([p.clip_upper for p in self.parts])

    def sample(self, rng, size):
        return np.concatenate([p.sample(rng, size) for p in self.parts], axis=-1)

    def log_density(self, theta):
        theta = np.asarray(theta, dtype=float)
        return sum(p.log_density(theta[..., s]) for p, s in zip(self.parts, self._slices))

    def grad_log_density(self, theta):
        theta = np.asarray(theta, dtype=float)
        return np.concatenate(
            [p.grad_log_density(theta[..., s]) for p, s in zip(self.parts, self._slices)],
            axis=-1,
        )

    def neg_hess_log_density(self, theta):
        theta = np.asarray(theta, dtype=float)
        out = np.zeros(theta.shape + (self.dim,))
        for p, s in zip(self.parts, self._slices):
            out[..., s, s] = p.neg_hess_log_density(theta[..., s])
        return out

    @property
    def mean(self):
        return np.concatenate([p.mean for p in self.parts])

    @property
    def variance(self):
        out = np.zeros((self.dim, self.dim))
        for p, s in zip(self.parts, self._slices):
            out[s, s] = p.variance
        return out


# ---------------------------------------------------------------------------
# Transforms phi = g(theta)
# ---------------------------------------------------------------------------


class TransformSpec:
    """Map ``g`` from parameters to the quantities of interest."""

    q: int
    linear: bool = False

    def __call__(self, theta) -> np.ndarray:
        raise NotImplementedError

    def jacobian(self, theta) -> np.ndarray:
        return fd_jacobian(self, theta)


class LinearTransform(TransformSpec):
    """``g(theta) = A theta``."""

    linear = True

    def __init__(self, A):
        self.A = np.atleast_2d(np.asarray(A, dtype=float))
        self.q = self.A.shape[0]

    def __call__(self, theta):
        return np.asarray(theta, dtype=float) @ self.A.T

    def jacobian(self, theta):
        theta = np.asarray(theta, dtype=float)
        return np.broadcast_to(self.A, theta.shape[:-1] + self.A.shape).copy()


def identity_transform(p: int) -> LinearTransform:
    return LinearTransform(np.eye(p))


def select_transform(p: int, indices: Sequence[int]) -> LinearTransform:
    """Pick out a subset of the parameters."""
    A = np.zeros((len(indices), p))
    A[np.arange(len(indices)), list(indices)] = 1.0
    return LinearTransform(A)


class RatioTransform(TransformSpec):
    """``g(theta) = theta[num] / theta[den]`` (a scalar)."""

    q = 1

    def __init__(self, num: int, den: int):
        self.num, self.den = num, den

    def __call__(self, theta):
        theta = np.asarray(theta, dtype=float)
        return (theta[..., self.num] / theta[..., self.den])[..., None]

    def jacobian(self, theta):
        theta = np.asarray(theta, dtype=float)
        J = np.zeros(theta.shape[:-1] + (1, theta.shape[-1]))
        J[..., 0, self.num] = 1.0 / theta[..., self.den]
        J[..., 0, self.den] = -theta[..., self.num] / theta[..., self.den] ** 2
        return J


# ---------------------------------------------------------------------------
# Models
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BlockStructure:
    """Sparsity of the information matrix of a hierarchical model.

    Parameters are ordered ``(global, group_1, ..., group_G)``; blocks of
    different groups do not interact, so the matrix is block arrowhead.
    """

    n_global: int
    n_groups: int
    group_size: int


class ModelSpec:
    """A statistical model for ``y`` given parameters and a design.

    Subclasses implement the batched methods below. ``x`` is always the
    ``(n, k)`` design array.
    """

    name: str = "model"
    dim: int
    prior: PriorSpec
    transform: TransformSpec | None = None
    block_structure: BlockStructure | None = None

    @property
    def laplace_prior(self) -> PriorSpec:
        """Prior used inside the normal approximation (defaults to ``prior``)."""
        return self.prior

    def log_likelihood(self, theta, y, x) -> np.ndarray:
        raise NotImplementedError

    def score(self, theta, y, x) -> np.ndarray:
        """Gradient of the log-likelihood in ``theta``."""
        return fd_gradient(lambda t: self.log_likelihood(t, y, x), theta)

    def fisher_information(self, theta, x) -> np.ndarray:
        raise NotImplementedError

    def simulate(self, theta, x, rng: np.random.Generator) -> np.ndarray:
        raise NotImplementedError

    def log_likelihood_matrix(self, y, thetas, x) -> np.ndarray:
        """``out[b, j] = log p(y[b] | thetas[j])`` for an outer/inner sample pair."""
        y = np.asarray(y, dtype=float)
        return self.log_likelihood(thetas[None, :, :], y[:, None, :], x)

    def n_runs(self, x) -> int:
        return np.asarray(x).shape[-2]


@dataclass(frozen=True)
class ModelSet:
    """Competing models with prior model probabilities."""

    models: tuple
    prior_probs: np.ndarray = None

    def __post_init__(self):
        models = tuple(self.models)
        if not models:
            raise ValueError("a model set needs at least one model")
        probs = (
            np.full(len(models), 1.0 / len(models))
            if self.prior_probs is None
            else np.asarray(self.prior_probs, dtype=float)
        )
        if probs.shape != (len(models),):
            raise ValueError("one prior probability per model is required")
        if np.any(probs < 0) or abs(probs.sum() - 1.0) > 1e-12:
            raise ValueError("prior model probabilities must be nonnegative and sum to 1")
        qs = {m.transform.q for m in models if m.transform is not None}
        if len(qs) > 1:
            raise ValueError(f"transforms disagree on output dimension: {sorted(qs)}")
        probs.setflags(write=False)
        object.__setattr__(self, "models", models)
        object.__setattr__(self, "prior_probs", probs)

    def __len__(self):
        return len(self.models)

    def __getitem__(self, i):
        return self.models[i]

    def __iter__(self):
        return iter(self.models)

    @property
    def log_prior_probs(self) -> np.ndarray:
        with np.errstate(divide="ignore"):
            return np.log(self.prior_probs)

    @property
    def transforms(self) -> list:
        return [m.transform for m in self.models]

    def with_transforms(self, transforms) -> "ModelSet":
        import copy

        models = []
        for m, t in zip(self.models, transforms):
            m2 = copy.copy(m)
            m2.transform = t
            models.append(m2)
        return ModelSet(tuple(models), self.prior_probs)


# ---------------------------------------------------------------------------
# Joint sampling
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class JointDraw:
    model_index: int
    theta: np.ndarray
    y: np.ndarray


@dataclass
class JointSample:
    """``B`` joint draws stored model by model.

    ``thetas[m]`` holds the parameters of the draws with ``model_index == m``
    in their original order (``members[m]`` gives their positions).
    """

    model_index: np.ndarray
    y: np.ndarray
    thetas: list = field(default_factory=list)
    members: list = field(default_factory=list)

    def __len__(self):
        return len(self.model_index)

    def __getitem__(self, b) -> JointDraw:
        m = int(self.model_index[b])
        pos = int(np.searchsorted(self.members[m], b))
        return JointDraw(m, self.thetas[m][pos], self.y[b])

    def __iter__(self) -> Iterator[JointDraw]:
        for b in range(len(self)):
            yield self[b]


def sample_joint_arrays(
    ms: ModelSet, x, B: int, rng: np.random.Generator
) -> JointSample:
    """Draw ``m ~ pi(m)``, ``theta ~ pi(theta | m)``, ``y ~ F_m(theta, x)``."""
    if B < 1:
        raise ValueError("B must be at least 1")
    x = np.asarray(x, dtype=float)
    M = len(ms)
    if M == 1:
        index = np.zeros(B, dtype=int)
    else:
        index = rng.choice(M, size=B, p=ms.prior_probs)
    n = x.shape[0]
    y = np.empty((B, n))
    thetas, members = [], []
    for m, model in enumerate(ms):
        pos = np.flatnonzero(index == m)
        theta = model.prior.sample(rng, len(pos)) if len(pos) else np.empty((0, model.dim))
        if len(pos):
            y[pos] = model.simulate(theta, x, rng)
        thetas.append(theta)
        members.append(pos)
    return JointSample(index, y, thetas, members)


def sample_joint(ms: ModelSet, d: Design, B: int, rng: np.random.Generator) -> list[JointDraw]:
    """``B`` independent draws from the joint distribution given design ``d``."""
    d.check()
    return list(sample_joint_arrays(ms, d.values, B, rng))


def log_normal_pdf(x, mean, cov):
    """Batched multivariate normal log-density; ``cov[..., q, q]``."""
    L = np.linalg.cholesky(cov)
    r = np.asarray(x, dtype=float) - mean
    z = np.linalg.solve(L, r[..., None])[..., 0]
    q = r.shape[-1]
    return -0.5 * (q * LOG_2PI + np.sum(z * z, axis=-1)) - np.sum(
        np.log(np.diagonal(L, axis1=-2, axis2=-1)), axis=-1
    )


def log_mean_exp(a, axis=-1):
    a = np.asarray(a, dtype=float)
    return logsumexp(a, axis=axis) - np.log(a.shape[axis])


def as_model_set(ms) -> ModelSet:
    """Wrap a single model in a one-model set; pass model sets through."""
    if isinstance(ms, ModelSet):
        return ms
    if isinstance(ms, ModelSpec):
        return ModelSet((ms,))
    return ModelSet(tuple(ms))
