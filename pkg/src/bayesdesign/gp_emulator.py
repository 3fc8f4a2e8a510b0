"""One-dimensional Gaussian-process emulator of noisy expected-loss evaluations.

Inputs are rescaled to the unit interval and outputs standardized to zero
mean and unit standard deviation. The kernel is squared exponential,

    k(a, b) = s2 * (exp(-(a - b)**2 / (2 * l**2)) + g * [a == b]),

with a nugget ``g`` fixed relative to the signal variance ``s2``. Because of
that, ``s2`` has a closed-form maximizer given ``l``, and only the
lengthscale needs a numerical search.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.optimize import minimize_scalar

DEFAULT_NUGGET = 1e-6
# log-lengthscale search range on the unit-scaled input
LOG_LENGTH_GRID = np.linspace(np.log(0.02), np.log(20.0), 41)
SCAN_POINTS = 10000

_GOLDEN = (np.sqrt(5.0) - 1.0) / 2.0


@dataclass(frozen=True)
class GP1D:
    """A fitted emulator; build it with :func:`gp_fit`."""

    xs: np.ndarray  # training inputs, unit scaled and sorted
    zs: np.ndarray  # training outputs, standardized, same order
    lower: float
    upper: float
    z_mean: float
    z_sd: float
    lengthscale: float  # on the unit-scaled input
    signal_variance: float  # of the standardized output
    nugget: float  # relative to the signal variance
    alpha: np.ndarray  # (R + nugget I)^-1 zs
    constant: bool = False

    def _scale(self, x):
        width = self.upper - self.lower
        return (np.asarray(x, dtype=float) - self.lower) / (width if width > 0 else 1.0)

    def predict(self, x_star) -> np.ndarray:
        """Predictive mean at one point or an array of points."""
        x_star = np.asarray(x_star, dtype=float)
        if self.constant:
            return np.full(x_star.shape, self.z_mean)
        u = self._scale(x_star)
        r = np.exp(-0.5 * ((u[..., None] - self.xs) / self.lengthscale) ** 2)
        return self.z_mean + self.z_sd * (r @ self.alpha)


def _correlation(xs, lengthscale, nugget):
    d = xs[:, None] - xs[None, :]
    return np.exp(-0.5 * (d / lengthscale) ** 2) + nugget * np.eye(xs.size)


def _profile_nll(log_l, xs, zs, nugget):
    """Negative log marginal likelihood with the signal variance profiled out."""
    R = _correlation(xs, np.exp(log_l), nugget)
    try:
        c = cho_factor(R, lower=True)
    except np.linalg.LinAlgError:
        return np.inf
    Q = xs.size
    s2 = float(zs @ cho_solve(c, zs)) / Q
    logdet = 2.0 * np.sum(np.log(np.diag(c[0])))
    return 0.5 * (Q * np.log(max(s2, 1e-300)) + logdet + Q)


def gp_fit(xs, zs, interval=None, nugget: float = DEFAULT_NUGGET) -> GP1D:
    """Fit the emulator by maximum marginal likelihood.

    Parameters
    ----------
    xs, zs : array_like
        Training inputs and outputs; at least three distinct inputs.
    interval : (float, float), optional
        Input range used for scaling; defaults to the range of ``xs``.
    nugget : float
        Nugget as a fraction of the signal variance.

    The lengthscale is chosen by scanning a log grid, then refining around
    the best grid point with a bounded scalar search. Outputs with zero
    variance give a constant emulator (``constant=True``).
    """
    xs = np.asarray(xs, dtype=float).ravel()
    zs = np.asarray(zs, dtype=float).ravel()
    if xs.shape != zs.shape:
        raise ValueError("xs and zs must have the same length")
    if np.unique(xs).size < 3:
        raise ValueError("the emulator needs at least three distinct inputs")
    if not np.all(np.isfinite(zs)):
        raise ValueError("emulator outputs must be finite")
    lower, upper = (float(xs.min()), float(xs.max())) if interval is None else map(float, interval)
    # canonical order makes the fit independent of the order of the pairs
    order = np.lexsort((zs, xs))
    xs, zs = xs[order], zs[order]
    z_mean = float(np.mean(zs))
    z_sd = float(np.std(zs))
    u = (xs - lower) / ((upper - lower) if upper > lower else 1.0)
    if z_sd <= 1e-12 * max(1.0, abs(z_mean)):
        return GP1D(u, np.zeros_like(zs), lower, upper, z_mean, 0.0, 1.0, 1.0, nugget,
                    np.zeros_like(zs), constant=True)
    z = (zs - z_mean) / z_sd
    nll = np.array([_profile_nll(g, u, z, nugget) for g in LOG_LENGTH_GRID])
    best = int(np.argmin(nll))
    lo = LOG_LENGTH_GRID[max(best - 1, 0)]
    hi = LOG_LENGTH_GRID[min(best + 1, LOG_LENGTH_GRID.size - 1)]
    res = minimize_scalar(
        _profile_nll, bounds=(lo, hi), args=(u, z, nugget), method="bounded",
        options={"xatol": 1e-10},
    )
    log_l = res.x if res.fun < nll[best] else LOG_LENGTH_GRID[best]
    ell = float(np.exp(log_l))
    R = _correlation(u, ell, nugget)
    c = cho_factor(R, lower=True)
    alpha = cho_solve(c, z)
    s2 = float(z @ alpha) / z.size
    return GP1D(u, z, lower, upper, z_mean, z_sd, ell, s2, nugget, alpha)


def gp_predict_mean(gp: GP1D, x_star):
    """Predictive mean (in the original output units) at ``x_star``."""
    out = gp.predict(x_star)
    return float(out) if np.ndim(out) == 0 else out


def _golden_section(f, a, b, tol=1e-10, max_iter=200):
    c, d = b - _GOLDEN * (b - a), a + _GOLDEN * (b - a)
    fc, fd = f(c), f(d)
    for _ in range(max_iter):
        if b - a <= tol:
            break
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - _GOLDEN * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + _GOLDEN * (b - a)
            fd = f(d)
    return (c, fc) if fc <= fd else (d, fd)


def minimize_predictive_mean(gp: GP1D, interval=None, n_scan: int = SCAN_POINTS):
    """Minimize the predictive mean over ``interval``.

    A scan over ``n_scan`` evenly spaced points (endpoints included) picks
    the best grid point, ties going to the lowest; a golden-section search
    between its neighbours then refines it. The refined point is kept only
    if it is strictly better. Returns ``(x_min, value)``.
    """
    lo, hi = (gp.lower, gp.upper) if interval is None else map(float, interval)
    grid = np.linspace(lo, hi, n_scan)
    vals = gp.predict(grid)
    i = int(np.argmin(vals))
    x_best, v_best = float(grid[i]), float(vals[i])
    if gp.constant:
        return x_best, v_best
    a, b = grid[max(i - 1, 0)], grid[min(i + 1, n_scan - 1)]
    x_ref, v_ref = _golden_section(lambda t: float(gp.predict(t)), a, b)
    if v_ref < v_best:
        x_best, v_best = float(np.clip(x_ref, lo, hi)), float(v_ref)
    return x_best, v_best
