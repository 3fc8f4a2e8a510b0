"""Approximate coordinate exchange (ACE) for minimizing a noisy expected loss.

Each pass visits the ``W = n * k`` coordinates of the design in row-major
order. For coordinate ``i`` the expected loss is estimated at ``Q`` values of
that coordinate (``Q - 1`` evenly spaced plus the current value), a GP
emulator is fitted to the estimates and its minimizer becomes the proposal.
Fresh loss samples at the current and proposed designs then feed a
statistical test whose output ``p*`` is the probability of accepting.

A run makes ``E`` restarts from random designs; the winner is picked by
re-estimating every restart's final design with a shared random stream.
"""
from __future__ import annotations

import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import stats

from .core import (
    PURPOSE_ACCEPT,
    PURPOSE_COMPARE_CURRENT,
    PURPOSE_COMPARE_PROPOSED,
    PURPOSE_EMULATOR,
    PURPOSE_FINAL,
    PURPOSE_INIT,
    Design,
    make_rng,
    seed_sequence,
    validate_design,
)
from .expected_loss import EstimatorConfig, LossEstimate, LossSamples, loss_samples
from .gp_emulator import gp_fit, minimize_predictive_mean


@dataclass(frozen=True)
class AceConfig:
    """Settings of an ACE run.

    ``force_accept_prob`` replaces the computed ``p*`` when set; it exists
    for testing the exchange logic.
    """

    E: int = 20
    Q: int = 20
    B: int = 1000
    B_compare: int = 20000
    max_cycles: int = 20
    seed: int = 0
    workers: int = 1
    force_accept_prob: float | None = None

    def __post_init__(self):
        if self.E < 1 or self.B < 1:
            raise ValueError("E and B must be at least 1")
        if self.Q < 3:
            raise ValueError("Q must be at least 3")
        if self.B_compare < self.B:
            raise ValueError("B_compare must be at least B")
        if self.max_cycles < 0:
            raise ValueError("max_cycles must be nonnegative")


class EstimatorSampler:
    """Per-draw loss values of a design from one of the expected-loss estimators.

    Calling it with ``(design_array, B, seed)`` returns a
    :class:`~bayesdesign.expected_loss.LossSamples`.
    """

    def __init__(self, estimator, ms, loss, cfg: EstimatorConfig | None = None):
        self.estimator, self.ms, self.loss = estimator, ms, loss
        self.cfg = cfg or EstimatorConfig()
        self.binary = loss is not None and loss.is_binary

    def __call__(self, x, B, seed) -> LossSamples:
        return loss_samples(self.estimator, x, self.ms, self.loss, B, seed, replace(self.cfg, B=B))


# ---------------------------------------------------------------------------
# Acceptance probabilities
# ---------------------------------------------------------------------------


def accept_prob_continuous(samples_current, samples_proposed) -> float:
    """Probability that the proposed design has the lower expected loss.

    Two-sample t statistic with pooled variance: ``p* = 1 - F(-t)`` where
    ``t = (mean_C - mean_*) / sqrt(v (1/B_C + 1/B_*))`` and ``F`` is the t
    distribution with ``B_C + B_* - 2`` degrees of freedom. With zero pooled
    variance ``p*`` is 1, 0.5 or 0 as the proposed mean is lower, equal or
    higher.
    """
    c = np.asarray(samples_current, dtype=float)
    s = np.asarray(samples_proposed, dtype=float)
    c, s = c[np.isfinite(c)], s[np.isfinite(s)]
    if c.size < 2 or s.size < 2:
        raise ValueError("each sample needs at least two finite values")
    diff = c.mean() - s.mean()
    df = c.size + s.size - 2
    v = ((c.size - 1) * c.var(ddof=1) + (s.size - 1) * s.var(ddof=1)) / df
    if v <= 0:
        return 1.0 if diff > 0 else (0.5 if diff == 0 else 0.0)
    t = diff / np.sqrt(v * (1.0 / c.size + 1.0 / s.size))
    return float(1.0 - stats.t.cdf(-t, df))


def accept_prob_binary(samples_current, samples_proposed, rng: np.random.Generator) -> float:
    """``P(rho_* < rho_C)`` for 0/1 losses under uniform priors on both rates.

    The posteriors are ``Beta(1 + s, 1 + B - s)`` with ``s`` the number of
    ones. The probability is estimated by averaging the proposed arm's Beta
    CDF over ``B_C`` draws of ``rho_C``.
    """
    c = np.asarray(samples_current, dtype=float)
    s = np.asarray(samples_proposed, dtype=float)
    for a in (c, s):
        if a.size < 1 or not np.all((a == 0) | (a == 1)):
            raise ValueError("binary acceptance test needs samples in {0, 1}")
    sc, ss = c.sum(), s.sum()
    rho_c = rng.beta(1 + sc, 1 + c.size - sc, size=c.size)
    return float(np.mean(stats.beta.cdf(rho_c, 1 + ss, 1 + s.size - ss)))


# ---------------------------------------------------------------------------
# Passes and runs
# ---------------------------------------------------------------------------


@dataclass
class AceTrace:
    records: list = field(default_factory=list)
    design: Design | None = None
    estimate: LossEstimate | None = None

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records)


@dataclass
class AceResult:
    design: Design
    estimate: LossEstimate
    restarts: list  # AceTrace per restart
    best_restart: int
    seconds: float

    @property
    def records(self) -> list:
        return [r for t in self.restarts for r in t.records]


def _mean(samples: LossSamples) -> float:
    v = samples.usable
    return float(np.mean(v)) if v.size else float("nan")


def coordinate_pass(d: Design, sampler, cfg: AceConfig, seed, binary: bool = False, tag=None):
    """One pass of coordinate exchanges over every coordinate of ``d``.

    ``seed`` identifies the pass; every coordinate derives its own streams
    from it. Returns the new design and one trace record per coordinate.
    """
    d.check()
    records = []
    ss = seed_sequence(seed) if not isinstance(seed, np.random.SeedSequence) else seed
    for i in range(d.W):
        key = seed_sequence(ss, i)
        row, col = divmod(i, d.k)
        lo, hi = d.coordinate_bounds(i)
        current = float(d.flat()[i])
        rec = {"coordinate": i, "row": row, "column": col, "current": current}
        if tag:
            rec.update(tag)
        pts = np.append(np.linspace(lo, hi, cfg.Q - 1), current)
        z = np.array(
            [_mean(sampler(d.with_coordinate(i, p).values, cfg.B, seed_sequence(key, PURPOSE_EMULATOR, j)))
             for j, p in enumerate(pts)]
        )
        ok = np.isfinite(z)
        try:
            gp = gp_fit(pts[ok], z[ok], (lo, hi))
            proposed, predicted = minimize_predictive_mean(gp, (lo, hi))
        except (ValueError, np.linalg.LinAlgError) as exc:
            rec.update(skipped=True, reason=str(exc), accepted=False)
            records.append(rec)
            continue
        rec.update(proposed=proposed, predicted=predicted, skipped=False)
        if proposed == current:
            rec.update(p_star=None, accepted=False)
            records.append(rec)
            continue
        d_prop = d.with_coordinate(i, proposed)
        cur = sampler(d.values, cfg.B_compare, seed_sequence(key, PURPOSE_COMPARE_CURRENT))
        new = sampler(d_prop.values, cfg.B_compare, seed_sequence(key, PURPOSE_COMPARE_PROPOSED))
        rng = make_rng(key, PURPOSE_ACCEPT)
        if cfg.force_accept_prob is not None:
            p_star = float(cfg.force_accept_prob)
        elif binary:
            p_star = accept_prob_binary(cur.values[np.isfinite(cur.values)],
                                        new.values[np.isfinite(new.values)], rng)
        else:
            p_star = accept_prob_continuous(cur.values, new.values)
        accepted = bool(rng.random() < p_star)
        rec.update(p_star=p_star, accepted=accepted, loss_current=_mean(cur), loss_proposed=_mean(new))
        if accepted:
            d = d_prop
            assert not validate_design(d)
        records.append(rec)
    return d, records


def _restart(args):
    sampler, n, bounds, cfg, e, binary, initial = args
    d = initial if initial is not None else Design.uniform(n, bounds, make_rng(cfg.seed, PURPOSE_INIT, e))
    trace = AceTrace()
    for cycle in range(cfg.max_cycles):
        d, recs = coordinate_pass(
            d, sampler, cfg, seed_sequence(cfg.seed, e, cycle), binary, {"restart": e, "cycle": cycle}
        )
        trace.records.extend(recs)
        if not any(r["accepted"] for r in recs):
            break
    trace.design = d
    return trace


def _estimate(sampler, x, B, seed, label) -> LossEstimate:
    start = time.perf_counter()
    s = sampler(x, B, seed)
    v = s.usable
    se = float(np.std(v, ddof=1) / np.sqrt(v.size)) if v.size > 1 else 0.0
    return LossEstimate(
        float(np.mean(v)) if v.size else float("nan"), se, B, label,
        float(np.mean(s.diverged)) if len(s.diverged) else 0.0, time.perf_counter() - start,
    )


def ace_run(sampler, n: int, bounds, cfg: AceConfig, binary: bool | None = None, initial=None):
    """Run ACE with ``cfg.E`` restarts and return the best final design.

    Parameters
    ----------
    sampler : callable
        ``sampler(x, B, seed)`` returning per-draw losses (for example an
        :class:`EstimatorSampler`).
    n : int
        Number of runs; ``bounds`` gives one ``(low, high)`` row per factor.
    binary : bool, optional
        Use the binary acceptance test; defaults to ``sampler.binary``.
    initial : sequence of Design, optional
        Starting designs, one per restart, instead of random ones.
    """
    start = time.perf_counter()
    if binary is None:
        binary = bool(getattr(sampler, "binary", False))
    bounds = np.asarray(bounds, dtype=float)
    inits = list(initial) if initial is not None else [None] * cfg.E
    if len(inits) != cfg.E:
        raise ValueError("one initial design per restart is required")
    tasks = [(sampler, n, bounds, cfg, e, binary, inits[e]) for e in range(cfg.E)]
    if cfg.workers > 1 and cfg.E > 1:
        with ProcessPoolExecutor(max_workers=min(cfg.workers, cfg.E)) as pool:
            traces = list(pool.map(_restart, tasks))
    else:
        traces = [_restart(t) for t in tasks]
    # every candidate is judged on the same random stream
    final_seed = seed_sequence(cfg.seed, PURPOSE_FINAL)
    for t in traces:
        t.estimate = _estimate(sampler, t.design.values, cfg.B_compare, final_seed, "final")
    values = np.array([t.estimate.value for t in traces])
    if not np.any(np.isfinite(values)):
        raise RuntimeError(
            "every restart failed: " + "; ".join(f"restart {i}: {t.estimate}" for i, t in enumerate(traces))
        )
    best = int(np.nanargmin(values))
    return AceResult(traces[best].design, traces[best].estimate, traces, best, time.perf_counter() - start)
