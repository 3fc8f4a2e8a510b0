"""
Searching for a logistic regression design
==========================================

Approximate coordinate exchange (ACE) improves a design one coordinate at a
time. For each coordinate a Gaussian-process emulator is fitted to noisy
expected-loss estimates on a grid, its minimizer is proposed, and a
statistical test on fresh samples decides whether to accept the move.

Here ACE searches for a six-run design for first-order logistic regression
under the self-information loss. The settings are deliberately small so the
demo runs in a couple of minutes; the defaults of :class:`AceConfig` are
much larger.
"""

import time

import numpy as np

from bayesdesign import (
    LOGISTIC_BOUNDS,
    AceConfig,
    Design,
    EstimatorConfig,
    EstimatorSampler,
    LossSpec,
    ModelSet,
    ace_run,
    build_standard_logistic,
    make_rng,
    nbmc,
)

ms = ModelSet((build_standard_logistic(),))
loss = LossSpec("SI")
sampler = EstimatorSampler("nbmc", ms, loss)
cfg = AceConfig(E=2, Q=10, B=300, B_compare=1000, max_cycles=2, seed=3)

start = time.perf_counter()
result = ace_run(sampler, 6, LOGISTIC_BOUNDS, cfg)
print("ACE finished in %.0f s; restart %d won" % (time.perf_counter() - start, result.best_restart))

###############################################################################
# The trace has one record per coordinate visit.

records = result.records
accepted = sum(r["accepted"] for r in records)
print("%d coordinate visits, %d moves accepted" % (len(records), accepted))
print(result.design.to_csv())

###############################################################################
# Compare the found design with a random starting design on a common,
# larger Monte Carlo sample.

start_design = Design.uniform(6, LOGISTIC_BOUNDS, make_rng(cfg.seed, 3, 0))
big = EstimatorConfig(B=5000)
for name, d in (("random start", start_design), ("ACE design", result.design)):
    est = nbmc(d, ms, loss, big, 11)
    print("%-12s expected SI loss %.3f +/- %.3f" % (name, est.value, est.se))
print("\nfactor values pushed to the bounds:", int(np.sum(np.isclose(np.abs(result.design.values), 1.0))))
