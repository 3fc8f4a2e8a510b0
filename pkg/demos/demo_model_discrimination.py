"""
Designs for telling models apart
================================

When the aim is to identify which model generated the data, the loss
concerns the model index. The 0-1 loss is one unless the true model has the
highest approximate posterior probability; the model self-information (MSI)
loss is the drop in log probability of the true model.

Two problems are shown: the four competing Box-Hill response surfaces and
the sixteen submodels of a first-order logistic regression with a prior that
corrects for multiplicity.
"""

import numpy as np

from bayesdesign import (
    BOX_HILL_BOUNDS,
    LOGISTIC_BOUNDS,
    Design,
    EstimatorConfig,
    LossSpec,
    build_box_hill,
    build_logistic_selection,
    dlmc,
    make_rng,
    multiplicity_model_prior,
    nbmc,
)

###############################################################################
# Box-Hill: compare a design spread over the region with one crowded into a
# corner, using both estimators.

box_hill = build_box_hill()
spread = Design([[150.0, 600.0], [20.0, 450.0], [80.0, 520.0], [150.0, 450.0], [40.0, 600.0]],
                BOX_HILL_BOUNDS)
corner = Design([[140.0, 590.0], [145.0, 595.0], [150.0, 600.0], [135.0, 585.0], [150.0, 590.0]],
                BOX_HILL_BOUNDS)
cfg = EstimatorConfig(B=1000)
for name, d in (("spread", spread), ("corner", corner)):
    a = nbmc(d, box_hill, LossSpec("ZeroOne"), cfg, 1)
    b = dlmc(d, box_hill, LossSpec("ZeroOne"), cfg, 2)
    m = nbmc(d, box_hill, LossSpec("MSI"), cfg, 3)
    print("%-6s 0-1: NBMC %.3f, DLMC %.3f   MSI: NBMC %.3f" % (name, a.value, b.value, m.value))

###############################################################################
# Variable selection: each model size gets prior probability 1/5, shared
# equally among the models of that size.

selection = build_logistic_selection()
print("\nprior probabilities by model:", np.round(multiplicity_model_prior(), 4))
d = Design.uniform(6, LOGISTIC_BOUNDS, make_rng(5, 0))
est = nbmc(d, selection, LossSpec("ZeroOne"), cfg, 4)
print("random 6-run design, 0-1 loss %.3f +/- %.3f" % (est.value, est.se))
