"""
Estimating expected losses
==========================

The expected loss of a design averages the loss of a decision over the
joint distribution of parameters and responses. The normal-based estimator
(NBMC) replaces each posterior by its normal approximation; the double-loop
estimator (DLMC) uses an inner Monte Carlo sample instead. For a linear
model with a normal prior both are compared with the closed form, and the
pseudo-Bayesian D-criterion is assembled into the same quantity.
"""

import numpy as np

from bayesdesign import EstimatorConfig, LossSpec, build_linear_gaussian, dlmc, nbmc, pseudo_D

rng = np.random.default_rng(7)
model = build_linear_gaussian(np.zeros(3), np.eye(3), sigma=0.9)
x = rng.normal(size=(6, 3))
cfg = EstimatorConfig(B=2000)

###############################################################################
# Self-information loss: the expected value is minus the expected gain in
# Shannon information about the parameters.

si = LossSpec("SI")
exact = model.exact_expected_si_loss(x)
for name, est in (("NBMC", nbmc(x, model, si, cfg, 1)), ("DLMC", dlmc(x, model, si, cfg, 2))):
    print("%s SI estimate %.4f +/- %.4f   (exact %.4f)" % (name, est.value, est.se, exact))

###############################################################################
# Squared-error loss: the expected posterior variance summed over parameters.

se = nbmc(x, model, LossSpec("SE"), cfg, 3)
print("NBMC SE estimate %.4f +/- %.4f   (exact %.4f)" % (se.value, se.se, model.exact_expected_se_loss(x)))

###############################################################################
# With a very diffuse prior the expected SI loss is, up to constants, the
# prior average of -1/2 log det of the Fisher information. The estimator
# reports those constants so the two sides can be compared directly.

diffuse = build_linear_gaussian(np.zeros(3), 150.0**2 * np.eye(3), sigma=0.9)
pd = pseudo_D(x, diffuse, 2000, 4)
nb = nbmc(x, diffuse, si, cfg, 5)
print("\ndiffuse prior: NBMC %.4f +/- %.4f, pseudo-D assembled %.4f"
      % (nb.value, nb.se, pd.extras["constant"] + pd.value))
