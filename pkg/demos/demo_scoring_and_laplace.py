"""
Posterior modes and Laplace evidence
====================================

Every normal-based loss starts from the same ingredients: the posterior
mode found by damped scoring, the curvature at the mode, and the Laplace
approximation of the marginal likelihood. This demo computes them for a
linear model, where they are exact, and for a small logistic regression,
where they are compared with numerical integration.
"""

import numpy as np
from scipy import integrate

from bayesdesign import build_linear_gaussian, build_standard_logistic, scoring_mode

rng = np.random.default_rng(1)

###############################################################################
# A linear-Gaussian model: the normal approximation is the posterior itself,
# so the Laplace evidence reproduces the closed form to rounding error.

model = build_linear_gaussian(np.zeros(3), np.diag([1.0, 2.0, 0.5]), sigma=0.8)
x = rng.normal(size=(8, 3))
y = model.simulate(model.prior.sample(rng, 1)[0], x, rng)
post = scoring_mode(model, y, x)
print("linear model")
print("  scoring iterations:", post.iterations)
print("  Laplace log evidence: %.12f" % post.log_evidence)
print("  exact log evidence:   %.12f" % model.exact_log_evidence(y, x))

###############################################################################
# An intercept-only logistic regression with six runs. The scoring iteration
# uses the normal prior with the moments of the uniform coefficient prior.

logit = build_standard_logistic((1, 0, 0, 0, 0))
x = rng.uniform(-1, 1, (6, 4))
y = np.array([1.0, 1.0, 0.0, 1.0, 1.0, 0.0])
post = scoring_mode(logit, y, x)


def integrand(t):
    t = np.array([t])
    return np.exp(logit.log_likelihood(t, y, x) + logit.laplace_prior.log_density(t))


evidence = integrate.quad(integrand, -30, 30)[0]
print("\nlogistic model, 4 successes out of 6")
print("  posterior mode %.6f, sd %.4f" % (post.mode[0], np.sqrt(post.covariance[0, 0])))
print("  Laplace log evidence %.5f vs quadrature %.5f" % (post.log_evidence, np.log(evidence)))
