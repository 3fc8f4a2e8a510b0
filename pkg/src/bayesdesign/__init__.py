"""Bayesian optimal design of experiments with normal-based loss approximations.

The expected loss of a design is estimated by Monte Carlo over joint draws of
model, parameters and responses, with the posterior quantities inside each
loss replaced by normal (Laplace and delta-method) approximations. Designs
are optimized by approximate coordinate exchange.
"""
from .ace import (
    AceConfig,
    AceResult,
    EstimatorSampler,
    accept_prob_binary,
    accept_prob_continuous,
    ace_run,
    coordinate_pass,
)
from .core import (
    Design,
    DesignError,
    LinearTransform,
    ModelSet,
    ModelSpec,
    NormalPrior,
    ProductPrior,
    RatioTransform,
    UniformBoxPrior,
    as_model_set,
    identity_transform,
    make_rng,
    sample_joint,
    select_transform,
    validate_design,
)
from .expected_loss import (
    EstimatorConfig,
    LossEstimate,
    UnsupportedEstimatorError,
    dlmc,
    efficiency_ratio,
    estimate,
    nbmc,
    perturb_design,
    pseudo_A,
    pseudo_D,
    relative_efficiency,
)
from .gp_emulator import GP1D, gp_fit, gp_predict_mean, minimize_predictive_mean
from .laplace import (
    ModelPosteriorSet,
    NormalPosterior,
    ScoringConfig,
    approx_model_posteriors,
    laplace_log_evidence,
    sample_approx_posterior,
    scoring_mode,
)
from .losses import (
    LossSpec,
    MixtureOfNormals,
    nb_ae_loss,
    nb_msi_loss,
    nb_se_loss,
    nb_si_loss,
    nb_zero_one_loss,
)
from .models import (
    BOX_HILL_BOUNDS,
    LOGISTIC_BOUNDS,
    build_box_hill,
    build_hier_logistic,
    build_linear_gaussian,
    build_logistic_selection,
    build_standard_logistic,
    multiplicity_model_prior,
)

__version__ = "0.1.0"
