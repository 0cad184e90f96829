"""Adaptive variational Bayes over structured model collections.

Fit each candidate model with its own variational family, then combine the
fits with closed-form model weights; select a single model from the same
weights when a point decision is wanted. Subpackages provide the model
families (Gaussian mixtures, ReLU networks with uniform-box posteriors,
particle families on discretized spaces, quasi-likelihood block models),
diagnostics, and an experiment CLI.
"""

__version__ = "0.1.0"

from .core import (
    CombinedPosterior,
    ElboBreakdown,
    ModelCollection,
    change_of_measure_check,
    combine_posteriors,
    elbo_of_combination,
    kl_categorical,
    kl_uniform_box,
    model_probability_gap_bound,
)
from .deep import (
    BernoulliClassificationAdapter,
    BoxVariationalState,
    FitConfig,
    FitResult,
    GaussianRegressionAdapter,
    NetArchitecture,
    PoissonProcessAdapter,
    elbo_gradient_step,
    fit_model,
    forward,
    posterior_mean_predict,
)
from .errors import (
    AbsoluteContinuityError,
    AvbError,
    CapacityError,
    ConfigError,
    DegenerateBox,
    MissingModelFit,
    NonFiniteObjective,
    NumericalBreakdown,
    OutOfSupport,
    ParseError,
    ShapeError,
)

__all__ = [
    "__version__",
    "AbsoluteContinuityError",
    "AvbError",
    "BernoulliClassificationAdapter",
    "BoxVariationalState",
    "CapacityError",
    "CombinedPosterior",
    "ConfigError",
    "DegenerateBox",
    "ElboBreakdown",
    "FitConfig",
    "FitResult",
    "GaussianRegressionAdapter",
    "MissingModelFit",
    "ModelCollection",
    "NetArchitecture",
    "NonFiniteObjective",
    "NumericalBreakdown",
    "OutOfSupport",
    "ParseError",
    "PoissonProcessAdapter",
    "ShapeError",
    "change_of_measure_check",
    "combine_posteriors",
    "elbo_gradient_step",
    "elbo_of_combination",
    "fit_model",
    "forward",
    "kl_categorical",
    "kl_uniform_box",
    "model_probability_gap_bound",
    "posterior_mean_predict",
]
