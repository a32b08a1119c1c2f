"""Prevalence-adjusted classification across shifting sites, with unlabeled
test-time adaptation of the label/confounder relationship."""

__version__ = "0.1.0"

from .adapt import (
    EmConfig,
    EmTrace,
    copa_direct,
    copa_star_mc,
    em_conditional_prevalence,
    em_marginal_prevalence,
    surrogate_loglik,
)
from .estimators import ERMClassifier, GPAClassifier
from .harness import ExperimentConfig, MetricsRow, SiteSpec, default_config, run_experiment, summarize
from .knockout import CategoricalSpec, ContinuousSpec, KnockoutCodec, knockout_corrupt
from .models import (
    CalibrationParams,
    PrevalenceModel,
    RatioModel,
    adjusted_posterior,
    apply_calibration,
    predict,
)
from .nets import MLPParams, backward, lbfgs_minimize, mlp_forward, nll_loss, softmax
from .semdata import (
    DiscreteOracle,
    EmissionConfig,
    SemConfig,
    SiteDataset,
    analytic_prevalence,
    build_discrete_oracle,
    emit_features,
    gen_labels,
    oracle_posterior,
)
from .train import (
    FittedModels,
    TrainConfig,
    f1_score,
    fit_calibration,
    fit_erm,
    fit_pipeline,
    fit_ratio,
    fit_site_prevalence,
)

__all__ = [
    "__version__",
    "CalibrationParams",
    "CategoricalSpec",
    "ContinuousSpec",
    "DiscreteOracle",
    "EmConfig",
    "EmTrace",
    "EmissionConfig",
    "ERMClassifier",
    "ExperimentConfig",
    "FittedModels",
    "GPAClassifier",
    "KnockoutCodec",
    "MLPParams",
    "MetricsRow",
    "PrevalenceModel",
    "RatioModel",
    "SemConfig",
    "SiteDataset",
    "SiteSpec",
    "TrainConfig",
    "adjusted_posterior",
    "analytic_prevalence",
    "apply_calibration",
    "backward",
    "build_discrete_oracle",
    "copa_direct",
    "copa_star_mc",
    "default_config",
    "em_conditional_prevalence",
    "em_marginal_prevalence",
    "emit_features",
    "f1_score",
    "fit_calibration",
    "fit_erm",
    "fit_pipeline",
    "fit_ratio",
    "fit_site_prevalence",
    "gen_labels",
    "knockout_corrupt",
    "lbfgs_minimize",
    "mlp_forward",
    "nll_loss",
    "oracle_posterior",
    "predict",
    "run_experiment",
    "softmax",
    "summarize",
    "surrogate_loglik",
]
