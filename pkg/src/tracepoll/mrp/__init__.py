"""Hierarchical Bayesian smoothing of silicon samples.

Categorical-likelihood model with structured priors over a stratification
frame's attributes, fit with an own-built dynamic HMC sampler, followed by
posterior predictive cell probabilities and post-stratification.
"""

from .icar import AreaGraph, IcarStructure, build_icar, icar_scaling_factor
from .logpost import NonFinite, linear_predictor, log_posterior, make_logpost, response_probs
from .nuts import (
    AllDivergent,
    Diagnostics,
    PosteriorDraws,
    SamplerSettings,
    planned_retained_draws,
    sample,
    split_rhat,
)
from .posterior import (
    EmptyCrosstab,
    UnknownCategory,
    build_training_data,
    cell_linear_predictor,
    cell_probs,
    crosstab_partition,
    frame_cell_indices,
    margin_draws,
    poststratify,
    save_diagnostics_json,
    save_draws_csv,
    save_estimates_csv,
    summarize_estimates,
)
from .spec import (
    RANDOM_WALK,
    UNSTRUCTURED,
    EffectSpec,
    ModelSpec,
    ModelSpecError,
    ParamLayout,
    TrainingData,
    load_model_config,
    spec_from_config,
    standardize_columns,
)

__all__ = [
    "AreaGraph",
    "IcarStructure",
    "build_icar",
    "icar_scaling_factor",
    "NonFinite",
    "linear_predictor",
    "log_posterior",
    "make_logpost",
    "response_probs",
    "AllDivergent",
    "Diagnostics",
    "PosteriorDraws",
    "SamplerSettings",
    "planned_retained_draws",
    "sample",
    "split_rhat",
    "EmptyCrosstab",
    "UnknownCategory",
    "build_training_data",
    "cell_linear_predictor",
    "cell_probs",
    "crosstab_partition",
    "frame_cell_indices",
    "margin_draws",
    "poststratify",
    "save_diagnostics_json",
    "save_draws_csv",
    "save_estimates_csv",
    "summarize_estimates",
    "RANDOM_WALK",
    "UNSTRUCTURED",
    "EffectSpec",
    "ModelSpec",
    "ModelSpecError",
    "ParamLayout",
    "TrainingData",
    "load_model_config",
    "spec_from_config",
    "standardize_columns",
]
