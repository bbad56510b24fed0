"""Layered ensemble of autoencoder representations and perturbation-specific
sparse regressors for predicting perturbation response from expression
profiles."""

from .data import (
    ExpressionMatrix,
    ResponseRecord,
    ResponseTable,
    Stage,
    SyntheticSpec,
    generate_synthetic,
)
from .damae import DamaeConfig, DamaeModel, train_seed_ensemble
from .ensemble import LeapEnsemble, PredictionTable, fit_leap, predict, predict_partial
from .evaluate import EvaluationReport, mse, pearson, score, spearman
from .preprocess import PreprocessModel
from .regress import PerturbationFit, TuneConfig, fit_lasso, tune_and_fit

__version__ = "0.1.0"

__all__ = [
    "DamaeConfig",
    "DamaeModel",
    "EvaluationReport",
    "ExpressionMatrix",
    "LeapEnsemble",
    "PerturbationFit",
    "PredictionTable",
    "PreprocessModel",
    "ResponseRecord",
    "ResponseTable",
    "Stage",
    "SyntheticSpec",
    "TuneConfig",
    "fit_lasso",
    "fit_leap",
    "generate_synthetic",
    "mse",
    "pearson",
    "predict",
    "predict_partial",
    "score",
    "spearman",
    "train_seed_ensemble",
    "tune_and_fit",
    "__version__",
]
