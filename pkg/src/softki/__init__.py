"""Gaussian-process regression with learned softmax interpolation points."""

from .baselines import (
    ExactGP,
    SGPRHyperparams,
    SGPRPosterior,
    exact_gp_mll,
    sgpr_elbo,
    sgpr_fit,
    sgpr_predict_mean,
    sgpr_predict_var,
    sgpr_test_metrics,
)
from .checkpoint import Checkpoint, load_checkpoint, restore, save_checkpoint
from .data import (
    Dataset,
    Standardization,
    apply_stats,
    load_csv,
    ricker,
    ricker_dataset,
    ricker_raw,
    split_raw,
    split_standardize,
)
from .errors import (
    CGNotConvergedWarning,
    ChecksumOrVersionMismatch,
    DegenerateColumnWarning,
    DimensionMismatch,
    EmptyFile,
    NonPositiveTemperature,
    NotPositiveDefinite,
    ObjectiveFailed,
    ParseError,
    RankDeficient,
    SingularTriangular,
    SoftKIError,
    TooFewPoints,
    TooLarge,
)
from .interp import (
    InterpolationState,
    softki_cross,
    softki_gram,
    softmax_weights,
    softmax_weights_backward,
)
from .kernel import MaternGrads, MaternParams, matern32, matern32_param_grads
from .objective import (
    Gradients,
    ObjectiveConfig,
    ObjectiveReport,
    SoftKIHyperparams,
    exact_mll,
    hutchinson_pseudoloss,
    stabilized_objective,
)
from .posterior import (
    AltSolveResult,
    FittedPosterior,
    alt_solve,
    fit_qr,
    gaussian_nll,
    near_degenerate_instance,
    predict_mean,
    predict_var,
    solver_study,
    test_metrics,
)
from .trainer import TrainConfig, TrainTrace, kmeans, train, train_exact, train_sgpr

__version__ = "0.1.0"

__all__ = [
    "AltSolveResult",
    "CGNotConvergedWarning",
    "Checkpoint",
    "ChecksumOrVersionMismatch",
    "Dataset",
    "DegenerateColumnWarning",
    "DimensionMismatch",
    "EmptyFile",
    "ExactGP",
    "FittedPosterior",
    "Gradients",
    "InterpolationState",
    "MaternGrads",
    "MaternParams",
    "NonPositiveTemperature",
    "NotPositiveDefinite",
    "ObjectiveConfig",
    "ObjectiveFailed",
    "ObjectiveReport",
    "ParseError",
    "RankDeficient",
    "SGPRHyperparams",
    "SGPRPosterior",
    "SingularTriangular",
    "SoftKIError",
    "SoftKIHyperparams",
    "Standardization",
    "TooFewPoints",
    "TooLarge",
    "TrainConfig",
    "TrainTrace",
    "alt_solve",
    "apply_stats",
    "exact_gp_mll",
    "exact_mll",
    "fit_qr",
    "gaussian_nll",
    "hutchinson_pseudoloss",
    "kmeans",
    "load_checkpoint",
    "load_csv",
    "matern32",
    "matern32_param_grads",
    "near_degenerate_instance",
    "predict_mean",
    "predict_var",
    "restore",
    "ricker",
    "ricker_dataset",
    "ricker_raw",
    "save_checkpoint",
    "sgpr_elbo",
    "sgpr_fit",
    "sgpr_predict_mean",
    "sgpr_predict_var",
    "sgpr_test_metrics",
    "softki_cross",
    "softki_gram",
    "softmax_weights",
    "softmax_weights_backward",
    "solver_study",
    "split_raw",
    "split_standardize",
    "stabilized_objective",
    "test_metrics",
    "train",
    "train_exact",
    "train_sgpr",
]
