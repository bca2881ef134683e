"""Mixed models for longitudinal outcomes aligned at a terminal event."""
from .dataset import (
    DatasetError,
    LongitudinalDataset,
    Subject,
    center_covariates,
    load_dataset,
    summarize,
    uncenter_covariates,
)
from .inference import WaldResult, bic, parse_contrast, rank_by_bic, wald_multivariate, wald_univariate
from .lmm import (
    LmmSpec,
    coefficient_curve,
    fit_fmm,
    fit_lmm,
    marginal_loglik,
    predict_marginal,
    predict_subject,
)
from .nlmm import (
    NlmmSpec,
    PmmParams,
    SaemControls,
    SmmParams,
    fit_agq,
    fit_saem,
    loglik_agq,
    pmm_mean,
    smm_mean,
    solve_transition,
)
from .results import CovarianceStruct, FitResult, Trajectory
from .sim import SCENARIOS, Challenge, Scenario, apply_challenge, generate_dataset, mse_bias, run_study
from .splines import (
    KnotSequence,
    bspline_basis,
    equal_knots,
    fmm_basis,
    natural_cubic_basis,
    penalty_matrix,
    quantile_knots,
    transform_basis,
)

__version__ = "0.1.0"

__all__ = [
    "DatasetError", "LongitudinalDataset", "Subject", "center_covariates", "load_dataset", "summarize",
    "uncenter_covariates", "WaldResult", "bic", "parse_contrast", "rank_by_bic", "wald_multivariate",
    "wald_univariate", "LmmSpec", "coefficient_curve", "fit_fmm", "fit_lmm", "marginal_loglik",
    "predict_marginal", "predict_subject", "NlmmSpec", "PmmParams", "SaemControls", "SmmParams", "fit_agq",
    "fit_saem", "loglik_agq", "pmm_mean", "smm_mean", "solve_transition", "CovarianceStruct", "FitResult",
    "Trajectory", "SCENARIOS", "Challenge", "Scenario", "apply_challenge", "generate_dataset", "mse_bias",
    "run_study", "KnotSequence", "bspline_basis", "equal_knots", "fmm_basis", "natural_cubic_basis",
    "penalty_matrix", "quantile_knots", "transform_basis",
]
