"""Spatially-aware factor models for multivariate count data.

Nonnegative spatial factorization and its relatives: probabilistic NMF,
real-valued spatial factorization, classical factor analysis, and the
spatial/nonspatial hybrid. Inference is sparse variational GP regression
over the factors with a Monte Carlo ELBO, optimized by Adam under a
nonnegativity projection on the loadings.
"""

__version__ = "0.1.0"

from .exceptions import (
    DegenerateComponentError,
    DegenerateDataError,
    DivergedFitError,
    NsfError,
    ParameterError,
    ParseError,
    ShapeError,
    SingularMatrixError,
    UnsupportedModelError,
)
from .initialization import (
    SpatialGraphConfig,
    assign_spatial_components,
    init_factors,
    morans_i,
)
from .kernels import KernelParams, chol_with_jitter, cross_cov, kernel_eval
from .likelihoods import (
    LikelihoodSpec,
    log_lik,
    poisson_deviance,
    size_factors,
)
from .models import (
    FactorModel,
    MeanFieldState,
    ModelSpec,
    SpatialBlockState,
    build_model,
    elbo,
    factor_point_estimates,
    kl_meanfield,
    predict_mean,
)
from .optimizer import (
    FitConfig,
    FitTrace,
    adam_step,
    check_gradients,
    fit,
    project_nonnegative,
)
from .pipeline import (
    CountDataset,
    RunReport,
    dataset_from_arrays,
    evaluate,
    load_dataset,
    load_model,
    normalize_log,
    save_model,
    select_features,
    train_val_split,
)
from .postprocess import (
    ProcessedFactorization,
    feature_spatial_scores,
    observation_spatial_scores,
    simplex_normalize,
    top_features,
)
from .simulate import (
    SimConfig,
    SimDataset,
    score_against_truth,
    simulate_ggblocks,
    simulate_quilt,
)
from .svgp import (
    MarginalPosterior,
    SpatialComponentState,
    choose_inducing_points,
    kl_inducing,
    marginal_posterior,
    sample_factor,
)

__all__ = [
    "CountDataset",
    "DegenerateComponentError",
    "DegenerateDataError",
    "DivergedFitError",
    "FactorModel",
    "FitConfig",
    "FitTrace",
    "KernelParams",
    "LikelihoodSpec",
    "MarginalPosterior",
    "MeanFieldState",
    "ModelSpec",
    "NsfError",
    "ParameterError",
    "ParseError",
    "ProcessedFactorization",
    "RunReport",
    "ShapeError",
    "SimConfig",
    "SimDataset",
    "SingularMatrixError",
    "SpatialBlockState",
    "SpatialComponentState",
    "SpatialGraphConfig",
    "UnsupportedModelError",
    "adam_step",
    "assign_spatial_components",
    "build_model",
    "check_gradients",
    "chol_with_jitter",
    "choose_inducing_points",
    "cross_cov",
    "dataset_from_arrays",
    "elbo",
    "evaluate",
    "factor_point_estimates",
    "feature_spatial_scores",
    "fit",
    "init_factors",
    "kernel_eval",
    "kl_inducing",
    "kl_meanfield",
    "load_dataset",
    "load_model",
    "log_lik",
    "marginal_posterior",
    "morans_i",
    "normalize_log",
    "observation_spatial_scores",
    "poisson_deviance",
    "predict_mean",
    "project_nonnegative",
    "sample_factor",
    "save_model",
    "score_against_truth",
    "select_features",
    "simplex_normalize",
    "simulate_ggblocks",
    "simulate_quilt",
    "size_factors",
    "top_features",
    "train_val_split",
]
