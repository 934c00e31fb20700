"""Multilevel mixed-effects parametric survival models.

Maximum-likelihood fitting of clustered survival data with standard
(exponential, Weibull, Gompertz), spline-based (log cumulative-hazard and
log hazard scale), and user-defined hazard families; multivariate Gaussian
or t random effects at any number of nesting levels; relative survival;
delayed entry; time-dependent effects; post-estimation prediction with
delta-method intervals; and clustered-data simulation.
"""

from .data import Dataset, SurvivalRecord, build_hierarchy, declare_survival, load_csv, write_csv
from .errors import (
    ConvergenceError,
    MlsurvError,
    ModelFileError,
    ModelSpecError,
    NestingError,
    ParseError,
    PredictionError,
    ResourceError,
    SchemaError,
    ValidationError,
)
from .estimation import FittedModel, fit, maximize, report, starting_values
from .families import Family, LinearPredictorSpec, cum_hazard, eta, log_hazard, numeric_cum_hazard
from .likelihood import (
    LikelihoodContext,
    ThetaVector,
    cluster_log_likelihood,
    subject_log_density,
    total_log_likelihood,
)
from .model import ModelSpec, RandomEquation, TvcSpec, compile_design
from .modelfile import load_model, save_model
from .prediction import PredictionRequest, delta_ci, predict
from .quadrature import (
    IntegrationSettings,
    NodeSet,
    adapt_cluster,
    gauss_hermite,
    gauss_legendre,
    mc_draws,
    tensor_nodes,
)
from .random_effects import (
    CovarianceStructure,
    REDistribution,
    assemble_sigma,
    logdensity_gaussian,
    logdensity_t,
)
from .simulate import SimSpec, simulate_clustered, simulate_times
from .splines import KnotVector, SplineBasis, place_default_knots, rcs_deriv, rcs_eval

__version__ = "0.1.0"

__all__ = [
    "Dataset",
    "SurvivalRecord",
    "load_csv",
    "declare_survival",
    "build_hierarchy",
    "write_csv",
    "KnotVector",
    "SplineBasis",
    "place_default_knots",
    "rcs_eval",
    "rcs_deriv",
    "Family",
    "LinearPredictorSpec",
    "eta",
    "log_hazard",
    "cum_hazard",
    "numeric_cum_hazard",
    "CovarianceStructure",
    "REDistribution",
    "assemble_sigma",
    "logdensity_gaussian",
    "logdensity_t",
    "IntegrationSettings",
    "NodeSet",
    "gauss_hermite",
    "tensor_nodes",
    "adapt_cluster",
    "mc_draws",
    "gauss_legendre",
    "ThetaVector",
    "LikelihoodContext",
    "subject_log_density",
    "cluster_log_likelihood",
    "total_log_likelihood",
    "ModelSpec",
    "TvcSpec",
    "RandomEquation",
    "compile_design",
    "FittedModel",
    "fit",
    "maximize",
    "starting_values",
    "report",
    "PredictionRequest",
    "predict",
    "delta_ci",
    "SimSpec",
    "simulate_times",
    "simulate_clustered",
    "save_model",
    "load_model",
    "MlsurvError",
    "SchemaError",
    "ParseError",
    "ValidationError",
    "NestingError",
    "ModelSpecError",
    "PredictionError",
    "ModelFileError",
    "ConvergenceError",
    "ResourceError",
]
