"""Linear mixed models with scale mixtures of skew-normal distributions and serially correlated errors."""

from .dependence import DependenceSpec, build_corr, yule_walker_acf
from .estimate import FitOptions, FitResult, fit, initialize
from .estimator import SmsnLmmRegressor
from .exceptions import (
    DesignRankError,
    InvalidGrid,
    MomentUndefined,
    NonStationary,
    NotNested,
    SingularDispersion,
    SingularInformation,
    SmsnLmmError,
    UnequalLengths,
    ValidationError,
)
from .inference import inference_report, lr_test, score, skewness_lrt, standard_errors
from .mixing import MixingFamily, SmsnParams, centering_c, k1, k2, mahalanobis_cdf, smsn_logpdf, smsn_sample
from .model import LongitudinalDataset, SubjectBlock, ThetaParams, marginal_loglik, validate
from .posthoc import eb_random_effects, healy_coordinates, mahalanobis, mc_envelope, predict_future, residual_acf

__version__ = "0.1.0"

__all__ = [
    "DependenceSpec",
    "build_corr",
    "yule_walker_acf",
    "FitOptions",
    "FitResult",
    "fit",
    "initialize",
    "SmsnLmmRegressor",
    "DesignRankError",
    "InvalidGrid",
    "MomentUndefined",
    "NonStationary",
    "NotNested",
    "SingularDispersion",
    "SingularInformation",
    "SmsnLmmError",
    "UnequalLengths",
    "ValidationError",
    "inference_report",
    "lr_test",
    "score",
    "skewness_lrt",
    "standard_errors",
    "MixingFamily",
    "SmsnParams",
    "centering_c",
    "k1",
    "k2",
    "mahalanobis_cdf",
    "smsn_logpdf",
    "smsn_sample",
    "LongitudinalDataset",
    "SubjectBlock",
    "ThetaParams",
    "marginal_loglik",
    "validate",
    "eb_random_effects",
    "healy_coordinates",
    "mahalanobis",
    "mc_envelope",
    "predict_future",
    "residual_acf",
]
