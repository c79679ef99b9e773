"""Automatic debiased machine learning.

Cross-fitted, orthogonalized estimates of linear (and, through GMM, nonlinear)
functionals of a regression, with the Riesz representer learned directly from
the functional by minimum-distance Lasso or Dantzig programs.
"""

from .data import DataError, Dataset, FoldPlan, load_csv, make_folds, write_csv
from .dictionary import Dictionary, PanelDictionary, parse_dictionary
from .estimator import (AutoDML, EstimateReport, FoldFailure, TransformReport,
                        estimate, regression_decomposition, transform_att,
                        transform_elasticities, transform_elasticity,
                        variance_clustered)
from .functionals import (AEVBound, ATE, AvgDerivative, CrossAverage, PolicyEffect,
                          RegressionMoment, Transport, make_functional)
from .gmm import BinaryChoice, DebiasedGMM, LinearMomentModel, fit_gmm
from .regression import ExternalFit, FunctionFit, LassoMDRegressor, fit_ols, fit_regression_lasso
from .riesz import (DantzigConfig, DantzigMDRiesz, LassoMDConfig, LassoMDRiesz,
                    fit_dantzig_md, fit_lasso_md, theoretical_r_L)

__version__ = "0.1.0"

__all__ = [
    "AEVBound", "ATE", "AutoDML", "AvgDerivative", "BinaryChoice", "CrossAverage",
    "DantzigConfig", "DantzigMDRiesz", "DataError", "Dataset", "DebiasedGMM",
    "Dictionary", "EstimateReport", "ExternalFit", "FoldFailure", "FoldPlan",
    "FunctionFit", "LassoMDConfig", "LassoMDRegressor", "LassoMDRiesz",
    "LinearMomentModel", "PanelDictionary", "PolicyEffect", "RegressionMoment",
    "TransformReport", "Transport", "estimate", "fit_dantzig_md", "fit_gmm",
    "fit_lasso_md", "fit_ols", "fit_regression_lasso", "load_csv", "make_folds",
    "make_functional", "parse_dictionary", "regression_decomposition",
    "theoretical_r_L", "transform_att", "transform_elasticities",
    "transform_elasticity", "variance_clustered", "write_csv",
]
