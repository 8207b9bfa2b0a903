"""Linearized (LLA) and quadratic (QLA) Laplace approximations for small MLP regressors."""

from .curvature import CurvatureOperator, RefinedFactor, power_iteration, refined_factor, refined_factors
from .data import GapSplit, RegressionDataset, gap_splits, load_csv, standardize
from .laplace import (IsotropicPrior, LowRankPosterior, PredictiveGaussian, build_lla_posterior,
                      build_qla_posterior, fit_hyperparameters, glm_predictive, glm_predictive_batch,
                      log_marginal_likelihood,
                      posterior_quadform, qte_predictive_diagnostic)
from .likelihood import GaussianLikelihood
from .metrics import MetricReport, crps, nll
from .nnet import NetworkSpec, dense_hessian, forward, hvp, jacobian
from .train import TrainConfig, inner_cv_select, train_map

__version__ = "0.1.0"
