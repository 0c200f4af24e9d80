"""Variational inference for cutting feedback in two-module Bayesian models."""

from cutvi.conflict import conflict_check, imputation_conflict, kl_statistic
from cutvi.core import (
    Block,
    BlockPartition,
    Factor,
    FactorGraph,
    GeneralizedLogit,
    IDENTITY,
    LOG,
    LOGIT,
    Quadratic,
    grad_log_joint,
    log_joint,
    restrict,
)
from cutvi.errors import (
    CutVIError,
    DegenerateCutError,
    NumericError,
    StructureError,
    UnsupportedCheckError,
    UnsupportedModelError,
)
from cutvi.ffvi import GaussianVariational, fit, fit_cut, kl_between_gaussians
from cutvi.hybrid import HybridModel, run_algorithm1, sample_discrete_conditional, stage2_with_imputation
from cutvi.mfvb import cavi_update, cut_marginal, run_cavi, run_cut_cavi

__version__ = "0.1.0"
