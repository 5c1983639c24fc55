"""Mixtures of sparsity-regularized logistic experts for factorial and
forced-choice conjoint experiments: design encoding, fusion penalties,
AECM estimation, BIC-based selection, Louis-information uncertainty, and
per-cluster causal effect estimates."""

__version__ = "0.1.0"

from .design import (
    ConstraintMatrix,
    DesignMatrix,
    FactorSpec,
    build_constraints,
    build_layout,
    encode_factorial,
    encode_forced_choice,
    lift_coefficients,
    project_design,
)
from .engine import EngineOptions, FitResult, ModelState, fit, initialize
from .penalty import (
    PenaltySet,
    build_fusion_penalties,
    expand_log,
    penalty_value,
    propriety_certificate,
    standardization_weights,
)
from .selection import bic, degrees_of_freedom, tune_lambda
from .inference import bind_and_project, delta_method, louis_information
from .simulate import SimDesign, draw_true_coefficients, generate_dataset

__all__ = [
    "__version__",
    "ConstraintMatrix",
    "DesignMatrix",
    "FactorSpec",
    "build_constraints",
    "build_layout",
    "encode_factorial",
    "encode_forced_choice",
    "lift_coefficients",
    "project_design",
    "EngineOptions",
    "FitResult",
    "ModelState",
    "fit",
    "initialize",
    "PenaltySet",
    "build_fusion_penalties",
    "expand_log",
    "penalty_value",
    "propriety_certificate",
    "standardization_weights",
    "bic",
    "degrees_of_freedom",
    "tune_lambda",
    "bind_and_project",
    "delta_method",
    "louis_information",
    "SimDesign",
    "draw_true_coefficients",
    "generate_dataset",
]
