"""Estimation under informative Poisson sampling with design weights."""

from .core import (EstimateResult, IsampError, NumericalError, StudyDesign, SurveyData,
                   UnitRecord, ValidationError, linear_regression_target, mean_target,
                   normal_linear_target, validate_dataset)

__version__ = "0.1.0"

__all__ = [
    "EstimateResult", "IsampError", "NumericalError", "StudyDesign", "SurveyData",
    "UnitRecord", "ValidationError", "linear_regression_target", "mean_target",
    "normal_linear_target", "validate_dataset",
]
