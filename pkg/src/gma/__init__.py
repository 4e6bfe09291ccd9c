"""Granger mediation analysis for treatment, mediator and outcome time series."""

__version__ = "0.1.0"

from .ar import MarSpec, NoiseCov, solve_transition, stationary_covariance
from .errors import ConvergenceError, DataError, GMAError, NumericalError
from .multilevel import MultiSubjectDataset, profile_delta_bcd, profile_delta_ts
from .single import PathCoefficients, SubjectSeries, fit_cmle, indirect_effect, sensitivity_curve

__all__ = [
    "ConvergenceError", "DataError", "GMAError", "MarSpec", "MultiSubjectDataset", "NoiseCov",
    "NumericalError", "PathCoefficients", "SubjectSeries", "fit_cmle", "indirect_effect",
    "profile_delta_bcd", "profile_delta_ts", "sensitivity_curve", "solve_transition",
    "stationary_covariance",
]
