"""Spatial prediction models with leave-one-out quantile-contrast variable importance."""
from .core import Dataset, LinkFunction, Location, Sites, read_dataset_csv, write_dataset_csv
from .covariance import CovarianceParams, FittedCovariance, fit_ml, krige
from .exceptions import (ConfigurationError, ConvergenceError, DegenerateInputError, DomainError,
                         GridShapeError, NumericalRankError, SchemaError, SpatvimError)
from .kernels import BACKEND
from .spatrf import SpatRfHyper, SpatRfModel, fit_spatrf, predict_spatrf
from .ukpls import UkPlsModel, fit_ukpls, predict_ukpls

__all__ = [
    "BACKEND", "ConfigurationError", "ConvergenceError", "CovarianceParams", "Dataset",
    "DegenerateInputError", "DomainError", "FittedCovariance", "GridShapeError", "LinkFunction",
    "Location", "NumericalRankError", "SchemaError", "Sites", "SpatRfHyper", "SpatRfModel",
    "SpatvimError", "UkPlsModel", "fit_ml", "fit_spatrf", "fit_ukpls", "krige", "predict_spatrf",
    "predict_ukpls", "read_dataset_csv", "write_dataset_csv",
]

__version__ = "0.1.0"
