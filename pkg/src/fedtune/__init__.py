"""Federated hyperparameter optimization benchmark: FL simulation, lookup tables,
surrogates, HPO optimizers, FedEx and study statistics."""

from .space import Dimension, FidelityVector, SearchSpace, builtin_space
from .sysmodel import SystemModelParams, course_time, expected_straggler_time, round_time

__version__ = "0.1.0"

__all__ = ["Dimension", "FidelityVector", "SearchSpace", "builtin_space", "SystemModelParams",
           "course_time", "expected_straggler_time", "round_time", "__version__"]
