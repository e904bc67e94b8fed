"""Convolutional classifiers for extreme-weather patches, with synthetic data
generation and Bayesian hyperparameter search."""

from .errors import ConfigError, FormatError, ShapeError, StateError, ValidationError, WeatherCNNError
from .events import EventKind
from .numerics import Rng

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "EventKind", "FormatError", "Rng", "ShapeError", "StateError",
    "ValidationError", "WeatherCNNError", "__version__",
]
