"""Bayesian hyperparameter search with a GP surrogate and expected improvement."""

from .acquisition import propose_next
from .gp import (GpFitError, GpModel, ei_from_moments, expected_improvement, gp_fit,
                 gp_posterior, se_kernel)
from .loop import best_so_far, best_trial, n_initial, run_optimization
from .space import Dimension, HyperSpace, default_cnn_space, load_space
from .store import Trial, TrialStore, trial_store_append, trial_store_load

__all__ = [
    "Dimension", "GpFitError", "GpModel", "HyperSpace", "Trial", "TrialStore",
    "best_so_far", "best_trial", "default_cnn_space", "ei_from_moments",
    "expected_improvement", "gp_fit", "gp_posterior", "load_space", "n_initial",
    "propose_next", "run_optimization", "se_kernel", "trial_store_append",
    "trial_store_load",
]
