"""Choosing the next point to evaluate by maximising expected improvement."""

from __future__ import annotations

import numpy as np
from scipy.stats import qmc

from ..numerics import Rng
from .gp import GpModel, expected_improvement
from .space import HyperSpace

N_CANDIDATES = 2048
N_REFINE = 8
REFINE_STEPS = 50
INITIAL_STEP = 0.05


def _hill_climb(model, space, starts, start_ei, best_loss):
    """Coordinate-wise ascent on EI from each row of ``starts`` in lockstep.

    Every climber tries a +/- step along each axis, moves to its best
    neighbour if that improves EI, and otherwise halves its own step.
    """
    x, fx = starts.copy(), np.asarray(start_ei, dtype=np.float64).copy()
    k, d = x.shape
    step = np.full(k, INITIAL_STEP)
    moves = np.concatenate([np.eye(d), -np.eye(d)])  # (2d, d)
    for _ in range(REFINE_STEPS):
        trial = x[:, None, :] + step[:, None, None] * moves[None, :, :]
        trial = space.snap_many(trial.reshape(-1, d)).reshape(k, 2 * d, d)
        ei = expected_improvement(model, trial.reshape(-1, d), best_loss).reshape(k, 2 * d)
        j = np.argmax(ei, axis=1)
        gain = ei[np.arange(k), j]
        better = gain > fx
        x[better] = trial[better, j[better]]
        fx[better] = gain[better]
        step[~better] *= 0.5
    return x, fx


def propose_next(model: GpModel, space: HyperSpace, rng: Rng, best_loss: float | None = None) -> np.ndarray:
    """Return the unit-cube point with the largest expected improvement found.

    EI is evaluated on 2048 scrambled Sobol candidates; the best eight are
    then refined by hill climbing. Ties keep the earlier candidate, so if EI
    is zero everywhere the first candidate is returned.
    """
    if best_loss is None:
        best_loss = float(np.min(model.losses))
    cands = space.snap_many(
        qmc.Sobol(len(space), scramble=True, seed=rng.generator).random_base2(11)[:N_CANDIDATES])
    ei = expected_improvement(model, cands, best_loss)
    order = np.argsort(-ei, kind="stable")[:N_REFINE]
    x, fx = _hill_climb(model, space, cands[order], ei[order], best_loss)
    # first climber wins ties, and it started from the top (lowest-index) candidate
    return space.snap(x[int(np.argmax(fx))])
