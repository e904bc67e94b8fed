"""Master loop: propose points, farm them out to workers, record results."""

from __future__ import annotations

import logging
import math
import time
from concurrent.futures import FIRST_COMPLETED, ProcessPoolExecutor, ThreadPoolExecutor, wait

import numpy as np

from ..errors import ValidationError
from ..numerics import Rng
from .acquisition import propose_next
from .gp import gp_fit
from .space import HyperSpace
from .store import Trial, TrialStore

log = logging.getLogger(__name__)

_DESIGN, _PROPOSE, _TRIAL = 1, 2, 3


def _stream(rng: Rng, purpose: int, index: int = 0) -> Rng:
    # independent, reproducible sub-streams keyed by (base seed, purpose, index)
    state = np.random.SeedSequence([rng.seed, purpose, index]).generate_state(1, np.uint64)
    return Rng(int(state[0]))


def n_initial(space: HyperSpace) -> int:
    return max(5, len(space) + 1)


def _evaluate(objective, values, seed):
    start = time.perf_counter()
    try:
        loss = float(objective(values, seed))
        error = None
        if not math.isfinite(loss):
            loss, error = math.inf, f"non-finite loss {loss}"
    except Exception as exc:  # a failing trial must not stop the search
        loss, error = math.inf, f"{type(exc).__name__}: {exc}"
    return loss, error, time.perf_counter() - start


def _propose(space, done, pending, trial_id, rng, design):
    """Point for ``trial_id``: space-filling design first, then EI."""
    if trial_id < len(design) or not done:
        if trial_id < len(design):
            return design[trial_id]
        return space.sobol(1, _stream(rng, _PROPOSE, trial_id))[0]
    pts = np.array([t.point for t in done])
    losses = np.array([t.loss for t in done])
    model = gp_fit(pts, losses)
    best = float(losses.min())
    if pending:
        # fantasise pending trials at the current posterior mean
        pend = np.array(pending)
        mean, _ = model.predict(pend)
        model = model.with_observations(pend, mean)
    return propose_next(model, space, _stream(rng, _PROPOSE, trial_id), best_loss=best)


def run_optimization(space: HyperSpace, objective, budget: int, parallelism: int = 1,
                     store: TrialStore | None = None, rng: Rng | None = None,
                     executor: str = "process", callback=None) -> Trial:
    """Minimise ``objective(values, seed) -> loss`` over ``space``.

    Trials already in ``store`` count against ``budget``; trials left running
    by an interrupted run are evaluated again under their original id, point
    and seed. Returns the finished trial with the lowest loss (or, if every
    trial failed, the first one).

    ``executor`` selects worker processes (``"process"``; the objective must
    be picklable) or threads (``"thread"``). With ``parallelism == 1`` the
    objective runs in the calling process and the run is deterministic.
    """
    if budget < 1 or parallelism < 1:
        raise ValidationError("budget and parallelism must be at least 1")
    rng = rng or Rng(0)
    history = store.load() if store is not None else []
    for t in history:
        if len(t.point) != len(space):
            raise ValidationError(f"store trial {t.id} has {len(t.point)} coordinates, space has {len(space)}")
    trials = {t.id: t for t in history}
    stale = [t for t in history if not t.consumed]
    next_id = max(trials, default=-1) + 1
    design = space.sobol(n_initial(space), _stream(rng, _DESIGN))

    def record(trial):
        trials[trial.id] = trial
        if store is not None:
            store.append(trial)

    def consumed():
        return sum(t.consumed for t in trials.values())

    pool = None
    if parallelism > 1:
        cls = ProcessPoolExecutor if executor == "process" else ThreadPoolExecutor
        pool = cls(max_workers=parallelism)
    running: dict = {}  # future or trial id -> Trial
    try:
        while consumed() < budget:
            # fill free worker slots
            while len(running) < parallelism and consumed() + len(running) < budget:
                if stale:
                    trial = stale.pop(0)
                else:
                    done = [t for t in trials.values() if t.finished_ok]
                    pending = [t.point for t in running.values()]
                    point = _propose(space, done, pending, next_id, rng, design)
                    trial = Trial(next_id, [float(v) for v in point], space.denormalize(point),
                                  seed=_stream(rng, _TRIAL, next_id).seed)
                    next_id += 1
                trial.status, trial.started = "running", time.time()
                record(trial)
                if pool is None:
                    running[trial.id] = trial
                    break
                fut = pool.submit(_evaluate, objective, dict(trial.values), trial.seed)
                running[fut] = trial
            if pool is None:
                (tid, trial), = running.items()
                outcomes = [(trial, _evaluate(objective, dict(trial.values), trial.seed))]
                running.clear()
            else:
                finished, _ = wait(list(running), return_when=FIRST_COMPLETED)
                finished = sorted(finished, key=lambda f: running[f].id)
                outcomes = [(running.pop(f), f.result()) for f in finished]
            for trial, (loss, error, wall) in outcomes:
                trial.loss, trial.error, trial.wall_time = loss, error, wall
                trial.status = "done" if error is None else "failed"
                trial.finished = time.time()
                record(trial)
                if error:
                    log.warning("trial %d failed: %s", trial.id, error)
                if callback is not None:
                    callback(trial)
    finally:
        if pool is not None:
            pool.shutdown(wait=True, cancel_futures=True)

    return best_trial(list(trials.values()))


def best_trial(trials) -> Trial:
    done = [t for t in trials if t.finished_ok]
    if done:
        return min(done, key=lambda t: (t.loss, t.id))
    if not trials:
        raise ValidationError("no trials")
    return min(trials, key=lambda t: t.id)


def best_so_far(trials) -> list[float]:
    """Running minimum of the loss in completion order (failed trials count as inf)."""
    order = sorted((t for t in trials if t.consumed), key=lambda t: (t.finished or 0.0, t.id))
    out, best = [], math.inf
    for t in order:
        best = min(best, t.loss if t.loss is not None else math.inf)
        out.append(best)
    return out
