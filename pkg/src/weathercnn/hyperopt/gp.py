"""Gaussian-process surrogate with a squared-exponential ARD kernel.

Observed losses are standardised before fitting; every public quantity
(posterior mean, variance, expected improvement) is reported back on the
original loss scale.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_solve, solve_triangular
from scipy.optimize import minimize
from scipy.special import ndtr

from ..errors import ValidationError, WeatherCNNError
from ..numerics import Rng

NOISE_FLOOR = 1e-6
JITTERS = (0.0, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6)
# search bounds in standardised units
LENGTH_BOUNDS = (1e-2, 1e1)
SIGNAL_BOUNDS = (1e-2, 1e2)
NOISE_BOUNDS = (NOISE_FLOOR, 1.0)
N_RESTARTS = 4
_LOG_2PI = np.log(2.0 * np.pi)


class GpFitError(WeatherCNNError):
    """The covariance matrix stayed indefinite after the largest jitter."""


def se_kernel(a, b, length_scales, signal_var) -> np.ndarray:
    """Squared-exponential covariance between row sets ``a`` and ``b``."""
    a = np.asarray(a, dtype=np.float64) / length_scales
    b = np.asarray(b, dtype=np.float64) / length_scales
    sq = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * a @ b.T
    return signal_var * np.exp(-0.5 * np.maximum(sq, 0.0))


def _cholesky(k):
    n = k.shape[0]
    for jitter in JITTERS:
        try:
            return np.linalg.cholesky(k + jitter * np.eye(n)), jitter
        except np.linalg.LinAlgError:
            continue
    raise GpFitError(f"covariance not positive definite even with jitter {JITTERS[-1]}")


@dataclass
class GpModel:
    points: np.ndarray  # (n, d) in the unit cube
    losses: np.ndarray  # raw observed losses
    y_mean: float
    y_scale: float
    length_scales: np.ndarray
    signal_var: float
    noise_var: float
    chol: np.ndarray = None
    alpha: np.ndarray = None
    jitter: float = 0.0

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    @property
    def n(self) -> int:
        return self.points.shape[0]

    def _factorize(self):
        y = (self.losses - self.y_mean) / self.y_scale
        k = se_kernel(self.points, self.points, self.length_scales, self.signal_var)
        k[np.diag_indices_from(k)] += self.noise_var
        self.chol, self.jitter = _cholesky(k)
        self.alpha = cho_solve((self.chol, True), y)

    def with_observations(self, points, losses) -> "GpModel":
        """Same hyperparameters and standardisation, extra observations."""
        pts = np.vstack([self.points, np.atleast_2d(points)])
        ys = np.concatenate([self.losses, np.atleast_1d(np.asarray(losses, dtype=np.float64))])
        model = GpModel(pts, ys, self.y_mean, self.y_scale, self.length_scales.copy(),
                        self.signal_var, self.noise_var)
        model._factorize()
        return model

    def predict(self, x):
        """Posterior mean and variance at the rows of ``x`` (raw loss units)."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if x.shape[1] != self.dim:
            raise ValidationError(f"expected points of dimension {self.dim}, got {x.shape[1]}")
        if np.any(x < 0.0) or np.any(x > 1.0) or not np.all(np.isfinite(x)):
            raise ValidationError("query point outside the unit cube")
        ks = se_kernel(x, self.points, self.length_scales, self.signal_var)
        mean = ks @ self.alpha
        v = solve_triangular(self.chol, ks.T, lower=True)
        var = np.maximum(self.signal_var - (v * v).sum(0), 0.0)
        return self.y_mean + self.y_scale * mean, var * self.y_scale ** 2


def _standardize(losses):
    mean = float(losses.mean())
    std = float(losses.std())
    if losses.size == 1 or not std > 0:
        return mean, 1.0
    return mean, std


def _neg_log_marginal(theta, x, y, d):
    """Negative log marginal likelihood and its gradient in log-parameters."""
    ls = np.exp(theta[:d])
    sf2, sn2 = np.exp(theta[d]), np.exp(theta[d + 1])
    n = x.shape[0]
    kf = se_kernel(x, x, ls, sf2)
    k = kf + sn2 * np.eye(n)
    try:
        chol = np.linalg.cholesky(k)
    except np.linalg.LinAlgError:
        return 1e10, np.zeros_like(theta)
    alpha = cho_solve((chol, True), y)
    nll = 0.5 * y @ alpha + np.log(np.diag(chol)).sum() + 0.5 * n * _LOG_2PI
    inner = np.outer(alpha, alpha) - cho_solve((chol, True), np.eye(n))
    grad = np.empty_like(theta)
    for j in range(d):
        diff = (x[:, j, None] - x[None, :, j]) ** 2 / ls[j] ** 2
        grad[j] = -0.5 * np.sum(inner * kf * diff)
    grad[d] = -0.5 * np.sum(inner * kf)
    grad[d + 1] = -0.5 * sn2 * np.trace(inner)
    return nll, grad


def gp_fit(points, losses, length_scales=None, signal_var=None, noise_var=None,
           restarts: int = N_RESTARTS) -> GpModel:
    """Fit a GP to ``points`` (rows in the unit cube) and their ``losses``.

    Hyperparameters left as ``None`` are chosen by maximising the marginal
    likelihood with L-BFGS-B from several starts; any that are given are held
    fixed (a fixed ``noise_var`` may be below the search floor, including 0
    for noiseless interpolation). Losses are centred and scaled by their
    standard deviation; with one observation, or no spread, only centring is
    applied.
    """
    x = np.atleast_2d(np.asarray(points, dtype=np.float64))
    y_raw = np.asarray(losses, dtype=np.float64).reshape(-1)
    if x.shape[0] < 1 or x.shape[0] != y_raw.size:
        raise ValidationError(f"need matching points and losses, got {x.shape[0]} and {y_raw.size}")
    if np.any(x < 0.0) or np.any(x > 1.0) or not np.all(np.isfinite(x)):
        raise ValidationError("observed points must lie in the unit cube")
    if not np.all(np.isfinite(y_raw)):
        raise ValidationError("observed losses must be finite")
    n, d = x.shape
    y_mean, y_scale = _standardize(y_raw)
    y = (y_raw - y_mean) / y_scale

    fixed = {
        "ls": None if length_scales is None else np.broadcast_to(
            np.asarray(length_scales, dtype=np.float64), (d,)).copy(),
        "sf2": signal_var,
        "sn2": noise_var,
    }
    free_ls, free_sf, free_sn = (fixed[k] is None for k in ("ls", "sf2", "sn2"))
    if free_ls or free_sf or free_sn:
        bounds = ([np.log(LENGTH_BOUNDS)] * d + [np.log(SIGNAL_BOUNDS), np.log(NOISE_BOUNDS)])
        lo = np.array([b[0] for b in bounds])
        hi = np.array([b[1] for b in bounds])
        mask = np.array([free_ls] * d + [free_sf, free_sn])
        base = np.concatenate([
            np.log(fixed["ls"]) if not free_ls else np.full(d, np.log(0.3)),
            [np.log(signal_var) if not free_sf else 0.0],
            [np.log(max(noise_var, 1e-300)) if not free_sn else np.log(1e-4)],
        ])

        def objective(free):
            theta = base.copy()
            theta[mask] = free
            f, g = _neg_log_marginal(theta, x, y, d)
            return f, g[mask]

        starts = [base[mask]]
        rng = Rng(0)  # fixed: fitting is a pure function of the data
        for _ in range(max(restarts - 1, 0)):
            starts.append(rng.uniform(lo[mask], hi[mask]))
        best = None
        for s in starts:
            res = minimize(objective, s, jac=True, method="L-BFGS-B",
                           bounds=list(zip(lo[mask], hi[mask])))
            if best is None or res.fun < best.fun:
                best = res
        theta = base.copy()
        theta[mask] = best.x
        fixed = {"ls": np.exp(theta[:d]), "sf2": float(np.exp(theta[d])),
                 "sn2": float(np.exp(theta[d + 1])) if free_sn else float(noise_var)}
    model = GpModel(x, y_raw, y_mean, y_scale, np.asarray(fixed["ls"], dtype=np.float64),
                    float(fixed["sf2"]), float(fixed["sn2"]))
    model._factorize()
    return model


def gp_posterior(model: GpModel, x):
    """Posterior ``(mean, variance)`` at a single point ``x``."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValidationError("gp_posterior takes a single point; use GpModel.predict for batches")
    mean, var = model.predict(x[None, :])
    return float(mean[0]), float(var[0])


def ei_from_moments(mean, std, best):
    """Expected improvement below ``best`` of a normal with ``mean`` and ``std``."""
    mean = np.asarray(mean, dtype=np.float64)
    std = np.asarray(std, dtype=np.float64)
    gain = best - mean
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        z = np.where(std > 0, gain / np.where(std > 0, std, 1.0), 0.0)
        pdf = np.exp(-0.5 * z * z) / np.sqrt(2.0 * np.pi)
    ei = np.where(std > 0, gain * ndtr(z) + std * pdf, np.maximum(gain, 0.0))
    return np.maximum(ei, 0.0)


def expected_improvement(model: GpModel, x, best_loss: float):
    """EI for minimisation at one point (float) or at the rows of a 2-D array."""
    x = np.asarray(x, dtype=np.float64)
    mean, var = model.predict(x)
    ei = ei_from_moments(mean, np.sqrt(var), best_loss)
    return float(ei[0]) if x.ndim == 1 else ei
