"""Bounded search spaces mapped to the unit cube."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import yaml
from scipy.stats import qmc

from ..errors import ConfigError, ValidationError
from ..numerics import Rng

KINDS = ("continuous", "continuous-log10", "integer")


@dataclass(frozen=True)
class Dimension:
    """One search dimension.

    For ``continuous-log10`` the bounds are exponents: ``low=-4, high=-1``
    spans values 1e-4 to 1e-1 uniformly in log space.
    """

    name: str
    kind: str
    low: float
    high: float

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"dimension {self.name!r}: kind must be one of {KINDS}, got {self.kind!r}")
        if not (math.isfinite(self.low) and math.isfinite(self.high)) or not self.low < self.high:
            raise ConfigError(f"dimension {self.name!r}: need finite low < high, got [{self.low}, {self.high}]")
        if self.kind == "integer" and (self.low != int(self.low) or self.high != int(self.high)):
            raise ConfigError(f"dimension {self.name!r}: integer bounds must be whole numbers")

    def from_unit(self, u: float):
        u = min(max(float(u), 0.0), 1.0)
        t = self.low + u * (self.high - self.low)
        if self.kind == "continuous-log10":
            return 10.0 ** t
        if self.kind == "integer":
            return int(np.rint(t))
        return t

    def to_unit(self, value) -> float:
        t = math.log10(value) if self.kind == "continuous-log10" else float(value)
        if not self.low - 1e-9 <= t <= self.high + 1e-9:
            raise ValidationError(f"{self.name}={value} outside [{self.low}, {self.high}]")
        return min(max((t - self.low) / (self.high - self.low), 0.0), 1.0)

    def snap(self, u: float) -> float:
        """Move ``u`` onto the nearest representable point (integers only)."""
        if self.kind != "integer":
            return min(max(float(u), 0.0), 1.0)
        return self.to_unit(self.from_unit(u))


class HyperSpace:
    def __init__(self, dimensions):
        self.dimensions = tuple(dimensions)
        if not self.dimensions:
            raise ConfigError("search space needs at least one dimension")
        names = [d.name for d in self.dimensions]
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate dimension names in {names}")

    def __len__(self):
        return len(self.dimensions)

    def __repr__(self):
        return f"HyperSpace({list(self.dimensions)!r})"

    @property
    def names(self) -> list[str]:
        return [d.name for d in self.dimensions]

    def _check(self, u) -> np.ndarray:
        u = np.asarray(u, dtype=np.float64)
        if u.shape != (len(self),):
            raise ValidationError(f"expected a point of dimension {len(self)}, got shape {u.shape}")
        return u

    def denormalize(self, u) -> dict:
        u = self._check(u)
        return {d.name: d.from_unit(v) for d, v in zip(self.dimensions, u)}

    def normalize(self, values: dict) -> np.ndarray:
        missing = [n for n in self.names if n not in values]
        if missing:
            raise ValidationError(f"missing values for {missing}")
        return np.array([d.to_unit(values[d.name]) for d in self.dimensions])

    def snap(self, u) -> np.ndarray:
        u = self._check(u)
        return np.array([d.snap(v) for d, v in zip(self.dimensions, u)])

    def snap_many(self, points) -> np.ndarray:
        points = np.clip(np.asarray(points, dtype=np.float64), 0.0, 1.0)
        out = points.copy()
        for j, d in enumerate(self.dimensions):
            if d.kind == "integer":
                span = d.high - d.low
                out[:, j] = (np.rint(d.low + points[:, j] * span) - d.low) / span
        return out

    def sobol(self, n: int, rng: Rng) -> np.ndarray:
        """First ``n`` points of a scrambled Sobol sequence, snapped."""
        m = max(0, math.ceil(math.log2(max(n, 1))))
        pts = qmc.Sobol(len(self), scramble=True, seed=rng.generator).random_base2(m)[:n]
        return self.snap_many(pts)

    def to_dict(self) -> dict:
        return {"dimensions": [
            {"name": d.name, "kind": d.kind, "low": d.low, "high": d.high} for d in self.dimensions]}

    @classmethod
    def from_dict(cls, data) -> "HyperSpace":
        items = data.get("dimensions") if isinstance(data, dict) else data
        if not isinstance(items, list):
            raise ConfigError("search space must be a list of dimensions or a mapping with 'dimensions'")
        dims = []
        for i, item in enumerate(items):
            try:
                dims.append(Dimension(str(item["name"]), str(item["kind"]),
                                      float(item["low"]), float(item["high"])))
            except (KeyError, TypeError, ValueError) as exc:
                raise ConfigError(f"dimension {i}: {exc}") from None
        return cls(dims)


def load_space(path) -> HyperSpace:
    """Read a YAML search-space file (see :meth:`HyperSpace.from_dict`)."""
    with open(path, encoding="utf-8") as fh:
        try:
            data = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: {exc}") from None
    return HyperSpace.from_dict(data)


def default_cnn_space() -> HyperSpace:
    """The training search box: lr, weight decay, momentum and batch size."""
    return HyperSpace([
        Dimension("learning_rate", "continuous-log10", -4.0, -1.0),
        Dimension("weight_decay", "continuous-log10", -6.0, -2.0),
        Dimension("momentum", "continuous", 0.0, 0.99),
        Dimension("batch_size", "integer", 16, 256),
    ])
