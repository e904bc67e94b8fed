"""Dense float64 arrays, seeded random streams and elementary arithmetic.

Tensors are plain ``numpy.ndarray`` objects of dtype float64 in C (row-major)
order. Image-like tensors use the ``(channels, height, width)`` layout and
batches prepend a leading sample axis.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .errors import ShapeError

DTYPE = np.float64


class Rng:
    """Deterministic random stream.

    Backed by numpy's PCG64 bit generator, whose output for a given seed is
    fixed across platforms and numpy releases (NEP 19 stream policy).
    """

    def __init__(self, seed: int = 0):
        seed = int(seed)
        if not 0 <= seed < 2**64:
            raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
        self.seed = seed
        self.generator = np.random.Generator(np.random.PCG64(seed))

    def child(self, index: int) -> "Rng":
        """Independent stream for sub-task ``index`` (seed + index, wrapped)."""
        return Rng((self.seed + int(index)) % 2**64)

    def next_seed(self) -> int:
        return int(self.generator.integers(0, 2**63))

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.generator.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.generator.normal(loc, scale, size)

    def integers(self, low, high=None, size=None):
        return self.generator.integers(low, high, size)

    def permutation(self, n):
        return self.generator.permutation(n)

    def random(self, size=None):
        return self.generator.random(size)

    def __repr__(self):
        return f"Rng(seed={self.seed})"


def _check_shape(shape: Sequence[int]) -> tuple[int, ...]:
    shape = tuple(int(s) for s in shape)
    if not shape or any(s < 1 for s in shape):
        raise ShapeError(f"all extents must be >= 1, got {shape}")
    return shape


def alloc(shape: Sequence[int], fill: float = 0.0) -> np.ndarray:
    """Return a float64 tensor of ``shape`` with every element set to ``fill``."""
    return np.full(_check_shape(shape), fill, dtype=DTYPE)


def dot(a, b) -> float:
    """Inner product of two tensors with equal element count.

    Products are accumulated strictly in ascending flat-index order, so the
    result does not depend on BLAS blocking.
    """
    a = np.asarray(a, dtype=DTYPE).ravel()
    b = np.asarray(b, dtype=DTYPE).ravel()
    if a.size != b.size:
        raise ShapeError(f"dot: element counts differ ({a.size} vs {b.size})")
    if a.size == 0:
        return 0.0
    # add.accumulate is a sequential left fold, unlike add.reduce (pairwise)
    return float(np.add.accumulate(a * b)[-1])


def init_uniform_scaled(shape: Sequence[int], fan_in: int, fan_out: int, rng: Rng) -> np.ndarray:
    """Glorot-uniform initialisation on ``[-L, L]``, ``L = sqrt(6 / (fan_in + fan_out))``."""
    shape = _check_shape(shape)
    if fan_in < 1 or fan_out < 1:
        raise ShapeError(f"fan_in and fan_out must be >= 1, got {fan_in}, {fan_out}")
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    values = rng.uniform(-limit, limit, size=shape)
    return np.clip(values, -limit, limit).astype(DTYPE, copy=False)


def as_tensor(x) -> np.ndarray:
    """Coerce ``x`` to a contiguous float64 array."""
    return np.ascontiguousarray(x, dtype=DTYPE)
