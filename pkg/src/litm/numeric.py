"""Squared Euclidean distances and the seeded random source shared by every module.

Everything here works in float64. Embeddings are never L2-normalised.
"""
from __future__ import annotations

import numpy as np

from .errors import DimensionError


def as_matrix(xs, name: str = "xs") -> np.ndarray:
    """Stack a list of equal-length vectors (or a 2-D array) into an (n, d) float64 array."""
    try:
        arr = np.asarray(xs, dtype=np.float64)
    except ValueError as exc:  # ragged input
        raise DimensionError(f"{name}: vectors have differing dimensions") from exc
    if arr.ndim == 1:
        arr = arr[None, :] if arr.size else arr.reshape(0, 0)
    if arr.ndim != 2:
        raise DimensionError(f"{name}: expected a list of vectors, got shape {arr.shape}")
    return arr


def squared_euclidean(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 1 or a.shape != b.shape:
        raise DimensionError(f"dimension mismatch: {a.shape} vs {b.shape}")
    diff = a - b
    return float(np.sum(diff * diff))


def cross_distances(xs, ys) -> np.ndarray:
    """(n, m) matrix of squared distances between rows of ``xs`` and rows of ``ys``.

    Each entry is formed as ``sum((x - y)**2)`` rather than through the
    ``|x|^2 + |y|^2 - 2 x.y`` expansion, so it matches :func:`squared_euclidean`
    bit for bit and is never negative.
    """
    xs = as_matrix(xs, "xs")
    ys = as_matrix(ys, "ys")
    if xs.shape[1] != ys.shape[1]:
        raise DimensionError(f"dimension mismatch: {xs.shape[1]} vs {ys.shape[1]}")
    out = np.empty((xs.shape[0], ys.shape[0]))
    for i, x in enumerate(xs):
        diff = ys - x
        out[i] = np.sum(diff * diff, axis=1)
    return out


def pairwise_distances(xs) -> np.ndarray:
    """Symmetric (n, n) squared-distance matrix with an exact zero diagonal."""
    xs = as_matrix(xs)
    if xs.shape[0] == 0:
        raise DimensionError("pairwise_distances needs at least one vector")
    dist = cross_distances(xs, xs)
    # (x - y)**2 == (y - x)**2 exactly, so this only pins the diagonal
    np.fill_diagonal(dist, 0.0)
    return dist


class RandomSource:
    """Seeded stream of random draws (PCG64 under the hood).

    A RandomSource is owned by one consumer at a time; pass it explicitly to
    every stochastic call. ``child(key)`` derives an independent stream so that
    e.g. parameter init and batch sampling do not perturb each other.
    """

    def __init__(self, seed: int):
        if not isinstance(seed, (int, np.integer)) or isinstance(seed, bool):
            raise TypeError("seed must be an integer")
        self.seed = int(seed) & 0xFFFF_FFFF_FFFF_FFFF
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def __repr__(self):
        return f"RandomSource(seed={self.seed})"

    def child(self, key: int) -> "RandomSource":
        mixed = np.random.SeedSequence([self.seed, int(key)]).generate_state(2, dtype=np.uint32)
        return RandomSource((int(mixed[0]) << 32) | int(mixed[1]))

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self._gen.normal(loc, scale, size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def choice(self, a, size=None, replace=True):
        return self._gen.choice(a, size=size, replace=replace)

    def permutation(self, x):
        return self._gen.permutation(x)

    def random(self, size=None):
        return self._gen.random(size)
