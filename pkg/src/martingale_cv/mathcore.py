"""Random streams, Cholesky factorisation and normal-distribution helpers."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import ndtr

__all__ = [
    "RandomStream",
    "LowerTriangularFactor",
    "CholeskyError",
    "cholesky",
    "standard_normals",
    "normal_cdf",
    "as_generator",
]


@dataclass(frozen=True)
class RandomStream:
    """A reproducible substream of standard normals.

    Backed by the counter-based Philox generator; ``stream_id`` becomes part
    of the seed sequence spawn key, so distinct ids give independent streams
    and a given ``(seed, stream_id)`` pair always yields the same draws.
    """

    seed: int
    stream_id: int = 0

    def __post_init__(self):
        if self.seed < 0 or self.stream_id < 0:
            raise ValueError("seed and stream_id must be non-negative")
        if self.seed >= 2**64 or self.stream_id >= 2**64:
            raise ValueError("seed and stream_id must fit in 64 bits")

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(self.seed, spawn_key=(self.stream_id,))
        return np.random.Generator(np.random.Philox(ss))

    def substream(self, index: int) -> "RandomStream":
        """Derive a child stream, e.g. one per replication or per batch."""
        ss = np.random.SeedSequence(self.seed, spawn_key=(self.stream_id, index))
        return RandomStream(int(ss.generate_state(1, np.uint64)[0]), 0)


def as_generator(stream) -> np.random.Generator:
    """Accept a RandomStream, a Generator or an int seed."""
    if isinstance(stream, np.random.Generator):
        return stream
    if isinstance(stream, RandomStream):
        return stream.generator()
    if isinstance(stream, (int, np.integer)):
        return RandomStream(int(stream)).generator()
    raise TypeError(f"cannot build a generator from {type(stream).__name__}")


def standard_normals(stream, count: int) -> np.ndarray:
    if count < 1:
        raise ValueError("count must be positive")
    return as_generator(stream).standard_normal(count)


def normal_cdf(x):
    """Standard normal distribution function (via the complementary error function)."""
    out = ndtr(np.asarray(x, dtype=np.float64))
    return float(out) if np.ndim(out) == 0 else out


class CholeskyError(np.linalg.LinAlgError):
    def __init__(self, pivot: int, value: float):
        self.pivot = pivot
        self.value = value
        super().__init__(
            f"matrix is not positive definite: pivot {pivot} has value {value:.6g}"
        )


@dataclass(frozen=True)
class LowerTriangularFactor:
    entries: np.ndarray

    @property
    def dimension(self) -> int:
        return self.entries.shape[0]

    def reconstruct(self) -> np.ndarray:
        return self.entries @ self.entries.T

    def solve(self, b: np.ndarray) -> np.ndarray:
        """Solve ``C x = b`` by forward substitution (b may have trailing columns)."""
        return solve_triangular(self.entries, b, lower=True)

    def inverse(self) -> np.ndarray:
        return self.solve(np.eye(self.dimension))


def cholesky(sigma_matrix) -> LowerTriangularFactor:
    """Cholesky-Banachiewicz factorisation ``sigma = C C^T``.

    Raises
    ------
    CholeskyError
        If a non-positive pivot is met; the error carries the pivot index.
    """
    a = np.array(sigma_matrix, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {a.shape}")
    if not np.allclose(a, a.T, rtol=1e-12, atol=0.0):
        raise ValueError("matrix is not symmetric")
    d = a.shape[0]
    c = np.zeros_like(a)
    for i in range(d):
        for j in range(i):
            c[i, j] = (a[i, j] - c[i, :j] @ c[j, :j]) / c[j, j]
        pivot = a[i, i] - c[i, :i] @ c[i, :i]
        if not pivot > 0.0:
            raise CholeskyError(i, float(pivot))
        c[i, i] = np.sqrt(pivot)
    return LowerTriangularFactor(c)
