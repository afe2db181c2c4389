"""Dense float64 linear algebra, seeded RNG and weight initializers.

Matrices are plain 2-D ``numpy.ndarray`` objects with dtype float64 in C
(row-major) order. ``matmul`` has two backends:

``"ordered"`` (default)
    Every output entry is accumulated left to right over the inner index,
    one multiply and one add per step, starting from 0.0. The result is
    bit-identical to a naive triple loop in Python.
``"blas"``
    Delegates to ``numpy.matmul``. Much faster, deterministic on a given
    machine and thread count, but not bit-identical to the triple loop.

Training and the experiment runner switch to ``"blas"`` with
:func:`use_backend`.
"""
from __future__ import annotations

import contextlib
import math
from typing import Iterator

import numpy as np

RNG_ALGORITHM = "PCG64"

_BACKENDS = ("ordered", "blas")
_backend = "ordered"


class ShapeError(ValueError):
    """Raised when operand dimensions do not line up."""


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    if type(a) is np.ndarray and a.ndim == 2 and a.dtype == np.float64:
        return a
    m = np.ascontiguousarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {m.shape}")
    return m


def get_backend() -> str:
    return _backend


@contextlib.contextmanager
def use_backend(name: str) -> Iterator[None]:
    """Temporarily select the matmul backend (``"ordered"`` or ``"blas"``)."""
    global _backend
    if name not in _BACKENDS:
        raise ValueError(f"unknown matmul backend {name!r}")
    previous = _backend
    _backend = name
    try:
        yield
    finally:
        _backend = previous


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    if _backend == "blas":
        return np.ascontiguousarray(a @ b)
    out = np.zeros((a.shape[0], b.shape[1]))
    for k in range(a.shape[1]):
        out += a[:, k, None] * b[None, k, :]
    return out


class Rng:
    """Seeded random source (numpy PCG64 seeded through ``SeedSequence``).

    Extra integers in ``key`` derive independent streams, e.g.
    ``Rng(seed, rep, model_index)``.
    """

    algorithm = RNG_ALGORITHM

    def __init__(self, seed: int, *key: int):
        self.seed = int(seed)
        self.key = tuple(int(k) for k in key)
        entropy = [self.seed & 0xFFFFFFFFFFFFFFFF, *self.key]
        self._gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))

    def uniform(self, low: float, high: float, size) -> np.ndarray:
        return self._gen.uniform(low, high, size)

    def normal(self, size, loc: float = 0.0, scale: float = 1.0) -> np.ndarray:
        return self._gen.normal(loc, scale, size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size)

    def spawn(self, *key: int) -> "Rng":
        return Rng(self.seed, *self.key, *key)


def kaiming_uniform(rng: Rng, rows: int, cols: int, fan_in: int) -> np.ndarray:
    """Entries i.i.d. uniform on ``[-sqrt(6/fan_in), sqrt(6/fan_in)]``."""
    if fan_in < 1:
        raise ValueError("fan_in must be >= 1")
    bound = math.sqrt(6.0 / fan_in)
    return np.ascontiguousarray(rng.uniform(-bound, bound, (rows, cols)))


def zeros(rows: int, cols: int) -> np.ndarray:
    if rows < 0 or cols < 0:
        raise ValueError("dimensions must be non-negative")
    return np.zeros((rows, cols))


def softmax(v) -> np.ndarray:
    """Softmax along the last axis with max subtraction."""
    v = np.asarray(v, dtype=np.float64)
    if v.size == 0 or v.shape[-1] == 0:
        raise ValueError("softmax of an empty vector")
    e = np.exp(v - v.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def relu(m: np.ndarray) -> np.ndarray:
    return np.maximum(m, 0.0)


def argmax_first(v) -> int:
    """Index of the maximum; ties resolve to the lowest index."""
    v = np.asarray(v, dtype=np.float64)
    if v.size == 0:
        raise ValueError("argmax of an empty vector")
    # np.argmax already returns the first occurrence
    return int(np.argmax(v))
