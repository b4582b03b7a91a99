"""Flat-vector float64 arithmetic shared by every other module.

Model weights, update deltas, and gradients are all carried as plain 1-d
float64 numpy arrays.  Every operation here is a pure function over its
inputs and is deterministic: identical inputs give bit-identical outputs
regardless of call site or how many worker threads are running.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "ZeroNormError",
    "as_vector",
    "dot",
    "l2norm",
    "axpy",
    "cosine_similarity",
]


class ZeroNormError(ValueError):
    """Raised when an operation requires a nonzero-norm input."""


def as_vector(values, name: str = "vector") -> np.ndarray:
    """Coerce ``values`` to a 1-d float64 array with finite entries."""
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 1:
        raise ValueError(f"{name} must be 1-d, got shape {v.shape}")
    if v.size < 1:
        raise ValueError(f"{name} must have length >= 1")
    if not np.all(np.isfinite(v)):
        raise ValueError(f"{name} contains non-finite entries")
    return v


def _check_same_length(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape[0] != b.shape[0]:
        raise ValueError(f"length mismatch: {a.shape[0]} vs {b.shape[0]}")


def dot(a, b) -> float:
    """Inner product of two equal-length vectors."""
    av = as_vector(a, "a")
    bv = as_vector(b, "b")
    _check_same_length(av, bv)
    return float(np.dot(av, bv))


def l2norm(a) -> float:
    """Euclidean norm; 0 iff ``a`` is the zero vector."""
    av = as_vector(a, "a")
    return float(np.sqrt(np.dot(av, av)))


def axpy(alpha: float, x, y) -> np.ndarray:
    """Element-wise ``alpha * x + y`` for equal-length vectors."""
    xv = as_vector(x, "x")
    yv = as_vector(y, "y")
    _check_same_length(xv, yv)
    return alpha * xv + yv


def cosine_similarity(a, b) -> float:
    """Cosine of the angle between two nonzero vectors, clamped to [-1, 1].

    The clamp guards the arccos that downstream phase computation applies:
    rounding on near-parallel inputs can push the raw ratio past +/-1.
    """
    av = as_vector(a, "a")
    bv = as_vector(b, "b")
    _check_same_length(av, bv)
    na = float(np.sqrt(np.dot(av, av)))
    nb = float(np.sqrt(np.dot(bv, bv)))
    if na == 0.0 or nb == 0.0:
        raise ZeroNormError("cosine similarity undefined for zero-norm input")
    raw = float(np.dot(av, bv)) / (na * nb)
    return min(1.0, max(-1.0, raw))
