"""Dense linear-algebra primitives shared by every other module.

Arrays are stored in float32 (row-major) while every reduction is
accumulated in float64 with a fixed ascending-index order, so repeated
calls -- sequential or fanned out across workers -- produce bitwise
identical results.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .errors import ParameterError, ShapeError, ValidationError

EPS = 1e-12


def as_matrix(data) -> np.ndarray:
    """Coerce ``data`` to a finite, C-contiguous float32 matrix."""
    m = np.ascontiguousarray(data, dtype=np.float32)
    if m.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got ndim={m.ndim}")
    if not np.all(np.isfinite(m)):
        raise ValidationError("matrix contains non-finite values")
    return m


def as_vector(data) -> np.ndarray:
    """Coerce ``data`` to a finite, contiguous float32 vector."""
    v = np.ascontiguousarray(data, dtype=np.float32)
    if v.ndim != 1:
        raise ShapeError(f"expected a 1-D vector, got ndim={v.ndim}")
    if not np.all(np.isfinite(v)):
        raise ValidationError("vector contains non-finite values")
    return v


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with float64 accumulation, returned as float32.

    Uses ``einsum`` rather than BLAS so the inner sums run in ascending
    index order and the result is reproducible bit-for-bit.
    """
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError("matmul expects two 2-D arrays")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions differ: {a.shape} x {b.shape}")
    out = np.einsum("ij,jk->ik", a.astype(np.float64), b.astype(np.float64))
    return out.astype(np.float32)


def l2_norm(v: np.ndarray) -> float:
    """Euclidean norm accumulated in float64."""
    v64 = v.astype(np.float64)
    return float(np.sqrt(np.einsum("i,i->", v64, v64)))


def l2_normalize(v: np.ndarray, eps: float = EPS) -> np.ndarray:
    """Scale ``v`` to unit norm; vectors shorter than ``eps`` pass through
    the guard and the zero vector maps to itself."""
    if v.ndim != 1:
        raise ShapeError("l2_normalize expects a 1-D vector")
    v64 = v.astype(np.float64)
    return (v64 / max(l2_norm(v), eps)).astype(np.float32)


def cosine(a: np.ndarray, b: np.ndarray, eps: float = EPS) -> float:
    """Cosine similarity with an ``eps`` guard on the norm product."""
    if a.shape != b.shape or a.ndim != 1:
        raise ShapeError(f"cosine expects matching vectors, got {a.shape} vs {b.shape}")
    a64 = a.astype(np.float64)
    b64 = b.astype(np.float64)
    dot = float(np.einsum("i,i->", a64, b64))
    return dot / max(l2_norm(a) * l2_norm(b), eps)


def row_softmax(m: np.ndarray, tau: float) -> np.ndarray:
    """Temperature softmax applied independently to each row.

    The max of each row is subtracted before exponentiation; this is
    algebraically a no-op but keeps the computation stable.
    """
    if tau <= 0:
        raise ParameterError(f"softmax temperature must be positive, got {tau}")
    if m.ndim != 2:
        raise ShapeError("row_softmax expects a 2-D matrix")
    a = m.astype(np.float64) / tau
    a -= a.max(axis=1, keepdims=True)
    e = np.exp(a)
    return (e / e.sum(axis=1, keepdims=True)).astype(np.float32)


def top_k_indices(
    scores: Sequence[tuple[str, float]], k: int
) -> list[tuple[str, float]]:
    """The ``min(k, n)`` highest-scoring entries, descending by score.

    Ties break by ascending id so the result does not depend on the
    order of the input sequence.
    """
    if k < 1:
        raise ParameterError(f"k must be at least 1, got {k}")
    ranked = sorted(scores, key=lambda item: (-item[1], item[0]))
    return [(i, float(s)) for i, s in ranked[:k]]
