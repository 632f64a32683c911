"""Dense linear-algebra substrate.

Matrices are plain 2-D float64 ``numpy`` arrays. Tokens are columns: queries and
keys are ``(m, N)``, values are ``(d, N)``.
"""
from __future__ import annotations

import numpy as np

from .errors import NonFiniteError, ParameterError, ShapeError

__all__ = [
    "as_matrix",
    "as_vector",
    "check_finite",
    "matmul",
    "pairwise_sq_dist",
    "softmax_rows",
    "logsumexp_rows",
]


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {arr.shape}")
    return arr


def as_vector(v, name: str = "vector") -> np.ndarray:
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim != 1:
        raise ShapeError(f"{name} must be 1-D, got shape {arr.shape}")
    return arr


def check_finite(a: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(a)):
        raise NonFiniteError(f"non-finite values in {what}")
    return a


def matmul(a, b) -> np.ndarray:
    """Matrix product ``a @ b`` with shape validation."""
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: {a.shape} x {b.shape}")
    return check_finite(a @ b, "matmul")


def pairwise_sq_dist(q, k) -> np.ndarray:
    """Squared Euclidean distances between token columns.

    ``C[i, j] = ||q[:, i] - k[:, j]||^2``. Computed from explicit differences
    rather than the Gram expansion so the diagonal is exactly zero when
    ``q is k`` and no entry goes negative.
    """
    q = as_matrix(q, "q")
    k = as_matrix(k, "k")
    if q.shape[0] != k.shape[0]:
        raise ShapeError(f"feature dims differ: {q.shape[0]} vs {k.shape[0]}")
    n, m = q.shape[1], k.shape[1]
    out = np.zeros((n, m))
    # One feature row at a time keeps memory at O(N*M).
    for row_q, row_k in zip(q, k):
        diff = row_q[:, None] - row_k[None, :]
        out += diff * diff
    return check_finite(out, "pairwise_sq_dist")


def softmax_rows(m, scale: float = 1.0) -> np.ndarray:
    """Row-wise softmax of ``m / scale``.

    ``scale`` acts as a division temperature. Pass negated inputs to get
    ``exp(-x / scale)`` weighting.
    """
    m = as_matrix(m, "m")
    if not scale > 0:
        raise ParameterError(f"scale must be > 0, got {scale}")
    z = m / scale
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return check_finite(e / e.sum(axis=1, keepdims=True), "softmax_rows")


def logsumexp_rows(m) -> np.ndarray:
    """``log(sum(exp(m), axis=1))`` as an ``(rows, 1)`` column vector."""
    m = as_matrix(m, "m")
    top = m.max(axis=1, keepdims=True)
    return check_finite(top + np.log(np.exp(m - top).sum(axis=1, keepdims=True)), "logsumexp_rows")
