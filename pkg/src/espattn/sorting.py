"""Hard argsort permutations and the SoftSort relaxation with its backward pass."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np

from .errors import ParameterError, ShapeError
from .linalg import as_matrix, as_vector, check_finite

SortMode = Literal["soft", "hard"]

__all__ = [
    "SoftPermutation",
    "stable_argsort",
    "hard_argsort_perm",
    "soft_sort",
    "soft_sort_backward",
    "sort_perm",
    "soft_sort_batch",
    "soft_sort_backward_batch",
]


@dataclass(frozen=True)
class SoftPermutation:
    """Row-stochastic ``N x N`` matrix approximating the ascending sort permutation.

    Row ``i`` selects (softly) the index of the ``i``-th smallest entry, so
    ``matrix @ v`` approximates ``sort(v)``.
    """

    matrix: np.ndarray
    temperature: float
    mode: SortMode

    @property
    def n(self) -> int:
        return self.matrix.shape[0]


def stable_argsort(v) -> np.ndarray:
    """Ascending argsort; equal values keep their original index order."""
    return np.argsort(as_vector(v, "v"), kind="stable")


def hard_argsort_perm(v) -> SoftPermutation:
    v = as_vector(v, "v")
    idx = stable_argsort(v)
    p = np.zeros((v.size, v.size))
    p[np.arange(v.size), idx] = 1.0
    return SoftPermutation(p, 0.0, "hard")


def _check_temperature(t: float) -> None:
    if not t > 0:
        raise ParameterError(f"SoftSort temperature must be > 0, got {t}")


def soft_sort(v, t: float) -> SoftPermutation:
    """``softmax_rows(-|sort(v) 1^T - 1 v^T| / t)`` with absolute-difference distance."""
    _check_temperature(t)
    v = check_finite(as_vector(v, "v"), "soft_sort input")
    return SoftPermutation(_batch_terms(v[None, :], t)[2][0], t, "soft")


def soft_sort_backward(v, t: float, upstream) -> np.ndarray:
    """Gradient of ``<upstream, soft_sort(v, t).matrix>`` with respect to ``v``.

    The sorted copy is treated as a reindexing of ``v`` through the stable
    permutation, so gradient reaches ``v`` both through ``sort(v)`` and through
    the raw ``1 v^T`` term. At exact ties this is a subgradient convention.
    """
    _check_temperature(t)
    v = as_vector(v, "v")
    upstream = as_matrix(upstream, "upstream")
    n = v.size
    if upstream.shape != (n, n):
        raise ShapeError(f"upstream must be {(n, n)}, got {upstream.shape}")
    return soft_sort_backward_batch(v[None, :], t, upstream[None])[0]


def sort_perm(v, t: float, mode: SortMode) -> SoftPermutation:
    if mode == "hard":
        return hard_argsort_perm(v)
    if mode == "soft":
        return soft_sort(v, t)
    raise ParameterError(f"unknown sort mode {mode!r}")


# Entries this small are flushed to zero: they are far below any tolerance, and
# letting them drift into subnormal range slows downstream matmuls by ~10x.
FLUSH_BELOW = 1e-150


def _batch_terms(vs: np.ndarray, t: float):
    order = np.argsort(vs, axis=1, kind="stable")
    s = np.take_along_axis(vs, order, axis=1)
    diff = s[:, :, None] - vs[:, None, :]
    z = -np.abs(diff) / t
    z -= z.max(axis=2, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=2, keepdims=True)
    p[p < FLUSH_BELOW] = 0.0
    return order, diff, p


def soft_sort_batch(vs, t: float) -> np.ndarray:
    """SoftSort of every row of ``vs`` (``L x N``), stacked as ``L x N x N``."""
    _check_temperature(t)
    vs = check_finite(as_matrix(vs, "vs"), "soft_sort input")
    return _batch_terms(vs, t)[2]


def soft_sort_backward_batch(vs, t: float, upstream: np.ndarray) -> np.ndarray:
    """Row-wise :func:`soft_sort_backward` for ``L`` stacked vectors."""
    _check_temperature(t)
    vs = as_matrix(vs, "vs")
    if upstream.shape != vs.shape + (vs.shape[1],):
        raise ShapeError(f"upstream must be {vs.shape + (vs.shape[1],)}, got {upstream.shape}")
    order, diff, p = _batch_terms(vs, t)
    # softmax backward, then through z_ij = -|s_i - v_j| / t
    dz = p * (upstream - (upstream * p).sum(axis=2, keepdims=True))
    w = dz * np.sign(diff) / t
    grad = w.sum(axis=1)
    rows = np.arange(vs.shape[0])[:, None]
    np.add.at(grad, (rows, order), -w.sum(axis=2))
    return grad
