"""Transport plans: lifted per-slice sorted matchings, their expected aggregation,
cross-size interpolated plans, log-domain Sinkhorn, and an exhaustive OT oracle.
"""
from __future__ import annotations

import itertools
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Literal

import numpy as np

from .errors import ParameterError, ShapeError, SizeError
from .linalg import as_matrix, as_vector, check_finite, logsumexp_rows, pairwise_sq_dist, softmax_rows
from .sorting import SortMode, soft_sort_batch, sort_perm, stable_argsort

__all__ = [
    "TransportPlan",
    "SliceSet",
    "EspWeights",
    "SliceBatch",
    "compute_slices",
    "aggregate",
    "cost_matrix",
    "slice_plan",
    "slice_cost",
    "esp_weights",
    "esp_plan",
    "interpolation_matrix",
    "cross_plan",
    "sinkhorn_log_scalings",
    "sinkhorn_plan",
    "exact_ot_oracle",
    "marginal_residual",
]

EXACT_OT_MAX_N = 8


@dataclass(frozen=True)
class TransportPlan:
    """Coupling between two uniform empirical measures.

    ``matrix[i, j]`` is the mass sent from source point ``i`` to target point
    ``j``; each source carries ``1/N`` and each target ``1/M``.
    """

    matrix: np.ndarray
    exactness: Literal["exact", "relaxed"] = "relaxed"

    @property
    def shape(self) -> tuple[int, int]:
        return self.matrix.shape

    @property
    def source_mass(self) -> float:
        return 1.0 / self.matrix.shape[0]

    @property
    def target_mass(self) -> float:
        return 1.0 / self.matrix.shape[1]

    def row_sums(self) -> np.ndarray:
        return self.matrix.sum(axis=1)

    def col_sums(self) -> np.ndarray:
        return self.matrix.sum(axis=0)


def _emit(matrix: np.ndarray, exactness: str) -> TransportPlan:
    check_finite(matrix, "transport plan")
    return TransportPlan(np.maximum(matrix, 0.0), exactness)


def marginal_residual(plan) -> float:
    """Largest deviation of any row sum from 1/N or column sum from 1/M."""
    m = plan.matrix if isinstance(plan, TransportPlan) else np.asarray(plan)
    n_rows, n_cols = m.shape
    row = np.abs(m.sum(axis=1) - 1.0 / n_rows).max()
    col = np.abs(m.sum(axis=0) - 1.0 / n_cols).max()
    return float(max(row, col))


@dataclass(frozen=True)
class SliceSet:
    """Unit slicing directions, one per row of ``directions`` (``L x m``)."""

    directions: np.ndarray
    kind: Literal["axis_aligned", "frozen_random"]
    seed: int | None = None

    def __post_init__(self):
        d = as_matrix(self.directions, "directions")
        norms = np.linalg.norm(d, axis=1)
        if not np.allclose(norms, 1.0, rtol=0, atol=1e-12):
            raise ParameterError("slice directions must have unit norm")
        if self.kind == "axis_aligned":
            if d.shape[0] != d.shape[1] or not np.array_equal(d, np.eye(d.shape[0])):
                raise ParameterError("axis-aligned slices must be the identity")
        elif self.kind != "frozen_random":
            raise ParameterError(f"unknown slicer kind {self.kind!r}")
        object.__setattr__(self, "directions", d)

    @classmethod
    def axis_aligned(cls, m: int) -> SliceSet:
        return cls(np.eye(m), "axis_aligned")

    @classmethod
    def frozen_random(cls, n_slices: int, m: int, seed: int) -> SliceSet:
        rng = np.random.default_rng(seed)
        g = rng.standard_normal((n_slices, m))
        g /= np.linalg.norm(g, axis=1, keepdims=True)
        return cls(g, "frozen_random", seed)

    @property
    def n_slices(self) -> int:
        return self.directions.shape[0]

    @property
    def dim(self) -> int:
        return self.directions.shape[1]

    def project(self, x) -> np.ndarray:
        """Project token columns onto every slice: ``(L, N)``."""
        x = as_matrix(x, "x")
        if x.shape[0] != self.dim:
            raise ShapeError(f"slices expect feature dim {self.dim}, got {x.shape[0]}")
        if self.kind == "axis_aligned":
            return x.copy()
        return self.directions @ x


@dataclass(frozen=True)
class EspWeights:
    sigma: np.ndarray
    tau: float
    costs: np.ndarray


def cost_matrix(q, k, p: float = 2.0) -> np.ndarray:
    """``||q_i - k_j||^p``; the exponent is applied here and nowhere else."""
    if not p >= 1:
        raise ParameterError(f"cost exponent must be >= 1, got {p}")
    sq = pairwise_sq_dist(q, k)
    if p == 2:
        return sq
    return sq ** (p / 2.0)


def slice_plan(q_proj, k_proj, t: float, mode: SortMode) -> TransportPlan:
    """Lifted plan ``(1/N) A^T B`` from sorting both projections."""
    q_proj = as_vector(q_proj, "q_proj")
    k_proj = as_vector(k_proj, "k_proj")
    if q_proj.size != k_proj.size:
        raise ShapeError("slice_plan needs equal token counts; use cross_plan")
    n = q_proj.size
    if mode == "hard":
        u = np.zeros((n, n))
        u[stable_argsort(q_proj), stable_argsort(k_proj)] = 1.0 / n
        return _emit(u, "exact")
    a = sort_perm(q_proj, t, mode).matrix
    b = sort_perm(k_proj, t, mode).matrix
    return _emit(a.T @ b / n, "relaxed")


def slice_cost(plan, cost) -> float:
    """Transport cost ``sum_ij cost[i, j] * plan[i, j]``."""
    m = plan.matrix if isinstance(plan, TransportPlan) else as_matrix(plan, "plan")
    cost = as_matrix(cost, "cost")
    if m.shape != cost.shape:
        raise ShapeError(f"plan {m.shape} vs cost {cost.shape}")
    return float(np.sum(cost * m))


def esp_weights(costs, tau: float) -> EspWeights:
    """Slice weights ``softmax(-tau * costs)``; low-cost slices weigh more."""
    costs = as_vector(costs, "costs")
    if not tau >= 0:
        raise ParameterError(f"inverse temperature must be >= 0, got {tau}")
    if tau == 0:
        sigma = np.full(costs.size, 1.0 / costs.size)
    else:
        sigma = softmax_rows(-tau * costs[None, :])[0]
    return EspWeights(sigma, float(tau), costs.copy())


@dataclass
class SliceBatch:
    """Per-slice intermediates for ``L`` slices.

    Soft mode keeps the dense soft permutations ``a``, ``b`` and plans
    (``L x N x N``); hard mode keeps only the argsort index vectors
    ``q_order``, ``k_order`` (``L x N``).
    """

    costs: np.ndarray
    plans: np.ndarray | None = None
    a: np.ndarray | None = None
    b: np.ndarray | None = None
    q_order: np.ndarray | None = None
    k_order: np.ndarray | None = None

    @property
    def n_slices(self) -> int:
        return self.costs.size

    def plan(self, l: int) -> np.ndarray:
        if self.plans is not None:
            return self.plans[l]
        n = self.q_order.shape[1]
        u = np.zeros((n, n))
        u[self.q_order[l], self.k_order[l]] = 1.0 / n
        return u


def _slice_chunk(qp: np.ndarray, kp: np.ndarray, c: np.ndarray, t: float, mode: SortMode) -> SliceBatch:
    n = qp.shape[1]
    if mode == "hard":
        qo = np.argsort(qp, axis=1, kind="stable")
        ko = np.argsort(kp, axis=1, kind="stable")
        return SliceBatch(c[qo, ko].sum(axis=1) / n, q_order=qo, k_order=ko)
    a = soft_sort_batch(qp, t)
    b = soft_sort_batch(kp, t)
    u = np.matmul(a.transpose(0, 2, 1), b) / n
    return SliceBatch(np.einsum("ij,lij->l", c, u), plans=u, a=a, b=b)


def compute_slices(q_proj, k_proj, c, t, mode: SortMode, workers: int = 1) -> SliceBatch:
    """Plans and full-dimensional costs for every slice.

    With ``workers > 1`` contiguous groups of slices run on a thread pool;
    results are stitched back in slice order.
    """
    n_slices = q_proj.shape[0]
    if workers <= 1 or n_slices < 2:
        return _slice_chunk(q_proj, k_proj, c, t, mode)
    bounds = np.linspace(0, n_slices, min(workers, n_slices) + 1).astype(int)
    spans = list(zip(bounds[:-1], bounds[1:]))
    with ThreadPoolExecutor(max_workers=len(spans)) as pool:
        parts = list(pool.map(lambda s: _slice_chunk(q_proj[s[0]:s[1]], k_proj[s[0]:s[1]], c, t, mode), spans))

    def cat(attr):
        vals = [getattr(p, attr) for p in parts]
        return None if vals[0] is None else np.concatenate(vals)

    return SliceBatch(cat("costs"), cat("plans"), cat("a"), cat("b"), cat("q_order"), cat("k_order"))


def aggregate(batch: SliceBatch, sigma: np.ndarray, n: int) -> np.ndarray:
    """Ordered reduction ``sum_l sigma_l U_l``."""
    g = np.zeros((n, n))
    for l, w in enumerate(sigma):
        if batch.plans is not None:
            g += w * batch.plans[l]
        else:
            g[batch.q_order[l], batch.k_order[l]] += w / n
    return g


def esp_plan(q, k, slices: SliceSet, t: float, tau: float, mode: SortMode = "soft",
             p: float = 2.0, workers: int = 1) -> tuple[TransportPlan, EspWeights]:
    """Expected sliced plan ``G = sum_l sigma_l U_l`` between query and key tokens.

    Slice costs are measured against the full-dimensional cost matrix.
    """
    q = as_matrix(q, "q")
    k = as_matrix(k, "k")
    if q.shape != k.shape:
        raise ShapeError(f"q {q.shape} and k {k.shape} must match")
    if mode == "soft":
        if not t > 0:
            raise ParameterError(f"SoftSort temperature must be > 0, got {t}")
    elif mode != "hard":
        raise ParameterError(f"unknown sort mode {mode!r}")
    c = cost_matrix(q, k, p)
    batch = compute_slices(slices.project(q), slices.project(k), c, t, mode, workers)
    weights = esp_weights(batch.costs, tau)
    g = aggregate(batch, weights.sigma, q.shape[1])
    return _emit(g, "exact" if mode == "hard" else "relaxed"), weights


def interpolation_matrix(n: int, m: int) -> np.ndarray:
    """``N x M`` linear-interpolation operator between grids ``i/N`` and ``j/M``.

    Indices are 1-based. Where ``i/N`` falls strictly between ``j/M`` and
    ``(j+1)/M`` the two neighbouring columns receive ``(i/N - j/M) M`` and
    ``((j+1)/M - i/N) M``. When ``i/N == j/M`` column ``j`` takes weight 1.
    Rows with ``i/N < 1/M`` have no left neighbour and keep only the partial
    weight on column 1.
    """
    if n < 1 or m < 1:
        raise ParameterError(f"interpolation sizes must be >= 1, got ({n}, {m})")
    out = np.zeros((n, m))
    for i in range(1, n + 1):
        # compare i/N against j/M as i*M against j*N, exactly in integers
        x = i * m
        if x % n == 0:
            out[i - 1, x // n - 1] = 1.0
            continue
        lo = x // n  # lo/M < i/N < (lo+1)/M
        if lo >= 1:
            out[i - 1, lo - 1] = (x - lo * n) / n
        if lo + 1 <= m:
            out[i - 1, lo] = ((lo + 1) * n - x) / n
    return out


def interior_rows(n: int, m: int) -> np.ndarray:
    """Rows of ``interpolation_matrix(n, m)`` whose grid point is ``>= 1/M``."""
    i = np.arange(1, n + 1)
    return i * m >= n


def cross_plan(q_proj, k_proj, t: float, mode: SortMode) -> TransportPlan:
    """Plan ``(1/N) A'^T I B'`` between ``N`` queries and ``M`` keys on one slice."""
    q_proj = as_vector(q_proj, "q_proj")
    k_proj = as_vector(k_proj, "k_proj")
    n, m = q_proj.size, k_proj.size
    if mode == "soft" and not t > 0:
        raise ParameterError(f"SoftSort temperature must be > 0, got {t}")
    a = sort_perm(q_proj, t, mode).matrix
    b = sort_perm(k_proj, t, mode).matrix
    interp = interpolation_matrix(n, m)
    return _emit(a.T @ interp @ b / n, "relaxed")


def sinkhorn_log_scalings(log_kernel, iters: int) -> tuple[np.ndarray, np.ndarray]:
    """Log-domain Sinkhorn scalings ``(f, g)`` for ``S0 = exp(log_kernel)``.

    Step ``l`` updates ``f`` when ``l`` is even and ``g`` when odd, starting
    from ``f = g = 0``. ``iters`` counts these half-steps.
    """
    log_kernel = as_matrix(log_kernel, "log_kernel")
    if iters < 0:
        raise ParameterError(f"iters must be >= 0, got {iters}")
    n, m = log_kernel.shape
    f = np.zeros(n)
    g = np.zeros(m)
    for step in range(iters):
        if step % 2 == 0:
            f = math.log(1.0 / n) - logsumexp_rows(log_kernel + g[None, :])[:, 0]
        else:
            g = math.log(1.0 / m) - logsumexp_rows(log_kernel.T + f[None, :])[:, 0]
    return f, g


def sinkhorn_plan(cost, epsilon: float, iters: int) -> TransportPlan:
    """Entropic plan ``diag(e^f) S0 diag(e^g)`` with ``S0 = exp(-cost / epsilon)``.

    ``iters = 0`` returns ``S0`` row-normalised to mass ``1/N`` per row, i.e.
    classic softmax attention scaled to a coupling.
    """
    cost = as_matrix(cost, "cost")
    if not epsilon > 0:
        raise ParameterError(f"epsilon must be > 0, got {epsilon}")
    if iters < 0:
        raise ParameterError(f"iters must be >= 0, got {iters}")
    n = cost.shape[0]
    if iters == 0:
        return _emit(softmax_rows(-cost, epsilon) / n, "relaxed")
    log_kernel = -cost / epsilon
    f, g = sinkhorn_log_scalings(log_kernel, iters)
    return _emit(np.exp(log_kernel + f[:, None] + g[None, :]), "relaxed")


def exact_ot_oracle(cost) -> tuple[float, TransportPlan]:
    """Exact uniform-mass OT by enumerating all ``N!`` permutations.

    Returns the optimal cost ``min_pi sum_i cost[i, pi(i)] / N`` and the plan.
    """
    cost = as_matrix(cost, "cost")
    n = cost.shape[0]
    if cost.shape[1] != n:
        raise ShapeError("exact_ot_oracle needs a square cost matrix")
    if n > EXACT_OT_MAX_N:
        raise SizeError(f"exhaustive OT limited to N <= {EXACT_OT_MAX_N}, got {n}")
    rows = np.arange(n)
    best, best_perm = math.inf, None
    for perm in itertools.permutations(range(n)):
        total = cost[rows, perm].sum()
        if total < best:
            best, best_perm = total, perm
    plan = np.zeros((n, n))
    plan[rows, list(best_perm)] = 1.0 / n
    return slice_cost(plan, cost), TransportPlan(plan, "exact")
