"""Attention kernels with tokens as columns.

Every kernel builds an ``N x N`` attention map ``M`` and returns ``V @ M``;
column ``j`` of ``M`` says how output token ``j`` mixes the value columns.
For ESP this map is the expected sliced plan ``G`` itself (mass ``1/N`` per
row and column), for softmax and Sinkhorn it is the transposed row-stochastic
matrix.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Any, Literal, Sequence

import numpy as np

from .errors import ParameterError, ShapeError, UnsupportedModeError
from .linalg import as_matrix, check_finite, logsumexp_rows, pairwise_sq_dist, softmax_rows
from .sorting import SortMode, soft_sort_backward_batch
from .transport import (
    EspWeights,
    SliceBatch,
    SliceSet,
    aggregate,
    compute_slices,
    cost_matrix,
    esp_weights,
)

Kind = Literal["esp", "softmax", "sinkhorn", "diff"]
KINDS: tuple[str, ...] = ("esp", "softmax", "sinkhorn", "diff")
GROUPNORM_EPS = 1e-5


@dataclass(frozen=True)
class AttentionConfig:
    """Hyperparameters for all kernels.

    ``logit_scale`` is the dot-product scale of the softmax and Sinkhorn
    baselines; ``None`` means ``1/sqrt(m)``. ESP uses distances and takes no
    logit scale.
    """

    sort_temperature: float = 1e-3
    inverse_temperature: float = 0.1
    cost_exponent: float = 2.0
    sort_mode: SortMode = "soft"
    slicer: Literal["axis_aligned", "frozen_random"] = "axis_aligned"
    n_slices: int | None = None
    slicer_seed: int = 0
    sinkhorn_epsilon: float = 1.0
    sinkhorn_iters: int = 3
    heads: int = 1
    lam: float = 0.5
    inner: Literal["esp", "softmax", "sinkhorn"] = "softmax"
    logit_scale: float | None = None
    workers: int = 1

    def __post_init__(self):
        if not self.sort_temperature > 0:
            raise ParameterError("sort_temperature must be > 0")
        if not self.inverse_temperature >= 0:
            raise ParameterError("inverse_temperature must be >= 0")
        if not self.cost_exponent >= 1:
            raise ParameterError("cost_exponent must be >= 1")
        if self.sort_mode not in ("soft", "hard"):
            raise ParameterError(f"unknown sort_mode {self.sort_mode!r}")
        if self.slicer not in ("axis_aligned", "frozen_random"):
            raise ParameterError(f"unknown slicer {self.slicer!r}")
        if self.n_slices is not None and self.n_slices < 1:
            raise ParameterError("n_slices must be >= 1")
        if not self.sinkhorn_epsilon > 0:
            raise ParameterError("sinkhorn_epsilon must be > 0")
        if self.sinkhorn_iters < 0:
            raise ParameterError("sinkhorn_iters must be >= 0")
        if self.heads < 1:
            raise ParameterError("heads must be >= 1")
        if self.inner not in ("esp", "softmax", "sinkhorn"):
            raise ParameterError(f"unknown inner kernel {self.inner!r}")
        if self.workers < 1:
            raise ParameterError("workers must be >= 1")

    def with_(self, **changes) -> AttentionConfig:
        return replace(self, **changes)

    def slices(self, m: int) -> SliceSet:
        if self.slicer == "axis_aligned":
            return SliceSet.axis_aligned(m)
        return SliceSet.frozen_random(self.n_slices or m, m, self.slicer_seed)

    def scale_for(self, m: int) -> float:
        return 1.0 / math.sqrt(m) if self.logit_scale is None else self.logit_scale


def _check_qkv(q, k, v):
    q = as_matrix(q, "q")
    k = as_matrix(k, "k")
    v = as_matrix(v, "v")
    if q.shape != k.shape:
        raise ShapeError(f"q {q.shape} and k {k.shape} must match")
    if v.shape[1] != q.shape[1]:
        raise ShapeError(f"v has {v.shape[1]} tokens, q has {q.shape[1]}")
    return q, k, v


# --------------------------------------------------------------------------
# ESP


@dataclass
class AttentionTape:
    """Forward intermediates of ESP attention, enough for the exact backward."""

    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    cfg: AttentionConfig
    slices: SliceSet
    sq_dist: np.ndarray
    cost: np.ndarray
    q_proj: np.ndarray
    k_proj: np.ndarray
    per_slice: SliceBatch
    weights: EspWeights
    g: np.ndarray
    out: np.ndarray

    @property
    def mode(self) -> SortMode:
        return self.cfg.sort_mode

    def replay(self) -> tuple[np.ndarray, AttentionTape]:
        return esp_attention_forward(self.q, self.k, self.v, self.cfg)


def esp_map(q, k, cfg: AttentionConfig, v=None) -> tuple[np.ndarray, AttentionTape]:
    q = as_matrix(q, "q")
    k = as_matrix(k, "k")
    if q.shape != k.shape:
        raise ShapeError(f"q {q.shape} and k {k.shape} must match")
    n = q.shape[1]
    slices = cfg.slices(q.shape[0])
    sq = pairwise_sq_dist(q, k)
    c = sq if cfg.cost_exponent == 2 else cost_matrix(q, k, cfg.cost_exponent)
    qp, kp = slices.project(q), slices.project(k)
    batch = compute_slices(qp, kp, c, cfg.sort_temperature, cfg.sort_mode, cfg.workers)
    weights = esp_weights(batch.costs, cfg.inverse_temperature)
    g = np.maximum(aggregate(batch, weights.sigma, n), 0.0)
    check_finite(g, "ESP plan")
    tape = AttentionTape(q, k, None if v is None else as_matrix(v), cfg, slices, sq, c,
                         qp, kp, batch, weights, g, None)
    return g, tape


def esp_map_backward(tape: AttentionTape, dg: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of ``<dg, G>`` with respect to ``q`` and ``k``."""
    cfg = tape.cfg
    if cfg.sort_mode != "soft":
        raise UnsupportedModeError("ESP backward needs soft sorting; hard permutations carry no gradient")
    n = tape.q.shape[1]
    sigma = tape.weights.sigma
    sb = tape.per_slice
    plans = sb.plans

    # slice weights sigma = softmax(-tau * D)
    dsigma = np.einsum("ij,lij->l", dg, plans)
    dz = sigma * (dsigma - np.dot(sigma, dsigma))
    dcost = -cfg.inverse_temperature * dz

    dc = np.einsum("l,lij->ij", dcost, plans)
    du = sigma[:, None, None] * dg[None] + dcost[:, None, None] * tape.cost[None]
    # U_l = A_l^T B_l / N
    da = np.matmul(sb.b, du.transpose(0, 2, 1)) / n
    db = np.matmul(sb.a, du) / n
    t = cfg.sort_temperature
    dqp = soft_sort_backward_batch(tape.q_proj, t, da)
    dkp = soft_sort_backward_batch(tape.k_proj, t, db)

    theta = tape.slices.directions
    dq = theta.T @ dqp
    dk = theta.T @ dkp

    p = cfg.cost_exponent
    if p == 2:
        ds = dc
    else:
        sq = tape.sq_dist
        with np.errstate(divide="ignore", invalid="ignore"):
            ds = np.where(sq > 0, dc * (p / 2.0) * sq ** (p / 2.0 - 1.0), 0.0)
    q, k = tape.q, tape.k
    dq += 2.0 * (q * ds.sum(axis=1)[None, :] - k @ ds.T)
    dk += 2.0 * (k * ds.sum(axis=0)[None, :] - q @ ds)
    return dq, dk


def esp_attention_forward(q, k, v, cfg: AttentionConfig) -> tuple[np.ndarray, AttentionTape]:
    """``V @ G`` with ``G`` the expected sliced transport plan between queries and keys."""
    q, k, v = _check_qkv(q, k, v)
    g, tape = esp_map(q, k, cfg, v)
    tape.out = check_finite(v @ g, "ESP attention output")
    return tape.out, tape


def esp_attention_backward(tape: AttentionTape, upstream) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    upstream = as_matrix(upstream, "upstream")
    if upstream.shape != tape.out.shape:
        raise ShapeError(f"upstream {upstream.shape} vs output {tape.out.shape}")
    if tape.cfg.sort_mode != "soft":
        raise UnsupportedModeError("ESP backward needs soft sorting; hard permutations carry no gradient")
    dv = upstream @ tape.g.T
    dq, dk = esp_map_backward(tape, tape.v.T @ upstream)
    return dq, dk, dv


# --------------------------------------------------------------------------
# softmax and Sinkhorn baselines


def _logits(q, k, scale: float) -> np.ndarray:
    return scale * (q.T @ k)


def softmax_map(q, k, scale: float) -> np.ndarray:
    """Transposed row-softmax of ``scale * q^T k``; rows of the softmax are queries."""
    return softmax_rows(_logits(q, k, scale)).T


def _softmax_rows_backward(p: np.ndarray, dp: np.ndarray) -> np.ndarray:
    return p * (dp - (dp * p).sum(axis=1, keepdims=True))


def softmax_attention(q, k, v, scale: float | None = None) -> np.ndarray:
    """Classic attention: output token ``i`` is ``sum_j softmax_j(scale q_i.k_j) v_j``."""
    q, k, v = _check_qkv(q, k, v)
    if scale is None:
        scale = 1.0 / math.sqrt(q.shape[0])
    return check_finite(v @ softmax_map(q, k, scale), "softmax attention output")


@dataclass
class SinkhornCache:
    log_kernel: np.ndarray
    history: list[tuple[np.ndarray, np.ndarray]]
    p: np.ndarray  # N * plan, rows are queries


def sinkhorn_map(q, k, cfg: AttentionConfig) -> tuple[np.ndarray, SinkhornCache]:
    """Transposed ``N * plan`` for ``S0 = exp(scale q^T k / epsilon)``.

    Zero iterations give exactly the softmax map when ``epsilon == 1``.
    """
    q = as_matrix(q, "q")
    k = as_matrix(k, "k")
    eps, iters = cfg.sinkhorn_epsilon, cfg.sinkhorn_iters
    logits = _logits(q, k, cfg.scale_for(q.shape[0]))
    n = q.shape[1]
    if iters == 0:
        p = softmax_rows(logits, eps)
        return p.T, SinkhornCache(logits / eps, [], p)
    log_kernel = logits / eps
    log_mass = math.log(1.0 / n)
    f, g = np.zeros(n), np.zeros(n)
    history = []
    for step in range(iters):
        history.append((f, g))
        if step % 2 == 0:
            f = log_mass - logsumexp_rows(log_kernel + g[None, :])[:, 0]
        else:
            g = log_mass - logsumexp_rows(log_kernel.T + f[None, :])[:, 0]
    p = check_finite(n * np.exp(log_kernel + f[:, None] + g[None, :]), "Sinkhorn plan")
    return p.T, SinkhornCache(log_kernel, history, p)


def sinkhorn_map_backward(cache: SinkhornCache, dm: np.ndarray, q, k,
                          cfg: AttentionConfig) -> tuple[np.ndarray, np.ndarray]:
    """Reverse pass through the unrolled log-domain iterations."""
    dp = dm.T
    p = cache.p
    n = p.shape[0]
    lk = cache.log_kernel
    if not cache.history:
        dlk = _softmax_rows_backward(p, dp)
    else:
        dlog = dp * p
        dlk = dlog.copy()
        df = dlog.sum(axis=1)
        dg = dlog.sum(axis=0)
        for step in range(len(cache.history) - 1, -1, -1):
            f_prev, g_prev = cache.history[step]
            if step % 2 == 0:
                r = softmax_rows(lk + g_prev[None, :])
                w = df[:, None] * r
                dlk -= w
                dg = dg - w.sum(axis=0)
                df = np.zeros(n)
            else:
                r = softmax_rows(lk.T + f_prev[None, :])
                w = dg[:, None] * r
                dlk -= w.T
                df = df - w.sum(axis=0)
                dg = np.zeros(n)
    c = cfg.scale_for(q.shape[0]) / cfg.sinkhorn_epsilon
    return c * (k @ dlk.T), c * (q @ dlk)


def sinkhorn_attention(q, k, v, cfg: AttentionConfig) -> np.ndarray:
    """Sinkhorn-normalised attention: ``V`` mixed by the transposed ``N``-scaled Sinkhorn plan."""
    q, k, v = _check_qkv(q, k, v)
    m, _ = sinkhorn_map(q, k, cfg)
    return check_finite(v @ m, "Sinkhorn attention output")


# --------------------------------------------------------------------------
# kernel-agnostic forward/backward


@dataclass
class KernelCache:
    kind: str
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    cfg: AttentionConfig
    data: Any = None


def _map_forward(kind: str, q, k, cfg: AttentionConfig):
    if kind == "esp":
        return esp_map(q, k, cfg)
    if kind == "softmax":
        m = softmax_map(q, k, cfg.scale_for(q.shape[0]))
        return m, m
    if kind == "sinkhorn":
        return sinkhorn_map(q, k, cfg)
    raise ParameterError(f"unknown attention map {kind!r}")


def _map_backward(kind: str, data, dm, q, k, cfg: AttentionConfig):
    if kind == "esp":
        return esp_map_backward(data, dm)
    if kind == "softmax":
        p = data.T
        ds = _softmax_rows_backward(p, dm.T)
        scale = cfg.scale_for(q.shape[0])
        return scale * (k @ ds.T), scale * (q @ ds)
    if kind == "sinkhorn":
        return sinkhorn_map_backward(data, dm, q, k, cfg)
    raise ParameterError(f"unknown attention map {kind!r}")


def group_norm(x: np.ndarray, groups: int = 1, eps: float = GROUPNORM_EPS) -> np.ndarray:
    """Per-token zero-mean unit-variance over each block of feature rows; no affine."""
    return _group_norm(x, groups, eps)[0]


def _group_norm(x, groups, eps):
    d, n = x.shape
    if d % groups:
        raise ShapeError(f"{d} features not divisible into {groups} groups")
    xg = x.reshape(groups, d // groups, n)
    mu = xg.mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(xg.var(axis=1, keepdims=True) + eps)
    xhat = (xg - mu) * inv
    return xhat.reshape(d, n), (xhat, inv)


def _group_norm_backward(dy, cache):
    xhat, inv = cache
    g, per, n = xhat.shape
    dyg = dy.reshape(g, per, n)
    dx = inv * (dyg - dyg.mean(axis=1, keepdims=True)
                - xhat * (dyg * xhat).mean(axis=1, keepdims=True))
    return dx.reshape(g * per, n)


def _split_pairs(q, k):
    if q.shape[0] % 2:
        raise ShapeError("differential attention needs an even number of query/key rows")
    h = q.shape[0] // 2
    return q[:h], q[h:], k[:h], k[h:]


def attention_forward(kind: str, q, k, v, cfg: AttentionConfig) -> tuple[np.ndarray, KernelCache]:
    """Run kernel ``kind`` and keep what its backward needs.

    For ``"diff"`` the rows of ``q`` and ``k`` hold the two stacked projection
    pairs; the inner kernel is ``cfg.inner``.
    """
    q, k, v = _check_qkv(q, k, v)
    if kind == "diff":
        q1, q2, k1, k2 = _split_pairs(q, k)
        m1, c1 = _map_forward(cfg.inner, q1, k1, cfg)
        m2, c2 = _map_forward(cfg.inner, q2, k2, cfg)
        a = m1 - cfg.lam * m2
        y, gn = _group_norm(v @ a, 1, GROUPNORM_EPS)
        return check_finite(y, "differential attention output"), KernelCache(kind, q, k, v, cfg, (a, c1, c2, gn))
    m, data = _map_forward(kind, q, k, cfg)
    return check_finite(v @ m, f"{kind} attention output"), KernelCache(kind, q, k, v, cfg, (m, data))


def attention_backward(cache: KernelCache, upstream) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    upstream = as_matrix(upstream, "upstream")
    cfg, q, k, v = cache.cfg, cache.q, cache.k, cache.v
    if cache.kind == "diff":
        a, c1, c2, gn = cache.data
        do = _group_norm_backward(upstream, gn)
        dv = do @ a.T
        da = v.T @ do
        q1, q2, k1, k2 = _split_pairs(q, k)
        dq1, dk1 = _map_backward(cfg.inner, c1, da, q1, k1, cfg)
        dq2, dk2 = _map_backward(cfg.inner, c2, -cfg.lam * da, q2, k2, cfg)
        return np.vstack([dq1, dq2]), np.vstack([dk1, dk2]), dv
    m, data = cache.data
    dv = upstream @ m.T
    dq, dk = _map_backward(cache.kind, data, v.T @ upstream, q, k, cfg)
    return dq, dk, dv


def attention_map(kind: str, q, k, cfg: AttentionConfig) -> np.ndarray:
    """The ``N x N`` mixing matrix of a single-map kernel (``out = V @ map``)."""
    return _map_forward(kind, as_matrix(q), as_matrix(k), cfg)[0]


# --------------------------------------------------------------------------
# differential and multi-head attention


@dataclass(frozen=True)
class HeadWeights:
    """Projections for one head: ``q = w_q x``, ``k = w_k x``, ``v = w_v x``.

    For differential attention ``w_q`` and ``w_k`` stack the two projection
    pairs along their rows.
    """

    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray


def differential_attention(x, weights: HeadWeights, lam: float, inner: str = "softmax",
                           cfg: AttentionConfig | None = None,
                           normalize: bool = True) -> np.ndarray:
    """``GroupNorm(V (A1 - lam A2))`` where ``A1``, ``A2`` come from ``inner``."""
    cfg = (cfg or AttentionConfig()).with_(lam=lam, inner=inner)
    x = as_matrix(x, "x")
    q = as_matrix(weights.w_q, "w_q") @ x
    k = as_matrix(weights.w_k, "w_k") @ x
    v = as_matrix(weights.w_v, "w_v") @ x
    if q.shape != k.shape:
        raise ShapeError(f"query projection {q.shape} and key projection {k.shape} differ")
    if not normalize:
        q1, q2, k1, k2 = _split_pairs(q, k)
        a = attention_map(inner, q1, k1, cfg) - lam * attention_map(inner, q2, k2, cfg)
        return v @ a
    return attention_forward("diff", q, k, v, cfg)[0]


def multi_head(x, head_weights: Sequence[HeadWeights], w_o, cfg: AttentionConfig,
               kind: str = "esp") -> np.ndarray:
    """Per-head attention, concatenated along features, then ``w_o @ concat``.

    Differential heads are scaled by ``1 - cfg.lam`` after their group norm.
    """
    x = as_matrix(x, "x")
    w_o = as_matrix(w_o, "w_o")
    d = x.shape[0]
    h = len(head_weights)
    if h != cfg.heads:
        raise ShapeError(f"config expects {cfg.heads} heads, got {h} weight sets")
    if d % h:
        raise ShapeError(f"model dim {d} not divisible by {h} heads")
    outs = []
    for hw in head_weights:
        q, k, v = hw.w_q @ x, hw.w_k @ x, hw.w_v @ x
        if v.shape[0] != d // h:
            raise ShapeError(f"head value dim must be {d // h}, got {v.shape[0]}")
        o, _ = attention_forward(kind, q, k, v, cfg)
        if kind == "diff":
            o = o * (1.0 - cfg.lam)
        outs.append(o)
    return check_finite(w_o @ np.vstack(outs), "multi-head output")
