"""Property suites behind ``espattn --command invariants`` and ``gradcheck``.

Each check yields a record ``{suite, case, status, value, bound}``.
"""
from __future__ import annotations

import json
from typing import Iterator

import numpy as np

from .attention import (
    AttentionConfig,
    esp_attention_backward,
    esp_attention_forward,
    sinkhorn_attention,
    softmax_attention,
)
from .sorting import hard_argsort_perm, soft_sort
from .transport import (
    SliceSet,
    cost_matrix,
    cross_plan,
    esp_plan,
    esp_weights,
    exact_ot_oracle,
    interior_rows,
    interpolation_matrix,
    marginal_residual,
    sinkhorn_plan,
    slice_cost,
)

# Relative slack when comparing two float sums that can coincide mathematically.
ROUNDOFF = 1e-12


def record(suite: str, case: str, ok: bool, value: float, bound: float) -> dict:
    return {"suite": suite, "case": case, "status": "pass" if ok else "fail",
            "value": float(value), "bound": float(bound)}


def to_jsonl(records) -> str:
    return "".join(json.dumps(r, sort_keys=True) + "\n" for r in records)


def _hard_instance(rng, n_max=32, m_max=8):
    n = int(rng.integers(2, n_max + 1))
    m = int(rng.integers(1, m_max + 1))
    return rng.standard_normal((m, n)), rng.standard_normal((m, n))


def doubly_stochastic(seed: int = 0, cases: int = 200) -> Iterator[dict]:
    rng = np.random.default_rng([seed, 1])
    worst = 0.0
    for _ in range(cases):
        q, k = _hard_instance(rng)
        tau = float(rng.choice([0.0, 0.1, 1.0, 10.0]))
        g, _ = esp_plan(q, k, SliceSet.axis_aligned(q.shape[0]), 1e-3, tau, "hard")
        n = q.shape[1]
        scaled = n * g.matrix
        dev = max(np.abs(scaled.sum(axis=0) - 1).max(), np.abs(scaled.sum(axis=1) - 1).max())
        worst = max(worst, dev)
    yield record("doubly_stochastic", f"{cases} hard instances", worst <= 1e-12, worst, 1e-12)


def softsort_limit(seed: int = 0, cases: int = 20) -> Iterator[dict]:
    rng = np.random.default_rng([seed, 2])
    temps = (1.0, 0.1, 0.01, 0.001)
    worst_final, monotone = 0.0, True
    for _ in range(cases):
        n = int(rng.integers(2, 10))
        v = rng.permutation(n).astype(float) + rng.uniform(-5, 5)
        hard = hard_argsort_perm(v).matrix
        dists = [np.abs(soft_sort(v, t).matrix - hard).max() for t in temps]
        monotone &= all(b <= a + ROUNDOFF for a, b in zip(dists, dists[1:]))
        worst_final = max(worst_final, dists[-1])
    yield record("softsort_limit", "max deviation at t=1e-3", worst_final <= 1e-6, worst_final, 1e-6)
    yield record("softsort_limit", "monotone in t", monotone, float(monotone), 1.0)


def ot_oracle(seed: int = 0, cases: int = 100) -> Iterator[dict]:
    rng = np.random.default_rng([seed, 3])
    exact_gap, min_gap = 0.0, np.inf
    for _ in range(cases):
        n = int(rng.integers(2, 7))
        q, k = rng.standard_normal((1, n)), rng.standard_normal((1, n))
        c = cost_matrix(q, k)
        g, _ = esp_plan(q, k, SliceSet.axis_aligned(1), 1e-3, 0.0, "hard")
        exact_gap = max(exact_gap, abs(slice_cost(g, c) - exact_ot_oracle(c)[0]))
    for _ in range(cases):
        n = int(rng.integers(2, 7))
        m = int(rng.integers(2, 6))
        q, k = rng.standard_normal((m, n)), rng.standard_normal((m, n))
        c = cost_matrix(q, k)
        tau = float(rng.choice([0.0, 0.1, 1.0, 10.0]))
        g, _ = esp_plan(q, k, SliceSet.axis_aligned(m), 1e-3, tau, "hard")
        w2 = exact_ot_oracle(c)[0]
        min_gap = min(min_gap, (slice_cost(g, c) - w2) / max(w2, 1.0))
    yield record("ot_oracle", "1-D exactness |<C,G> - OT|", exact_gap == 0.0, exact_gap, 0.0)
    yield record("ot_oracle", "min relative gap <C,G> - OT", min_gap >= -ROUNDOFF, min_gap, -ROUNDOFF)


def sinkhorn_limits(seed: int = 0, cases: int = 50) -> Iterator[dict]:
    rng = np.random.default_rng([seed, 4])
    identical = True
    for _ in range(cases):
        n, m, d = (int(x) for x in rng.integers(1, 9, size=3))
        q, k, v = rng.standard_normal((m, n)), rng.standard_normal((m, n)), rng.standard_normal((d, n))
        a = sinkhorn_attention(q, k, v, AttentionConfig(sinkhorn_iters=0, sinkhorn_epsilon=1.0))
        identical &= np.array_equal(a, softmax_attention(q, k, v))
    monotone = True
    worst = 0.0
    for _ in range(20):
        c = rng.uniform(0, 1, size=(5, 5))
        # residual after each full (f, g) sweep
        res = [marginal_residual(sinkhorn_plan(c, 0.1, s)) for s in range(2, 62, 2)]
        monotone &= all(b <= a + ROUNDOFF for a, b in zip(res, res[1:]))
        worst = max(worst, marginal_residual(sinkhorn_plan(c, 0.1, 2000)))
    yield record("sinkhorn", "iters=0 equals softmax bit-for-bit", identical, float(identical), 1.0)
    yield record("sinkhorn", "residual non-increasing per full sweep", monotone, float(monotone), 1.0)
    yield record("sinkhorn", "marginal residual iters=2000 eps=0.1", worst <= 1e-6, worst, 1e-6)


def slice_weights(seed: int = 0, cases: int = 20) -> Iterator[dict]:
    rng = np.random.default_rng([seed, 5])
    uniform, monotone = True, True
    for _ in range(cases):
        m, n = int(rng.integers(2, 6)), int(rng.integers(3, 10))
        q, k = rng.standard_normal((m, n)), rng.standard_normal((m, n))
        _, w0 = esp_plan(q, k, SliceSet.axis_aligned(m), 1e-3, 0.0, "hard")
        uniform &= bool(np.all(w0.sigma == 1.0 / m))
        best = int(np.argmin(w0.costs))
        mass = [esp_weights(w0.costs, tau).sigma[best] for tau in (0.0, 0.1, 1.0, 10.0)]
        monotone &= all(b >= a - ROUNDOFF for a, b in zip(mass, mass[1:]))
    yield record("slice_weights", "tau=0 exactly uniform", uniform, float(uniform), 1.0)
    yield record("slice_weights", "min-cost mass non-decreasing in tau", monotone, float(monotone), 1.0)


def interpolation(seed: int = 0) -> Iterator[dict]:
    worst_rows, worst_marg = 0.0, 0.0
    rng = np.random.default_rng([seed, 6])
    for n in range(1, 13):
        for m in range(1, 13):
            interp = interpolation_matrix(n, m)
            inside = interior_rows(n, m)
            worst_rows = max(worst_rows, np.abs(interp.sum(axis=1)[inside] - 1).max())
            qp, kp = rng.standard_normal(n), rng.standard_normal(m)
            plan = cross_plan(qp, kp, 1e-3, "hard")
            ranks = np.argsort(np.argsort(qp, kind="stable"), kind="stable")
            rows = plan.row_sums()[inside[ranks]]
            worst_marg = max(worst_marg, np.abs(rows - 1.0 / n).max())
    yield record("interpolation", "interior row sums", worst_rows <= 1e-12, worst_rows, 1e-12)
    yield record("interpolation", "cross_plan first marginal", worst_marg <= 1e-9, worst_marg, 1e-9)


def esp_gradients(seed: int = 0, cases: int = 10, h: float = 1e-5, tol: float = 1e-4) -> Iterator[dict]:
    from .model import rel_error

    rng = np.random.default_rng([seed, 8])
    worst = 0.0
    for _ in range(cases):
        n, m, d = int(rng.integers(2, 7)), int(rng.integers(1, 5)), int(rng.integers(1, 5))
        q, k, v = rng.standard_normal((m, n)), rng.standard_normal((m, n)), rng.standard_normal((d, n))
        w = rng.standard_normal((d, n))
        cfg = AttentionConfig(sort_temperature=0.5, inverse_temperature=1.0)
        _, tape = esp_attention_forward(q, k, v, cfg)
        grads = esp_attention_backward(tape, w)
        for analytic, x in zip(grads, (q, k, v)):
            numeric = np.zeros_like(x)
            for idx in np.ndindex(x.shape):
                orig = x[idx]
                x[idx] = orig + h
                up = np.sum(w * esp_attention_forward(q, k, v, cfg)[0])
                x[idx] = orig - h
                down = np.sum(w * esp_attention_forward(q, k, v, cfg)[0])
                x[idx] = orig
                numeric[idx] = (up - down) / (2 * h)
            worst = max(worst, rel_error(analytic, numeric))
    yield record("esp_gradient", f"{cases} seeds vs central differences", worst <= tol, worst, tol)


SUITES = {
    "doubly_stochastic": doubly_stochastic,
    "softsort_limit": softsort_limit,
    "ot_oracle": ot_oracle,
    "sinkhorn": sinkhorn_limits,
    "slice_weights": slice_weights,
    "interpolation": interpolation,
    "esp_gradient": esp_gradients,
}


def run_all(seed: int = 0) -> list[dict]:
    out = []
    for suite in SUITES.values():
        out.extend(suite(seed))
    return out
