"""Wall-clock benchmarks of attention forward passes and plan dumps for plotting."""
from __future__ import annotations

import csv
import gc
import io
import time
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .attention import AttentionConfig, attention_forward, attention_map, esp_attention_forward

BENCH_FIELDS = ("method", "N", "setting", "mean_ms", "std_ms", "repeats", "threads")
DUMP_FIELDS = ("method", "param", "kind", "i", "j", "value")

DEFAULT_BENCH_N = (50, 100, 500, 1000)
DEFAULT_BENCH_ITERS = (1, 3, 5, 10)
DEFAULT_DUMP_TAUS = (0.0, 1.0, 10.0)
DEFAULT_DUMP_ITERS = (0, 1, 3, 5)


@dataclass(frozen=True)
class BenchRow:
    method: str
    n: int
    setting: str
    mean_ms: float
    std_ms: float
    repeats: int
    threads: int

    def as_dict(self) -> dict:
        return {"method": self.method, "N": self.n, "setting": self.setting,
                "mean_ms": f"{self.mean_ms:.6f}", "std_ms": f"{self.std_ms:.6f}",
                "repeats": self.repeats, "threads": self.threads}


def bench_cases(n: int, m: int, d: int, iters: Iterable[int], base: AttentionConfig,
                methods: Iterable[str], seed: int = 0):
    """Yield ``(method, setting, thunk)`` triples timing one forward pass each."""
    rng = np.random.default_rng([seed, n])
    q, k = rng.standard_normal((m, n)), rng.standard_normal((m, n))
    v = rng.standard_normal((d, n))
    q2, k2 = rng.standard_normal((2 * m, n)), rng.standard_normal((2 * m, n))
    methods = tuple(methods)
    if "softmax" in methods:
        yield "softmax", "-", lambda: attention_forward("softmax", q, k, v, base)
    if "diff" in methods:
        yield "diff", "-", lambda: attention_forward("diff", q2, k2, v, base.with_(inner="softmax"))
    if "sinkhorn" in methods:
        for s in iters:
            cfg = base.with_(sinkhorn_iters=s)
            yield "sinkhorn", f"S={s}", (lambda cfg=cfg: attention_forward("sinkhorn", q, k, v, cfg))
    if "esp" in methods:
        for mode in ("soft", "hard"):
            cfg = base.with_(sort_mode=mode)
            yield "esp", mode, (lambda cfg=cfg: esp_attention_forward(q, k, v, cfg))


def run_bench(ns=DEFAULT_BENCH_N, m: int = 8, d: int = 1024, iters=DEFAULT_BENCH_ITERS,
              repeats: int = 10, warmup: int = 3, threads: int = 1,
              base: AttentionConfig | None = None, methods=("softmax", "diff", "sinkhorn", "esp"),
              seed: int = 0) -> list[BenchRow]:
    """Time every method at every ``N``.

    Repeats are interleaved across the methods of one ``N`` so slow drift in
    machine load hits all of them alike.
    """
    base = (base or AttentionConfig()).with_(workers=threads)
    rows = []
    for n in ns:
        cases = list(bench_cases(n, m, d, iters, base, methods, seed))
        for _, _, fn in cases:
            for _ in range(warmup):
                fn()
        samples = [[] for _ in cases]
        gc_was_enabled = gc.isenabled()
        gc.disable()
        try:
            for _ in range(repeats):
                for slot, (_, _, fn) in zip(samples, cases):
                    start = time.perf_counter()
                    fn()
                    slot.append((time.perf_counter() - start) * 1e3)
        finally:
            if gc_was_enabled:
                gc.enable()
        for (method, setting, _), slot in zip(cases, samples):
            arr = np.array(slot)
            rows.append(BenchRow(method, n, setting, float(arr.mean()), float(arr.std()), repeats, threads))
    return rows


def write_csv(rows: list[dict], field_names, stream=None) -> str:
    buf = io.StringIO() if stream is None else stream
    writer = csv.DictWriter(buf, fieldnames=list(field_names), lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    return buf.getvalue() if stream is None else ""


def dump_points(n: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Seeded 2-D queries and keys (tokens as columns)."""
    rng = np.random.default_rng([seed, 11])
    q = rng.standard_normal((2, n)) + np.array([[-1.0], [0.0]])
    k = rng.standard_normal((2, n)) + np.array([[1.0], [0.0]])
    return q, k


def _matrix_rows(method: str, param: str, mat: np.ndarray) -> list[dict]:
    rows = []
    for (i, j), value in np.ndenumerate(mat):
        rows.append({"method": method, "param": param, "kind": "entry", "i": i, "j": j, "value": repr(float(value))})
    for i, value in enumerate(mat.sum(axis=1)):
        rows.append({"method": method, "param": param, "kind": "row_sum", "i": i, "j": "", "value": repr(float(value))})
    for j, value in enumerate(mat.sum(axis=0)):
        rows.append({"method": method, "param": param, "kind": "col_sum", "i": "", "j": j, "value": repr(float(value))})
    return rows


def plan_dump(n: int = 16, seed: int = 0, taus=DEFAULT_DUMP_TAUS, iters=DEFAULT_DUMP_ITERS,
              base: AttentionConfig | None = None) -> list[dict]:
    """Query-by-key couplings (mass ``1/N`` per query) for plotting.

    ESP plans across ``taus``, Sinkhorn plans across ``iters``, and the softmax
    attention matrix. Softmax and Sinkhorn use dot-product logits; Sinkhorn at
    zero iterations coincides with softmax when ``epsilon == 1``.
    """
    base = base or AttentionConfig(sort_mode="hard")
    q, k = dump_points(n, seed)
    rows = []
    for tau in taus:
        g = attention_map("esp", q, k, base.with_(inverse_temperature=tau))
        rows += _matrix_rows("esp", f"tau={tau!r}", g)
    for s in iters:
        m = attention_map("sinkhorn", q, k, base.with_(sinkhorn_iters=s))
        rows += _matrix_rows("sinkhorn", f"S={s}", m.T / n)
    rows += _matrix_rows("softmax", "-", attention_map("softmax", q, k, base).T / n)
    return rows
