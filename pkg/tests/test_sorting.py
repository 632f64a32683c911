import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from espattn.errors import ParameterError, ShapeError
from espattn.sorting import (
    hard_argsort_perm,
    soft_sort,
    soft_sort_backward,
    soft_sort_batch,
    sort_perm,
    stable_argsort,
)
from oracles import central_diff, max_rel_err


def scalar_soft_sort(v, t):
    """P[i, j] = exp(-|s_i - v_j|/t) / sum_k exp(-|s_i - v_k|/t), term by term."""
    s = sorted(v)
    n = len(v)
    out = np.zeros((n, n))
    for i in range(n):
        row = [math.exp(-abs(s[i] - v[j]) / t) for j in range(n)]
        tot = math.fsum(row)
        for j in range(n):
            out[i, j] = row[j] / tot
    return out


def test_hard_perm_small_example():
    p = hard_argsort_perm([3.0, 1.0, 2.0]).matrix
    np.testing.assert_array_equal(p, [[0, 1, 0], [0, 0, 1], [1, 0, 0]])
    np.testing.assert_array_equal(p @ np.array([3.0, 1.0, 2.0]), [1.0, 2.0, 3.0])


def test_ties_keep_index_order():
    np.testing.assert_array_equal(stable_argsort([2.0, 1.0, 2.0, 1.0]), [1, 3, 0, 2])


def test_soft_sort_scalar_formula(rng):
    v = list(rng.normal(size=6))
    for t in (2.0, 0.3, 0.05):
        np.testing.assert_allclose(soft_sort(v, t).matrix, scalar_soft_sort(v, t), rtol=1e-12, atol=1e-300)


def test_soft_sort_two_point_closed_form():
    # v = (1, 0): row 0 picks 0, row 1 picks 1; off-diagonal weight is 1/(1+e^{1/t})
    t = 0.5
    p = soft_sort([1.0, 0.0], t).matrix
    off = 1.0 / (1.0 + math.exp(1.0 / t))
    np.testing.assert_allclose(p, [[off, 1 - off], [1 - off, off]], rtol=1e-14)


@given(st.lists(st.floats(-5, 5, allow_nan=False), min_size=1, max_size=10),
       st.floats(1e-3, 10.0))
@settings(max_examples=80, deadline=None)
def test_soft_sort_row_stochastic(v, t):
    p = soft_sort(v, t).matrix
    assert np.all(p >= 0)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)


def test_batch_matches_single(rng):
    vs = rng.normal(size=(3, 5))
    out = soft_sort_batch(vs, 0.2)
    for l in range(3):
        np.testing.assert_array_equal(out[l], soft_sort(vs[l], 0.2).matrix)


def test_soft_approaches_hard_with_unit_gaps(rng):
    v = rng.permutation(8).astype(float)
    hard = hard_argsort_perm(v).matrix
    errs = [np.abs(soft_sort(v, t).matrix - hard).max() for t in (1.0, 0.1, 0.01, 0.001)]
    assert errs[-1] <= 1e-6
    assert all(a >= b for a, b in zip(errs, errs[1:]))


@pytest.mark.parametrize("seed", range(5))
def test_backward_finite_differences(seed):
    rng = np.random.default_rng(seed)
    v = rng.normal(size=5)
    up = rng.normal(size=(5, 5))
    t = 0.7
    analytic = soft_sort_backward(v, t, up)
    numeric = central_diff(lambda: float(np.sum(up * scalar_soft_sort(list(v), t))), v)
    assert max_rel_err(analytic, numeric) < 1e-6


def test_sort_perm_dispatch_and_errors():
    assert sort_perm([1.0, 0.0], 0.1, "hard").mode == "hard"
    assert sort_perm([1.0, 0.0], 0.1, "soft").temperature == 0.1
    with pytest.raises(ParameterError):
        sort_perm([1.0], 0.1, "fuzzy")
    with pytest.raises(ParameterError):
        soft_sort([1.0, 2.0], 0.0)
    with pytest.raises(ShapeError):
        soft_sort_backward([1.0, 2.0], 0.1, np.ones((3, 3)))
