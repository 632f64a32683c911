import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from espattn.errors import NonFiniteError, ParameterError, ShapeError
from espattn.linalg import (
    as_matrix,
    as_vector,
    check_finite,
    logsumexp_rows,
    matmul,
    pairwise_sq_dist,
    softmax_rows,
)

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


def naive_matmul(a, b):
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            for r in range(a.shape[1]):
                out[i, j] += a[i, r] * b[r, j]
    return out


def test_matmul_small_integers_exact():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    b = np.array([[5.0, 6.0], [7.0, 8.0]])
    np.testing.assert_array_equal(matmul(a, b), [[19.0, 22.0], [43.0, 50.0]])


@pytest.mark.parametrize("shape", [(1, 1, 1), (3, 5, 2), (7, 4, 9)])
def test_matmul_matches_triple_loop(rng, shape):
    n, r, m = shape
    a, b = rng.normal(size=(n, r)), rng.normal(size=(r, m))
    np.testing.assert_allclose(matmul(a, b), naive_matmul(a, b), rtol=1e-12, atol=1e-12)


def test_matmul_rejects_mismatch():
    with pytest.raises(ShapeError):
        matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_pairwise_sq_dist_loop_oracle(rng):
    q, k = rng.normal(size=(3, 5)), rng.normal(size=(3, 4))
    c = pairwise_sq_dist(q, k)
    for i in range(5):
        for j in range(4):
            assert c[i, j] == pytest.approx(sum((q[:, i] - k[:, j]) ** 2), rel=1e-13)


def test_pairwise_sq_dist_self_diagonal_zero(rng):
    q = rng.normal(size=(4, 6)) * 1e3
    c = pairwise_sq_dist(q, q)
    assert np.all(np.diag(c) == 0.0)
    assert np.all(c >= 0)


def test_softmax_rows_hand_example():
    p = softmax_rows(np.array([[0.0, math.log(3.0)]]))
    np.testing.assert_allclose(p, [[0.25, 0.75]], rtol=1e-15)


def test_softmax_rows_against_mpmath(rng):
    m = rng.normal(size=(4, 6)) * 20
    p = softmax_rows(m, scale=0.7)
    mpmath.mp.dps = 50
    for i in range(4):
        z = [mpmath.mpf(x) / mpmath.mpf(0.7) for x in m[i]]
        tot = mpmath.fsum(mpmath.exp(x) for x in z)
        for j in range(6):
            assert p[i, j] == pytest.approx(float(mpmath.exp(z[j]) / tot), rel=1e-12, abs=1e-300)


def test_logsumexp_rows_large_inputs_against_mpmath():
    m = np.array([[1000.0, 1000.0, 999.0], [-1000.0, -1001.0, -2000.0]])
    out = logsumexp_rows(m)
    assert out.shape == (2, 1)
    mpmath.mp.dps = 50
    for i in range(2):
        ref = mpmath.log(mpmath.fsum(mpmath.exp(mpmath.mpf(x)) for x in m[i]))
        assert out[i, 0] == pytest.approx(float(ref), rel=1e-15)


@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 6)), elements=finite))
@settings(max_examples=60, deadline=None)
def test_softmax_rows_properties(m):
    p = softmax_rows(m)
    assert np.all(p >= 0)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)
    np.testing.assert_allclose(softmax_rows(m + 3.0), p, atol=1e-12)


def test_softmax_rows_rejects_bad_scale():
    with pytest.raises(ParameterError):
        softmax_rows(np.zeros((2, 2)), scale=0.0)


def test_validators():
    with pytest.raises(ShapeError):
        as_matrix(np.ones(3))
    with pytest.raises(ShapeError):
        as_vector(np.ones((2, 2)))
    with pytest.raises(NonFiniteError):
        check_finite(np.array([1.0, np.nan]), "x")
    assert as_vector([1, 2]).dtype == np.float64
