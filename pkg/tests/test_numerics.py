import math
import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dsbf.numerics import (LOG_CLAMP, DegenerateFeatureWarning, DimensionError, SingularMatrixError,
                           clamped_log, clamped_log_grad, cosine_distance, derive_seeds, make_rng,
                           softmax_backward, softmax_rows, solve_spd)
from oracles import gauss_solve

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)


# -- rng -----------------------------------------------------------------

def test_rng_same_seed_same_stream():
    assert np.array_equal(make_rng(7).random(20), make_rng(7).random(20))


def test_rng_is_pcg64():
    assert isinstance(make_rng(0).bit_generator, np.random.PCG64)


def test_rng_matches_reference_pcg64_stream():
    ref = np.random.Generator(np.random.PCG64(np.random.SeedSequence(0)))
    np.testing.assert_array_equal(make_rng(0).integers(0, 1000, 5), ref.integers(0, 1000, 5))
    np.testing.assert_array_equal(make_rng(0).integers(0, 1000, 5), [850, 636, 511, 269, 307])


def test_derived_seeds_are_distinct_and_reproducible():
    a = [make_rng(s).random() for s in derive_seeds(3, 4)]
    b = [make_rng(s).random() for s in derive_seeds(3, 4)]
    assert a == b
    assert len(set(a)) == 4


def test_make_rng_does_not_touch_global_state():
    np.random.seed(0)
    before = np.random.get_state()[1].copy()
    make_rng(1).random(10)
    assert np.array_equal(np.random.get_state()[1], before)


# -- softmax -------------------------------------------------------------

@pytest.mark.parametrize("m, expected", [
    ([[0.0, 0.0]], [[0.5, 0.5]]),
    ([[math.log(1), math.log(3)]], [[0.25, 0.75]]),
    ([[1000.0, 1000.0, 1000.0]], [[1 / 3, 1 / 3, 1 / 3]]),
])
def test_softmax_examples(m, expected):
    np.testing.assert_allclose(softmax_rows(m), expected, atol=1e-15)


def test_softmax_empty_raises():
    with pytest.raises(DimensionError):
        softmax_rows(np.zeros((2, 0)))
    with pytest.raises(DimensionError):
        softmax_rows(np.zeros((0, 3)))


@given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 6)), elements=finite))
def test_softmax_rows_sum_to_one(m):
    p = softmax_rows(m)
    assert p.shape == m.shape
    assert np.all(np.isfinite(p))
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)


@given(arrays(np.float64, (3, 4), elements=finite), finite)
def test_softmax_shift_invariance(m, c):
    np.testing.assert_allclose(softmax_rows(m + c), softmax_rows(m), atol=1e-12)


def test_softmax_backward_matches_finite_difference(rng):
    logits = rng.normal(size=(3, 4))
    w = rng.normal(size=(3, 4))
    analytic = softmax_backward(softmax_rows(logits), w)
    num = np.zeros_like(logits)
    for idx in np.ndindex(*logits.shape):
        e = np.zeros_like(logits)
        e[idx] = 1e-6
        num[idx] = (np.sum(w * softmax_rows(logits + e)) - np.sum(w * softmax_rows(logits - e))) / 2e-6
    np.testing.assert_allclose(analytic, num, atol=1e-8)


def test_clamped_log():
    assert clamped_log(np.array([0.0]))[0] == math.log(LOG_CLAMP)
    assert clamped_log_grad(np.array([0.0]))[0] == 0.0
    assert clamped_log_grad(np.array([0.5]))[0] == 2.0


# -- cosine --------------------------------------------------------------

@pytest.mark.parametrize("u, v, d", [
    ([1, 0], [1, 0], 0.0),
    ([1, 0], [0, 1], 1.0),
    ([1, 1], [1, 0], 1 - 1 / math.sqrt(2)),
    ([1, 0], [-1, 0], 2.0),
])
def test_cosine_examples(u, v, d):
    assert cosine_distance(u, v) == pytest.approx(d, abs=1e-15)


def test_cosine_zero_vector_warns_and_returns_one():
    with pytest.warns(DegenerateFeatureWarning):
        assert cosine_distance([0, 0], [1, 2]) == 1.0


def test_cosine_length_mismatch():
    with pytest.raises(DimensionError):
        cosine_distance([1, 2], [1, 2, 3])


vec = arrays(np.float64, 4, elements=st.floats(-100, 100, allow_nan=False))


@given(vec, vec)
def test_cosine_symmetric_and_bounded(u, v):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DegenerateFeatureWarning)
        d = cosine_distance(u, v)
        assert d == cosine_distance(v, u)
    assert -1e-12 <= d <= 2 + 1e-12


@given(vec, vec, st.floats(0.01, 100))
def test_cosine_scale_invariant(u, v, s):
    if np.linalg.norm(u) < 1e-3 or np.linalg.norm(v) < 1e-3:
        return
    assert cosine_distance(s * u, v) == pytest.approx(cosine_distance(u, v), abs=1e-9)


# -- linear algebra ------------------------------------------------------

def test_solve_identity_and_diagonal():
    np.testing.assert_allclose(solve_spd(np.eye(2), [[3.0], [4.0]]), [[3.0], [4.0]], atol=1e-14)
    np.testing.assert_allclose(solve_spd([[2.0, 0.0], [0.0, 4.0]], [[2.0], [8.0]]),
                               [[1.0], [2.0]], atol=1e-14)


def test_solve_vector_rhs_shape():
    assert solve_spd(np.eye(3), np.ones(3)).shape == (3,)


@pytest.mark.parametrize("seed", range(20))
def test_solve_matches_gauss_oracle(seed):
    r = np.random.default_rng(seed)
    m = r.normal(size=(5, 5))
    a = m @ m.T + 0.5 * np.eye(5)
    b = r.normal(size=(5, 2))
    np.testing.assert_allclose(solve_spd(a, b), gauss_solve(a.tolist(), b.tolist()), rtol=0, atol=1e-9)


@given(st.integers(0, 2 ** 32 - 1), st.integers(1, 8))
def test_solve_residual(seed, d):
    r = np.random.default_rng(seed)
    m = r.normal(size=(d, d))
    a = m @ m.T + np.eye(d)
    b = r.normal(size=(d, 3))
    x = solve_spd(a, b)
    assert np.linalg.norm(a @ x - b) / np.linalg.norm(b) <= 1e-8


def test_solve_rejects_nonsymmetric():
    with pytest.raises(DimensionError):
        solve_spd([[1.0, 2.0], [0.0, 1.0]], [1.0, 1.0])


def test_solve_rejects_non_square():
    with pytest.raises(DimensionError):
        solve_spd(np.ones((2, 3)), np.ones(2))


def test_solve_indefinite_names_pivot():
    with pytest.raises(SingularMatrixError) as exc:
        solve_spd([[1.0, 0.0], [0.0, -1.0]], [1.0, 1.0])
    assert exc.value.index == 1
    assert exc.value.smallest_pivot < 0


def test_solve_rank_deficient_raises():
    x = np.array([[1.0, 0.0], [2.0, 0.0], [3.0, 0.0]])
    with pytest.raises(SingularMatrixError) as exc:
        solve_spd(x.T @ x, [1.0, 1.0])
    assert exc.value.index == 1


def test_solve_info_reports_jitter():
    a = np.diag([1.0, 3.0])
    _, info = solve_spd(a, [1.0, 1.0], return_info=True)
    assert info["jitter"] == pytest.approx(2e-10)
    assert info["min_pivot"] == pytest.approx(1.0)
    assert not info["ill_conditioned"]
    _, info = solve_spd(np.diag([1.0, 1e-9]), [1.0, 1.0], return_info=True)
    assert info["ill_conditioned"]


def test_solve_reaches_machine_precision_despite_ridge():
    a = np.array([[4.0, 1.0], [1.0, 3.0]])
    x_true = np.array([0.3, -1.7])
    np.testing.assert_allclose(solve_spd(a, a @ x_true), x_true, rtol=0, atol=1e-15)


@given(st.integers(0, 2 ** 32 - 1))
def test_matmul_associative_and_transpose_involution(seed):
    r = np.random.default_rng(seed)
    a, b, c = r.normal(size=(3, 4)), r.normal(size=(4, 5)), r.normal(size=(5, 2))
    left, right = (a @ b) @ c, a @ (b @ c)
    assert np.max(np.abs(left - right)) <= 1e-9 * max(1.0, np.max(np.abs(left)))
    assert np.array_equal(a.T.T, a)
