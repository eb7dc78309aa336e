from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_unit_rows
from msclip.errors import NonFiniteInput, ShapeMismatch
from msclip.loss import ContrastiveBatch, info_nce, info_nce_backward


def naive_loss(x, y, log_t):
    """Direct transcription of the symmetric InfoNCE sum, no stabilisation, plain loops."""
    n = len(x)
    inv_tau = math.exp(log_t)
    sim = [[inv_tau * sum(a * b for a, b in zip(x[i], y[j])) for j in range(n)] for i in range(n)]
    total = 0.0
    for i in range(n):
        row = sum(math.exp(sim[i][j]) for j in range(n))
        col = sum(math.exp(sim[j][i]) for j in range(n))
        total += math.log(math.exp(sim[i][i]) / row) + math.log(math.exp(sim[i][i]) / col)
    return -total / (2 * n)


def fd_gradients(x, y, log_t, h=1e-4):
    def f(xx, yy, tt):
        return info_nce(ContrastiveBatch(xx, yy, tt), check=False)[0]

    gx, gy = np.zeros_like(x), np.zeros_like(y)
    for m, g in ((x, gx), (y, gy)):
        for idx in np.ndindex(m.shape):
            old = m[idx]
            m[idx] = old + h
            fp = f(x, y, log_t)
            m[idx] = old - h
            fm = f(x, y, log_t)
            m[idx] = old
            g[idx] = (fp - fm) / (2 * h)
    gt = (f(x, y, log_t + h) - f(x, y, log_t - h)) / (2 * h)
    return gx, gy, gt


def max_rel_err(a, b):
    a, b = np.atleast_1d(a), np.atleast_1d(b)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-3)))


def test_single_pair_is_zero():
    x = np.array([[0.6, 0.8]])
    loss, logits = info_nce(ContrastiveBatch(x, x, 2.0))
    assert loss == 0.0 and not math.copysign(1, loss) < 0
    assert logits.shape == (1, 1)


@pytest.mark.parametrize("n", [2, 8, 32])
def test_uniform_similarity_gives_log_n(n):
    e = np.tile([[1.0, 0.0, 0.0]], (n, 1))
    loss, _ = info_nce(ContrastiveBatch(e, e, math.log(1 / 0.07)))
    assert abs(loss - math.log(n)) < 1e-6


def test_hand_case_n2():
    x = np.eye(2)
    loss, logits = info_nce(ContrastiveBatch(x, x, 0.0))
    assert abs(loss - math.log(1 + math.exp(-1))) < 1e-12
    assert abs(loss - 0.313262) < 1e-5
    np.testing.assert_array_equal(logits, np.eye(2))


@given(st.integers(0, 2**32 - 1), st.integers(1, 6), st.integers(1, 5), st.floats(-2.0, 3.0))
@settings(max_examples=60, deadline=None)
def test_matches_naive_oracle(seed, n, d, log_t):
    rng = np.random.default_rng(seed)
    x, y = random_unit_rows(rng, n, d), random_unit_rows(rng, n, d)
    loss, _ = info_nce(ContrastiveBatch(x, y, log_t))
    assert abs(loss - naive_loss(x.tolist(), y.tolist(), log_t)) < 1e-10
    assert loss >= 0


@given(st.integers(0, 2**32 - 1), st.integers(1, 8))
@settings(max_examples=60, deadline=None)
def test_symmetry_and_permutation(seed, n):
    rng = np.random.default_rng(seed)
    x, y = random_unit_rows(rng, n, 6), random_unit_rows(rng, n, 6)
    b = ContrastiveBatch(x, y, 1.3)
    loss, dx, dy, dt = info_nce_backward(b)
    loss_s, dx_s, dy_s, dt_s = info_nce_backward(ContrastiveBatch(y, x, 1.3))
    assert abs(loss - loss_s) < 1e-12
    np.testing.assert_allclose(dx, dy_s, atol=1e-12)
    np.testing.assert_allclose(dy, dx_s, atol=1e-12)
    perm = rng.permutation(n)
    assert abs(info_nce(ContrastiveBatch(x[perm], y[perm], 1.3))[0] - loss) < 1e-12


@given(st.integers(0, 2**32 - 1), st.integers(2, 6))
@settings(max_examples=40, deadline=None)
def test_image_gradient_in_text_span(seed, n):
    rng = np.random.default_rng(seed)
    x, y = random_unit_rows(rng, n, 10), random_unit_rows(rng, n, 10)
    _, dx, _, _ = info_nce_backward(ContrastiveBatch(x, y, 0.7))
    coef, *_ = np.linalg.lstsq(y.T, dx.T, rcond=None)
    np.testing.assert_allclose(y.T @ coef, dx.T, atol=1e-10)


def test_finite_differences_n4_d8():
    rng = np.random.default_rng(11)
    x, y = random_unit_rows(rng, 4, 8), random_unit_rows(rng, 4, 8)
    _, dx, dy, dt = info_nce_backward(ContrastiveBatch(x, y, 1.1))
    gx, gy, gt = fd_gradients(x.copy(), y.copy(), 1.1)
    assert max(max_rel_err(dx, gx), max_rel_err(dy, gy), max_rel_err(dt, gt)) < 1e-5


def test_saturated_batch_has_tiny_gradient():
    x = np.array([[1.0, 0.0], [-1.0, 0.0]])
    _, dx, dy, dt = info_nce_backward(ContrastiveBatch(x, x, math.log(100.0)))
    assert np.linalg.norm(dx) < 1e-3 and np.linalg.norm(dy) < 1e-3 and abs(dt) < 1e-3


def test_validation_errors():
    x = np.eye(2)
    with pytest.raises(NonFiniteInput):
        info_nce(ContrastiveBatch(np.array([[np.nan, 1.0], [0.0, 1.0]]), x, 0.0))
    with pytest.raises(NonFiniteInput):
        info_nce(ContrastiveBatch(x, x, float("inf")))
    with pytest.raises(ShapeMismatch):
        info_nce(ContrastiveBatch(x, np.eye(3), 0.0))
    with pytest.raises(ValueError):
        info_nce(ContrastiveBatch(2 * x, x, 0.0))


def test_gradient_dtype_follows_input():
    x = np.eye(3, dtype=np.float32)
    _, dx, dy, _ = info_nce_backward(ContrastiveBatch(x, x, 0.0))
    assert dx.dtype == np.float32 and dy.dtype == np.float32
