"""The numba kernels and their numpy twins must agree."""

from __future__ import annotations

import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from msclip import _accel as A

seeds = st.integers(0, 2**32 - 1)


@given(seeds, st.integers(1, 4), st.integers(2, 20), st.integers(2, 20), st.integers(1, 24), st.integers(1, 24))
@settings(max_examples=40, deadline=None)
def test_resize_parity(seed, b, h, w, oh, ow):
    x = np.random.default_rng(seed).uniform(0, 10000, (b, h, w))
    np.testing.assert_allclose(A.nb_resize_stack(x, oh, ow), A.np_resize_stack(x, oh, ow),
                               rtol=1e-12, atol=1e-8)


def test_resample_matrix_rows_sum_to_one():
    for n_in, n_out in ((64, 32), (7, 13), (1, 5), (5, 1)):
        np.testing.assert_allclose(A.resample_matrix(n_in, n_out).sum(axis=1), 1.0, atol=1e-12)


@given(seeds, st.integers(1, 30), st.integers(2, 40))
@settings(max_examples=40, deadline=None)
def test_layer_norm_parity(seed, m, d):
    rng = np.random.default_rng(seed)
    x, g, b = rng.standard_normal((m, d)) * 3, rng.standard_normal(d), rng.standard_normal(d)
    dy = rng.standard_normal((m, d))
    fw_np, fw_nb = A.np_layer_norm_forward(x, g, b), A.nb_layer_norm_forward(x, g, b)
    for a, c in zip(fw_np, fw_nb):
        np.testing.assert_allclose(c, a, rtol=1e-10, atol=1e-12)
    _, xhat, rstd = fw_np
    for a, c in zip(A.np_layer_norm_backward(dy, xhat, rstd, g), A.nb_layer_norm_backward(dy, xhat, rstd, g)):
        np.testing.assert_allclose(c, a, rtol=1e-10, atol=1e-10)


@given(seeds)
@settings(max_examples=30, deadline=None)
def test_gelu_parity(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((3, 5, 7)) * 4
    x.flat[0], x.flat[1] = 60.0, -60.0
    y_np, t_np = A.np_gelu_forward(x)
    y_nb, t_nb = A.nb_gelu_forward(x)
    np.testing.assert_allclose(y_nb, y_np, rtol=1e-12, atol=1e-14)
    np.testing.assert_allclose(t_nb, t_np, atol=1e-14)
    dy = rng.standard_normal(x.shape)
    np.testing.assert_allclose(A.nb_gelu_backward(dy, x, t_np), A.np_gelu_backward(dy, x, t_np), rtol=1e-13)


def test_gelu_float32_dtype_preserved():
    x = np.linspace(-3, 3, 11, dtype=np.float32)
    for fn in (A.np_gelu_forward, A.nb_gelu_forward):
        y, _ = fn(x)
        assert y.dtype == np.float32


@given(seeds, st.booleans(), st.integers(1, 9))
@settings(max_examples=40, deadline=None)
def test_softmax_parity(seed, causal, t):
    s = np.random.default_rng(seed).standard_normal((2, 3, t, t)) * 5
    a, b = A.np_softmax_rows(s, causal), A.nb_softmax_rows(s, causal)
    np.testing.assert_allclose(b, a, rtol=1e-12, atol=1e-15)
    np.testing.assert_allclose(a.sum(axis=-1), 1.0, atol=1e-12)
    if causal:
        assert np.all(a[..., np.triu(np.ones((t, t), bool), k=1)] == 0.0)


@given(seeds, st.integers(0, 300), st.sampled_from([1, 10, 100]))
@settings(max_examples=100, deadline=None)
def test_ap_parity_exact(seed, n, k):
    rel = np.random.default_rng(seed).random(n) < 0.3
    nrel = int(rel.sum()) + 2
    assert A.nb_ap_from_relevance(rel, nrel, k) == A.np_ap_from_relevance(rel, nrel, k)


@pytest.mark.parametrize("value,disabled", [(None, False), ("", False), ("0", False), ("false", False),
                                            ("1", True), ("yes", True), ("TRUE", True)])
def test_flag_parsing(value, disabled):
    assert A._flag_disabled(value) is disabled


def test_env_flag_selects_numpy_backend():
    env = dict(os.environ, MSCLIP_DISABLE_NUMBA="1")
    code = "import msclip._accel as a; print(a.backend(), a.resize_stack is a.np_resize_stack)"
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.split() == ["numpy", "True"]
