"""Hot numeric kernels with a numba path and a pure-numpy fallback.

The numba path is used when numba imports cleanly and the environment
variable ``MSCLIP_DISABLE_NUMBA`` is unset (or set to ``0``/``false``).
Both paths are always importable as ``np_<name>`` and ``nb_<name>`` so they
can be compared against each other; the public names dispatch to one of them.
"""

from __future__ import annotations

import math
import os

import numpy as np

CUBIC_A = -0.5
LN_EPS = 1e-5
_GELU_C = math.sqrt(2.0 / math.pi)


def _flag_disabled(value: str | None) -> bool:
    return value is not None and value.strip().lower() not in ("", "0", "false", "no", "off")


try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        if len(args) == 1 and callable(args[0]):
            return args[0]
        return lambda f: f


USE_NUMBA = HAVE_NUMBA and not _flag_disabled(os.environ.get("MSCLIP_DISABLE_NUMBA"))


# ---------------------------------------------------------------------------
# cubic convolution resampling


def cubic_kernel(x: np.ndarray | float, a: float = CUBIC_A):
    """Keys cubic convolution kernel; ``a=-0.5`` gives Catmull-Rom."""
    x = np.abs(np.asarray(x, dtype=np.float64))
    x2, x3 = x * x, x * x * x
    inner = (a + 2.0) * x3 - (a + 3.0) * x2 + 1.0
    outer = a * x3 - 5.0 * a * x2 + 8.0 * a * x - 4.0 * a
    return np.where(x <= 1.0, inner, np.where(x < 2.0, outer, 0.0))


def resample_matrix(n_in: int, n_out: int, a: float = CUBIC_A) -> np.ndarray:
    """Dense (n_out, n_in) matrix applying 1-D cubic resampling with edge clamping."""
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    base = np.floor(src).astype(np.int64)
    frac = src - base
    mat = np.zeros((n_out, n_in), dtype=np.float64)
    rows = np.arange(n_out)
    for tap in (-1, 0, 1, 2):
        w = cubic_kernel(frac - tap, a)
        idx = np.clip(base + tap, 0, n_in - 1)
        np.add.at(mat, (rows, idx), w)
    return mat


def np_resize_stack(values: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize a (bands, H, W) float64 stack; separable matrix form."""
    _, h, w = values.shape
    my = resample_matrix(h, out_h)
    mx = resample_matrix(w, out_w)
    return np.einsum("oh,bhw,pw->bop", my, values, mx, optimize=True)


@njit(cache=True)
def _nb_cubic(x, a):
    x = abs(x)
    if x <= 1.0:
        return ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0
    if x < 2.0:
        return ((a * x - 5.0 * a) * x + 8.0 * a) * x - 4.0 * a
    return 0.0


@njit(cache=True)
def _nb_resize_axis_last(src, n_out, a):
    rows, n_in = src.shape
    out = np.zeros((rows, n_out))
    scale = n_in / n_out
    for j in range(n_out):
        s = (j + 0.5) * scale - 0.5
        b = math.floor(s)
        f = s - b
        for tap in range(-1, 3):
            w = _nb_cubic(f - tap, a)
            k = b + tap
            if k < 0:
                k = 0
            elif k > n_in - 1:
                k = n_in - 1
            for r in range(rows):
                out[r, j] += w * src[r, k]
    return out


@njit(cache=True)
def nb_resize_stack(values, out_h, out_w):
    nb, h, w = values.shape
    out = np.empty((nb, out_h, out_w))
    for b in range(nb):
        tmp = _nb_resize_axis_last(values[b], out_w, CUBIC_A)  # (h, out_w)
        res = _nb_resize_axis_last(np.ascontiguousarray(tmp.T), out_h, CUBIC_A)  # (out_w, out_h)
        out[b] = res.T
    return out


# ---------------------------------------------------------------------------
# layer norm over the last axis of a 2-D array


def np_layer_norm_forward(x, gamma, beta):
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * rstd
    return xhat * gamma + beta, xhat, rstd[:, 0]


def np_layer_norm_backward(dy, xhat, rstd, gamma):
    dgamma = (dy * xhat).sum(axis=0)
    dbeta = dy.sum(axis=0)
    dxhat = dy * gamma
    dx = (dxhat - dxhat.mean(axis=1, keepdims=True)
          - xhat * (dxhat * xhat).mean(axis=1, keepdims=True)) * rstd[:, None]
    return dx, dgamma, dbeta


@njit(cache=True)
def nb_layer_norm_forward(x, gamma, beta):
    m, d = x.shape
    y = np.empty_like(x)
    xhat = np.empty_like(x)
    rstd = np.empty(m, dtype=x.dtype)
    for i in range(m):
        mu = 0.0
        for j in range(d):
            mu += x[i, j]
        mu /= d
        var = 0.0
        for j in range(d):
            c = x[i, j] - mu
            var += c * c
        var /= d
        r = 1.0 / math.sqrt(var + LN_EPS)
        rstd[i] = r
        for j in range(d):
            h = (x[i, j] - mu) * r
            xhat[i, j] = h
            y[i, j] = h * gamma[j] + beta[j]
    return y, xhat, rstd


@njit(cache=True)
def nb_layer_norm_backward(dy, xhat, rstd, gamma):
    m, d = dy.shape
    dx = np.empty_like(dy)
    dgamma = np.zeros(d, dtype=np.float64)
    dbeta = np.zeros(d, dtype=np.float64)
    for i in range(m):
        s1 = 0.0
        s2 = 0.0
        for j in range(d):
            g = dy[i, j] * gamma[j]
            s1 += g
            s2 += g * xhat[i, j]
            dgamma[j] += dy[i, j] * xhat[i, j]
            dbeta[j] += dy[i, j]
        s1 /= d
        s2 /= d
        for j in range(d):
            dx[i, j] = (dy[i, j] * gamma[j] - s1 - xhat[i, j] * s2) * rstd[i]
    return dx, dgamma.astype(dy.dtype), dbeta.astype(dy.dtype)


# ---------------------------------------------------------------------------
# tanh-approximated GELU


def np_gelu_forward(x):
    t = np.tanh(_GELU_C * (x + 0.044715 * x * x * x))
    return 0.5 * x * (1.0 + t), t


def np_gelu_backward(dy, x, t):
    dt = _GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
    return dy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dt)


@njit(cache=True, error_model="numpy")
def _nb_gelu_fwd_flat(x, y, t):
    for i in range(x.size):
        v = x[i]
        u = _GELU_C * (v + 0.044715 * v * v * v)
        # scalar libm tanh is slow; the exp form is accurate in absolute terms, which is all 1 + t needs
        th = 1.0 - 2.0 / (math.exp(2.0 * min(max(u, -20.0), 20.0)) + 1.0)
        t[i] = th
        y[i] = 0.5 * v * (1.0 + th)


@njit(cache=True)
def _nb_gelu_bwd_flat(dy, x, t, dx):
    for i in range(x.size):
        v = x[i]
        th = t[i]
        dt = _GELU_C * (1.0 + 3.0 * 0.044715 * v * v)
        dx[i] = dy[i] * (0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * dt)


def nb_gelu_forward(x):
    x = np.ascontiguousarray(x)
    y = np.empty_like(x)
    t = np.empty_like(x)
    _nb_gelu_fwd_flat(x.reshape(-1), y.reshape(-1), t.reshape(-1))
    return y, t


def nb_gelu_backward(dy, x, t):
    dy = np.ascontiguousarray(dy)
    dx = np.empty_like(dy)
    _nb_gelu_bwd_flat(dy.reshape(-1), np.ascontiguousarray(x).reshape(-1),
                      np.ascontiguousarray(t).reshape(-1), dx.reshape(-1))
    return dx


# ---------------------------------------------------------------------------
# row softmax, optional causal mask (row i attends to columns <= i)


def np_softmax_rows(s, causal: bool = False):
    s = np.array(s, copy=True)
    if causal:
        t = s.shape[-1]
        s[..., np.triu(np.ones((t, t), dtype=bool), k=1)] = -np.inf
    s -= s.max(axis=-1, keepdims=True)
    np.exp(s, out=s)
    s /= s.sum(axis=-1, keepdims=True)
    return s


@njit(cache=True)
def _nb_softmax_3d(s, causal, out):
    nb, t, u = s.shape
    for b in range(nb):
        for i in range(t):
            lim = i + 1 if causal else u
            mx = s[b, i, 0]
            for j in range(1, lim):
                if s[b, i, j] > mx:
                    mx = s[b, i, j]
            tot = 0.0
            for j in range(lim):
                e = math.exp(s[b, i, j] - mx)
                out[b, i, j] = e
                tot += e
            inv = 1.0 / tot
            for j in range(lim):
                out[b, i, j] *= inv
            for j in range(lim, u):
                out[b, i, j] = 0.0


def nb_softmax_rows(s, causal: bool = False):
    shape = s.shape
    s3 = np.ascontiguousarray(s).reshape(-1, shape[-2], shape[-1])
    out = np.empty_like(s3)
    _nb_softmax_3d(s3, causal, out)
    return out.reshape(shape)


# ---------------------------------------------------------------------------
# average precision over a ranked relevance vector


def np_ap_from_relevance(rel: np.ndarray, n_relevant: int, k: int) -> float:
    top = np.asarray(rel[:k], dtype=np.float64)
    if n_relevant == 0:
        return 0.0
    hits = np.cumsum(top)
    prec = (hits / np.arange(1, top.size + 1))[top > 0]
    if prec.size == 0:
        return 0.0
    # cumsum adds left to right, unlike the pairwise .sum(), so both backends agree bit for bit
    return float(np.cumsum(prec)[-1] / min(n_relevant, k))


@njit(cache=True)
def nb_ap_from_relevance(rel, n_relevant, k):
    if n_relevant == 0:
        return 0.0
    lim = min(k, rel.shape[0])
    hits = 0
    acc = 0.0
    for i in range(lim):
        if rel[i]:
            hits += 1
            acc += hits / (i + 1.0)
    return acc / min(n_relevant, k)


# ---------------------------------------------------------------------------
# dispatch

if USE_NUMBA:
    resize_stack = nb_resize_stack
    layer_norm_forward = nb_layer_norm_forward
    layer_norm_backward = nb_layer_norm_backward
    # numpy's vectorised tanh beats the scalar loop here (see benchmarks/bench_kernels.py)
    gelu_forward = np_gelu_forward
    gelu_backward = nb_gelu_backward
    softmax_rows = nb_softmax_rows
    ap_from_relevance = nb_ap_from_relevance
else:
    resize_stack = np_resize_stack
    layer_norm_forward = np_layer_norm_forward
    layer_norm_backward = np_layer_norm_backward
    gelu_forward = np_gelu_forward
    gelu_backward = np_gelu_backward
    softmax_rows = np_softmax_rows
    ap_from_relevance = np_ap_from_relevance


def backend() -> str:
    return "numba" if USE_NUMBA else "numpy"
