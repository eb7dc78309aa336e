"""Forward/backward primitives for the pre-norm transformer towers.

Every ``*_forward`` returns ``(output, cache)`` and the matching ``*_backward``
consumes the upstream gradient plus that cache, accumulating parameter
gradients into a ``grads`` dict keyed by full parameter name.
"""

from __future__ import annotations

from typing import Mapping, MutableMapping

import numpy as np

from . import _accel

Params = Mapping[str, np.ndarray]
Grads = MutableMapping[str, np.ndarray]


def _acc(grads: Grads, name: str, g: np.ndarray) -> None:
    if name in grads:
        grads[name] += g
    else:
        grads[name] = g


def linear_forward(x, w, b):
    return x @ w + b


def linear_backward(dy, x, w, grads: Grads, prefix: str):
    d_in = x.shape[-1]
    d_out = dy.shape[-1]
    x2 = x.reshape(-1, d_in)
    dy2 = dy.reshape(-1, d_out)
    _acc(grads, prefix + ".weight", x2.T @ dy2)
    _acc(grads, prefix + ".bias", dy2.sum(axis=0))
    return dy @ w.T


def layer_norm_forward(x, p: Params, prefix: str):
    shape = x.shape
    x2 = np.ascontiguousarray(x.reshape(-1, shape[-1]))
    y, xhat, rstd = _accel.layer_norm_forward(x2, p[prefix + ".weight"], p[prefix + ".bias"])
    return y.reshape(shape), (xhat, rstd, shape)


def layer_norm_backward(dy, cache, p: Params, grads: Grads, prefix: str):
    xhat, rstd, shape = cache
    dy2 = np.ascontiguousarray(dy.reshape(-1, shape[-1]))
    dx, dg, db = _accel.layer_norm_backward(dy2, xhat, rstd, p[prefix + ".weight"])
    _acc(grads, prefix + ".weight", dg)
    _acc(grads, prefix + ".bias", db)
    return dx.reshape(shape)


def _split_heads(t, heads):
    b, n, d = t.shape
    return t.reshape(b, n, heads, d // heads).transpose(0, 2, 1, 3)


def _merge_heads(t):
    b, h, n, dh = t.shape
    return t.transpose(0, 2, 1, 3).reshape(b, n, h * dh)


def attention_forward(x, p: Params, prefix: str, heads: int, causal: bool):
    q = _split_heads(linear_forward(x, p[prefix + ".q.weight"], p[prefix + ".q.bias"]), heads)
    k = _split_heads(linear_forward(x, p[prefix + ".k.weight"], p[prefix + ".k.bias"]), heads)
    v = _split_heads(linear_forward(x, p[prefix + ".v.weight"], p[prefix + ".v.bias"]), heads)
    scale = 1.0 / np.sqrt(q.shape[-1])
    scores = (q @ k.transpose(0, 1, 3, 2)) * np.asarray(scale, dtype=x.dtype)
    attn = _accel.softmax_rows(scores, causal)
    o = _merge_heads(attn @ v)
    y = linear_forward(o, p[prefix + ".out.weight"], p[prefix + ".out.bias"])
    return y, (x, q, k, v, attn, o, scale)


def attention_backward(dy, cache, p: Params, grads: Grads, prefix: str, heads: int):
    x, q, k, v, attn, o, scale = cache
    do = _split_heads(linear_backward(dy, o, p[prefix + ".out.weight"], grads, prefix + ".out"), heads)
    dattn = do @ v.transpose(0, 1, 3, 2)
    dv = attn.transpose(0, 1, 3, 2) @ do
    ds = attn * (dattn - (dattn * attn).sum(axis=-1, keepdims=True))
    ds *= np.asarray(scale, dtype=ds.dtype)
    dq = ds @ k
    dk = ds.transpose(0, 1, 3, 2) @ q
    dx = linear_backward(_merge_heads(dq), x, p[prefix + ".q.weight"], grads, prefix + ".q")
    dx += linear_backward(_merge_heads(dk), x, p[prefix + ".k.weight"], grads, prefix + ".k")
    dx += linear_backward(_merge_heads(dv), x, p[prefix + ".v.weight"], grads, prefix + ".v")
    return dx


def mlp_forward(x, p: Params, prefix: str):
    u = linear_forward(x, p[prefix + ".fc1.weight"], p[prefix + ".fc1.bias"])
    g, t = _accel.gelu_forward(u)
    y = linear_forward(g, p[prefix + ".fc2.weight"], p[prefix + ".fc2.bias"])
    return y, (x, u, t, g)


def mlp_backward(dy, cache, p: Params, grads: Grads, prefix: str):
    x, u, t, g = cache
    dg = linear_backward(dy, g, p[prefix + ".fc2.weight"], grads, prefix + ".fc2")
    du = _accel.gelu_backward(dg, u, t)
    return linear_backward(du, x, p[prefix + ".fc1.weight"], grads, prefix + ".fc1")


def block_forward(x, p: Params, prefix: str, heads: int, causal: bool):
    h1, c_ln1 = layer_norm_forward(x, p, prefix + ".ln1")
    a, c_attn = attention_forward(h1, p, prefix + ".attn", heads, causal)
    x1 = x + a
    h2, c_ln2 = layer_norm_forward(x1, p, prefix + ".ln2")
    m, c_mlp = mlp_forward(h2, p, prefix + ".mlp")
    return x1 + m, (c_ln1, c_attn, c_ln2, c_mlp)


def block_backward(dy, cache, p: Params, grads: Grads, prefix: str, heads: int):
    c_ln1, c_attn, c_ln2, c_mlp = cache
    dh2 = mlp_backward(dy, c_mlp, p, grads, prefix + ".mlp")
    dx1 = dy + layer_norm_backward(dh2, c_ln2, p, grads, prefix + ".ln2")
    dh1 = attention_backward(dx1, c_attn, p, grads, prefix + ".attn", heads)
    return dx1 + layer_norm_backward(dh1, c_ln1, p, grads, prefix + ".ln1")


def l2_normalize_forward(z):
    norm = np.sqrt((z * z).sum(axis=1, keepdims=True))
    return z / norm, norm


def l2_normalize_backward(dy, y, norm):
    return (dy - y * (dy * y).sum(axis=1, keepdims=True)) / norm
