"""Symmetric InfoNCE over an image/text batch with analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NonFiniteInput, ShapeMismatch

NORM_TOL = 1e-4


@dataclass(frozen=True)
class ContrastiveBatch:
    image_embeddings: np.ndarray
    text_embeddings: np.ndarray
    log_temperature: float

    def validate(self) -> None:
        x, y = self.image_embeddings, self.text_embeddings
        if x.ndim != 2 or x.shape != y.shape or x.shape[0] < 1:
            raise ShapeMismatch(f"embedding shapes {x.shape} and {y.shape} must be equal (N>=1, D)")
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))
                and np.isfinite(self.log_temperature)):
            raise NonFiniteInput("non-finite embeddings or temperature")
        for name, m in (("image", x), ("text", y)):
            norms = np.linalg.norm(np.asarray(m, dtype=np.float64), axis=1)
            if np.max(np.abs(norms - 1.0)) > NORM_TOL:
                raise ValueError(f"{name} embeddings must be unit norm (within {NORM_TOL})")


def _log_softmax(a: np.ndarray, axis: int) -> np.ndarray:
    m = a.max(axis=axis, keepdims=True)
    return a - m - np.log(np.exp(a - m).sum(axis=axis, keepdims=True))


def _forward(x, y, log_t):
    scale = np.exp(log_t)
    logits = scale * (x @ y.T)
    lr = _log_softmax(logits, axis=1)
    lc = _log_softmax(logits, axis=0)
    n = x.shape[0]
    loss = -(np.trace(lr) + np.trace(lc)) / (2.0 * n) + 0.0  # no negative zero for N = 1
    return float(loss), logits, lr, lc


def info_nce(batch: ContrastiveBatch, check: bool = True) -> tuple[float, np.ndarray]:
    """Return ``(loss, logits)`` with ``logits[i, j] = exp(log_temperature) * <x_i, y_j>``.

    The row term treats images as queries against all texts, the column term
    texts against all images; both use max-subtracted log-sum-exp. Computed in
    float64 regardless of input dtype.
    """
    if check:
        batch.validate()
    x = np.asarray(batch.image_embeddings, dtype=np.float64)
    y = np.asarray(batch.text_embeddings, dtype=np.float64)
    loss, logits, _, _ = _forward(x, y, float(batch.log_temperature))
    return loss, logits


def info_nce_backward(batch: ContrastiveBatch, check: bool = True):
    """Return ``(loss, d_image, d_text, d_log_temperature)``.

    With ``G = (softmax_rows(L) + softmax_cols(L) - 2I) / 2N`` the gradients are
    ``dX = s G Y``, ``dY = s G^T X`` and ``d log_t = sum(G * L)``.
    """
    if check:
        batch.validate()
    x = np.asarray(batch.image_embeddings, dtype=np.float64)
    y = np.asarray(batch.text_embeddings, dtype=np.float64)
    log_t = float(batch.log_temperature)
    loss, logits, lr, lc = _forward(x, y, log_t)
    n = x.shape[0]
    g = (np.exp(lr) + np.exp(lc) - 2.0 * np.eye(n)) / (2.0 * n)
    s = np.exp(log_t)
    dx = s * (g @ y)
    dy = s * (g.T @ x)
    dlog_t = float((g * logits).sum())
    dtype = np.result_type(batch.image_embeddings)
    if not np.issubdtype(dtype, np.floating):
        dtype = np.float64
    return loss, dx.astype(dtype, copy=False), dy.astype(dtype, copy=False), dlog_t
