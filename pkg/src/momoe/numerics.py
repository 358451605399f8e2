"""Dense float64 matrix helpers and the handful of gradient rules the trainable path needs.

A "matrix" here is simply a 2-D ``numpy.ndarray`` of dtype float64. Functions
never modify their inputs.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .errors import InputError, ShapeError

RMS_EPS = 1e-6

Matrix = np.ndarray


def seeded_rng(seed: int) -> np.random.Generator:
    """PCG64 generator; identical seeds give identical streams."""
    return np.random.default_rng(np.uint64(seed))


def as_matrix(values, rows: int | None = None, cols: int | None = None) -> Matrix:
    m = np.array(values, dtype=np.float64)
    if m.ndim == 1:
        m = m.reshape(1, -1)
    if m.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got {m.ndim} dims")
    if (rows is not None and m.shape[0] != rows) or (cols is not None and m.shape[1] != cols):
        raise ShapeError(f"expected {rows}x{cols}, got {m.shape[0]}x{m.shape[1]}")
    return m


def matmul(a: Matrix, b: Matrix) -> Matrix:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError("matmul expects 2-D operands")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape[0]}x{a.shape[1]} by {b.shape[0]}x{b.shape[1]}")
    return a @ b


def softmax_rows(m: Matrix) -> Matrix:
    """Row-wise softmax with max subtraction (safe for arbitrarily large inputs)."""
    if m.size == 0:
        raise ShapeError("softmax of an empty matrix")
    z = m - m.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax_rows(m: Matrix) -> Matrix:
    z = m - m.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def silu(m: Matrix) -> Matrix:
    return m * sigmoid(m)


def silu_grad(m: Matrix) -> Matrix:
    """Elementwise d silu(x) / dx = s(x) * (1 + x * (1 - s(x)))."""
    s = sigmoid(m)
    return s * (1.0 + m * (1.0 - s))


def rmsnorm(x: Matrix, gain: Matrix) -> Matrix:
    if gain.shape != (1, x.shape[-1]):
        raise ShapeError(f"gain must be 1x{x.shape[-1]}, got {gain.shape}")
    scale = 1.0 / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + RMS_EPS)
    return x * scale * gain


def rmsnorm_backward(upstream: Matrix, x: Matrix, gain: Matrix) -> Matrix:
    """Input gradient of :func:`rmsnorm` (the gain is frozen everywhere it is used)."""
    n = x.shape[-1]
    scale = 1.0 / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + RMS_EPS)
    dg = upstream * gain
    dot = np.sum(dg * x, axis=-1, keepdims=True)
    return scale * dg - (scale**3 / n) * x * dot


def cross_entropy(
    logits: Matrix, targets: Sequence[int], mask: Sequence[int]
) -> tuple[float, Matrix]:
    """Mean negative log-likelihood over rows with ``mask == 1``.

    Returns ``(loss, dloss/dlogits)``; unmasked rows get a zero gradient.
    """
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    mask = np.asarray(mask).reshape(-1)
    n, vocab = logits.shape
    if targets.shape[0] != n or mask.shape[0] != n:
        raise ShapeError(f"logits have {n} rows but targets/mask have {targets.shape[0]}/{mask.shape[0]}")
    if np.any(targets < 0) or np.any(targets >= vocab):
        raise InputError("target id outside the vocabulary")
    rows = np.flatnonzero(mask)
    if rows.size == 0:
        raise InputError("empty loss support")
    logp = log_softmax_rows(logits[rows])
    picked = logp[np.arange(rows.size), targets[rows]]
    loss = float(-picked.sum() / rows.size)
    grad = np.zeros_like(logits, dtype=np.float64)
    probs = np.exp(logp)
    probs[np.arange(rows.size), targets[rows]] -= 1.0
    grad[rows] = probs / rows.size
    return loss, grad
