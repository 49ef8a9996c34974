"""NumPy implementations of the hot array kernels.

This is the uncompiled fallback backend. The Cython backend (_cyimpl)
mirrors these signatures and semantics exactly; scalar prefactors are
computed the same way in both so results agree to the last few ulps.
All inputs are C-contiguous float64 arrays.
"""

from __future__ import annotations

import numpy as np


def row_softmax(x: np.ndarray, tau: float) -> np.ndarray:
    """Row-wise softmax of x / tau with per-row max subtraction."""
    z = x / tau
    z -= z.max(axis=1, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=1, keepdims=True)
    return z


def row_log_softmax(x: np.ndarray, tau: float) -> np.ndarray:
    """Row-wise log-softmax of x / tau with per-row max subtraction."""
    z = x / tau
    z -= z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    z -= lse
    return z


def softmax_grad_z(p: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Gradient through p = softmax(z): returns p * (g - sum(g*p, row))."""
    dot = (g * p).sum(axis=1, keepdims=True)
    return p * (g - dot)


def log_softmax_grad_z(lp: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Gradient through lp = log_softmax(z): g - exp(lp) * sum(g, row)."""
    return g - np.exp(lp) * g.sum(axis=1, keepdims=True)


def row_l2_norms(x: np.ndarray) -> np.ndarray:
    """Per-row Euclidean norms."""
    return np.sqrt((x * x).sum(axis=1))


def row_l2_normalize_grad(y: np.ndarray, norms: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Gradient through y = x / ||x||: (g - y * sum(g*y, row)) / ||x||."""
    dot = (g * y).sum(axis=1, keepdims=True)
    return (g - y * dot) / norms[:, None]


def kl_rows_mean(p: np.ndarray, logq: np.ndarray) -> float:
    """Mean over rows of sum_j p_j * (log p_j - logq_j), with 0*log 0 := 0."""
    total = 0.0
    rows, cols = p.shape
    flat_p = p.reshape(-1)
    flat_q = logq.reshape(-1)
    nz = flat_p > 0.0
    total = float(np.sum(flat_p[nz] * (np.log(flat_p[nz]) - flat_q[nz])))
    return total / rows


def ema_update(k: np.ndarray, q: np.ndarray, m: float) -> None:
    """In-place k <- m*k + (1-m)*q, elementwise."""
    omm = 1.0 - m
    k *= m
    k += omm * q


def adamw_update(
    w: np.ndarray,
    g: np.ndarray,
    m: np.ndarray,
    v: np.ndarray,
    lr: float,
    beta1: float,
    beta2: float,
    bc1: float,
    bc2: float,
    eps: float,
    wd: float,
) -> None:
    """In-place AdamW step with precomputed bias corrections bc1, bc2.

    Decoupled decay: w <- w - lr*wd*w - lr*mhat/(sqrt(vhat)+eps).
    """
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * (g * g)
    mhat = m / bc1
    vhat = v / bc2
    w -= (lr * wd) * w + lr * mhat / (np.sqrt(vhat) + eps)
