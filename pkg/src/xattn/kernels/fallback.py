"""NumPy implementations of the attention kernels.

Selected by :mod:`xattn.kernels` when the compiled extension is missing or
disabled. Shapes follow the multi-head layout ``q: [n_h, n_q, s]``,
``k, v: [n_h, n_kv, s]``, ``probs: [n_h, n_q, n_kv]``; dtype float64.
"""

from __future__ import annotations

import numpy as np

BACKEND = "numpy"


def attn_probs(q: np.ndarray, k: np.ndarray, scale: float) -> np.ndarray:
    """Row-softmax of the scaled dot-product logits, per head."""
    logits = np.matmul(q, np.swapaxes(k, -1, -2)) * scale
    logits -= logits.max(axis=-1, keepdims=True)
    np.exp(logits, out=logits)
    logits /= logits.sum(axis=-1, keepdims=True)
    return logits


def attn_mix(probs: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Value mixing ``probs @ v``, per head."""
    return np.matmul(probs, v)


def attn_mix_backward(
    probs: np.ndarray, v: np.ndarray, d_out: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    d_probs = np.matmul(d_out, np.swapaxes(v, -1, -2))
    d_v = np.matmul(np.swapaxes(probs, -1, -2), d_out)
    return d_probs, d_v


def attn_probs_backward(
    probs: np.ndarray,
    q: np.ndarray,
    k: np.ndarray,
    scale: float,
    d_probs: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    # softmax jacobian: d_logits = p * (d_p - sum(d_p * p, rowwise))
    inner = np.sum(d_probs * probs, axis=-1, keepdims=True)
    d_logits = probs * (d_probs - inner)
    d_q = np.matmul(d_logits, k) * scale
    d_k = np.matmul(np.swapaxes(d_logits, -1, -2), q) * scale
    return d_q, d_k
