"""Numpy implementations of the row-wise loss kernels.

These are the reference versions; ``_ckernels`` must agree with them to
round-off. Every function takes C-contiguous float64 2-D arrays (one row per
instance) and never mutates its inputs.
"""
import numpy as np

EPS = 1e-12


def sigmoid_rows(z):
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    e = np.exp(z[~pos])
    out[~pos] = e / (1.0 + e)
    return np.clip(out, EPS, 1.0 - EPS)


def softmax_rows(z, temperature):
    s = np.asarray(z, dtype=np.float64) / temperature
    s = s - s.max(axis=1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=1, keepdims=True)


def softmax_xent(target, z, temperature):
    """Row-wise CE(target, SF(z, T)) and its gradient with respect to ``z``."""
    p = softmax_rows(z, temperature)
    values = -(target * np.log(np.maximum(p, EPS))).sum(axis=1)
    grad = (target.sum(axis=1, keepdims=True) * p - target) / temperature
    return values, grad


def sigmoid_bce(target, z):
    """Row-wise BCE(target, sigmoid(z)) and its gradient with respect to ``z``."""
    s = sigmoid_rows(z)
    values = -(target * np.log(s) + (1.0 - target) * np.log(1.0 - s)).sum(axis=1)
    return values, s - target


def bin_expectation_rows(z, centers):
    """Softmax (T=1) of each row dotted with the bin centers; returns (means, probs)."""
    p = softmax_rows(z, 1.0)
    return p @ centers, p
