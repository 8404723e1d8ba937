"""Loss functions on probability vectors, plus their batched logit gradients.

The public scalar functions take a single probability vector and are what the
finite-difference checker differentiates. The ``*_grad`` helpers work on a
batch of softmax outputs and return ``(mean_loss, dloss/dlogits)``; training
uses only those.

Every log is floored at ``EPS`` so a zero probability yields ``-log(1e-12)``
rather than infinity. Where the floor is active the gradient is zero, which is
the derivative of the clamped expression.
"""

from __future__ import annotations

import numpy as np

from amlab.errors import DimensionError

EPS = 1e-12


def _as_prob(pred) -> np.ndarray:
    p = np.asarray(pred, dtype=np.float64)
    if p.ndim != 1:
        raise DimensionError(f"expected a probability vector, got shape {p.shape}")
    return p


def _check_label(p: np.ndarray, label: int) -> int:
    label = int(label)
    if not 0 <= label < p.shape[0]:
        raise IndexError(f"label {label} out of range for {p.shape[0]} classes")
    return label


def _clog(v):
    return np.log(np.maximum(v, EPS))


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(pred, label: int) -> float:
    p = _as_prob(pred)
    label = _check_label(p, label)
    return float(-_clog(p[label]))


def reverse_cross_entropy(pred, label: int) -> float:
    """``-log(1 - pred[label])``: zero when the true class gets no mass."""
    p = _as_prob(pred)
    label = _check_label(p, label)
    return float(-_clog(1.0 - p[label]))


def cross_entropy_to_uniform(pred) -> float:
    p = _as_prob(pred)
    return float(-_clog(p).mean())


def distillation_loss(pred, soft_target) -> float:
    p = _as_prob(pred)
    t = _as_prob(soft_target)
    if p.shape != t.shape:
        raise DimensionError(f"prediction has {p.shape[0]} classes, target has {t.shape[0]}")
    return float(-(t * _clog(p)).sum())


# -- batched gradients w.r.t. logits ---------------------------------------


def soft_ce_grad(probs: np.ndarray, targets: np.ndarray):
    """Mean of ``-sum_i t_i log p_i`` over the batch; ``targets`` rows sum to 1.

    With m_i = [p_i > EPS]: dL/dz_k = p_k * sum_i(t_i m_i) - t_k m_k.
    """
    n = probs.shape[0]
    mask = probs > EPS
    tm = targets * mask
    loss = -(targets * _clog(probs)).sum() / n
    grad = (probs * tm.sum(axis=1, keepdims=True) - tm) / n
    return float(loss), grad


def reverse_ce_grad(probs: np.ndarray, labels: np.ndarray):
    """Mean of ``-log(1 - p_y)``; dL/dz = (p_y / (1 - p_y)) * (e_y - p)."""
    n = probs.shape[0]
    rows = np.arange(n)
    p_y = probs[rows, labels]
    q = 1.0 - p_y
    active = q > EPS
    loss = -_clog(q).sum() / n
    coef = np.where(active, p_y / np.where(active, q, 1.0), 0.0)
    onehot = np.zeros_like(probs)
    onehot[rows, labels] = 1.0
    grad = coef[:, None] * (onehot - probs) / n
    return float(loss), grad


def uniform_ce_grad(probs: np.ndarray):
    k = probs.shape[1]
    return soft_ce_grad(probs, np.full_like(probs, 1.0 / k))


def one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.shape[0], num_classes))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out
