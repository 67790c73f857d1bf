"""Student and generator losses. All reduce over the batch by mean."""
from __future__ import annotations

import numpy as np

from . import ndgrad as nd
from .ndgrad import ContractError, DimensionError, Node

LOSS_KINDS = ("l1", "kl", "ce", "multi_margin")
KL_FLOOR = 1e-12


def _check_same(p: Node, q) -> np.ndarray:
    qv = q.value if isinstance(q, Node) else np.asarray(q, dtype=np.float64)
    if p.shape != qv.shape:
        raise DimensionError(f"loss operands have shapes {p.shape} and {qv.shape}")
    return qv


def _check_one_hot(hard) -> np.ndarray:
    h = np.asarray(hard, dtype=np.float64)
    ok = h.ndim == 2 and np.all((h == 0.0) | (h == 1.0)) and np.all(h.sum(axis=1) == 1.0)
    if not ok:
        raise ContractError("hard labels must be one-hot rows")
    return h


def l1_per_sample(p, q) -> Node:
    """Per-row sum of |p - q|, shape (b, 1). ``q`` may itself be a Node."""
    p = nd._lift(p)
    _check_same(p, q)
    return nd.sum_(nd.abs_(nd.sub(p, q)), axis=1)


def l1_loss(p, q) -> Node:
    return nd.mean(l1_per_sample(p, q))


def ce_per_sample(logits, hard) -> Node:
    z = nd._lift(logits)
    h = _check_one_hot(hard)
    _check_same(z, h)
    picked = nd.sum_(nd.mul(z, h), axis=1)
    return nd.sub(nd.logsumexp(z), picked)


def ce_loss(logits, hard) -> Node:
    return nd.mean(ce_per_sample(logits, hard))


def multi_margin_per_sample(logits, hard, margin: float = 1.0) -> Node:
    z = nd._lift(logits)
    h = _check_one_hot(hard)
    _check_same(z, h)
    n_classes = z.shape[1]
    true_logit = nd.tile_cols(nd.sum_(nd.mul(z, h), axis=1), n_classes)
    hinge = nd.max0(nd.add(nd.sub(z, true_logit), margin))
    # the j == y term is max(0, margin) and is excluded by the mask
    off = nd.mul(hinge, 1.0 - h)
    return nd.mul(nd.sum_(off, axis=1), 1.0 / n_classes)


def multi_margin_loss(logits, hard, margin: float = 1.0) -> Node:
    return nd.mean(multi_margin_per_sample(logits, hard, margin))


def kl_per_sample(p_logits, q) -> Node:
    z = nd._lift(p_logits)
    qv = _check_same(z, q)
    if np.any(qv < 0) or np.any(np.abs(qv.sum(axis=1) - 1.0) > 1e-6):
        raise ContractError("KL target rows must be probability vectors")
    log_p = nd.log(nd.add(nd.softmax(z), KL_FLOOR))
    q_log_q = np.sum(qv * np.log(qv + KL_FLOOR), axis=1, keepdims=True)
    cross = nd.sum_(nd.mul(log_p, qv), axis=1)
    return nd.sub(q_log_q, cross)


def kl_loss(p_logits, q) -> Node:
    return nd.mean(kl_per_sample(p_logits, q))


def generator_loss_ds(s1, s2) -> Node:
    """Negative l1 distance between the two students' probability outputs."""
    s1 = nd._lift(s1)
    _check_same(s1, s2)
    return nd.mul(l1_loss(s1, s2), -1.0)


def student_loss(kind: str, logits: Node, target: np.ndarray, margin: float = 1.0) -> Node:
    """Dispatch on loss kind. ``target`` is a probability (or one-hot) array."""
    if kind == "l1":
        return l1_loss(nd.softmax(logits), target)
    if kind == "kl":
        return kl_loss(logits, target)
    if kind == "ce":
        return ce_loss(logits, _hardened(target))
    if kind == "multi_margin":
        return multi_margin_loss(logits, _hardened(target), margin)
    raise ValueError(f"unknown loss kind {kind!r}")


def per_sample_loss(kind: str, logits, target, margin: float = 1.0) -> Node:
    """Like :func:`student_loss` but unreduced, shape (b, 1)."""
    if kind == "l1":
        return l1_per_sample(nd.softmax(logits), target)
    if kind == "kl":
        return kl_per_sample(logits, target)
    if kind == "ce":
        return ce_per_sample(logits, _hardened(target))
    if kind == "multi_margin":
        return multi_margin_per_sample(logits, _hardened(target), margin)
    raise ValueError(f"unknown loss kind {kind!r}")


def _hardened(target) -> np.ndarray:
    t = np.asarray(target, dtype=np.float64)
    out = np.zeros_like(t)
    out[np.arange(len(t)), np.argmax(t, axis=1)] = 1.0
    return out
