"""Segmentation cross-entropy and event-raster BCE as autodiff nodes."""
from __future__ import annotations

import numpy as np

from .engine.tensor import make_node
from .errors import DimensionError, ValidationError

IGNORE = 255


def ce_loss(logits, target, ignore_index=IGNORE):
    """Mean softmax cross-entropy over non-ignored pixels (0 when all are ignored).

    ``logits`` is N x K x H x W, ``target`` an integer N x H x W array.
    """
    target = np.asarray(target)
    n, k = logits.shape[:2]
    if logits.ndim != 4 or target.shape != (n,) + logits.shape[2:]:
        raise DimensionError(f"ce_loss: logits {logits.shape} vs target {target.shape}")
    valid = target != ignore_index
    if np.any((target[valid] < 0) | (target[valid] >= k)):
        raise ValidationError(f"ce_loss: labels must be in 0..{k - 1} or {ignore_index}")
    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    logp = z - zmax - np.log(np.exp(z - zmax).sum(axis=1, keepdims=True))
    count = int(valid.sum())
    safe = np.where(valid, target, 0).astype(np.int64)
    picked = np.take_along_axis(logp, safe[:, None], axis=1)[:, 0]
    value = -(picked * valid).sum() / count if count else 0.0

    def back(g):
        if not count:
            return (np.zeros_like(z),)
        grad = np.exp(logp)
        np.put_along_axis(grad, safe[:, None], np.take_along_axis(grad, safe[:, None], 1) - 1, 1)
        grad *= valid[:, None] * (g / count)
        return (grad,)

    return make_node(np.asarray(value, dtype=z.dtype), (logits,), back, "ce_loss")


def bce_loss(logits, target):
    """Mean binary cross-entropy with logits, ``max(z,0) - z*t + log(1+exp(-|z|))``."""
    t = np.asarray(target, dtype=logits.dtype)
    if t.shape != logits.shape:
        raise DimensionError(f"bce_loss: logits {logits.shape} vs target {t.shape}")
    if t.size and (t.min() < 0 or t.max() > 1 or not np.all(np.isfinite(t))):
        raise ValidationError("bce_loss: targets must lie in [0, 1]")
    z = logits.data
    per = np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))
    value = per.mean()

    def back(g):
        s = np.exp(-np.logaddexp(0, -z))
        return ((s - t) * (g / z.size),)

    return make_node(np.asarray(value, dtype=z.dtype), (logits,), back, "bce_loss")
