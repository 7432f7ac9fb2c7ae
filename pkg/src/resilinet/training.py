"""Plain minibatch SGD on cross-entropy."""

from __future__ import annotations

import logging
import math

import numpy as np

from .engine import BATCHNORM, BN_MOMENTUM, ModelGraph, backward, forward, sgd_step, softmax_cross_entropy
from .modelio import Dataset

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    """The loss became NaN or infinite."""


def mean_loss(model: ModelGraph, ds: Dataset, batch_size: int = 512) -> float:
    """Inference-mode cross-entropy averaged over ``ds``."""
    total = 0.0
    for start in range(0, len(ds), batch_size):
        logits = forward(model, ds.images[start : start + batch_size])
        loss, _ = softmax_cross_entropy(logits, ds.labels[start : start + batch_size])
        total += loss * len(logits)
    return total / len(ds)


def _update_running_stats(model: ModelGraph, updates) -> None:
    m = np.float32(BN_MOMENTUM)
    for i, (mean, var, count) in updates.items():
        p = model.params[i]
        unbiased = var * np.float32(count / max(count - 1, 1))
        p["running_mean"] = ((1 - m) * p["running_mean"] + m * mean).astype(np.float32)
        p["running_var"] = ((1 - m) * p["running_var"] + m * unbiased).astype(np.float32)


def train_sgd(
    model: ModelGraph,
    ds: Dataset,
    epochs: int,
    lr: float,
    batch_size: int = 32,
    seed: int = 0,
) -> ModelGraph:
    """Train a copy of ``model``; shuffling comes from ``default_rng(seed)``.

    Batchnorm layers use batch statistics and update their running
    statistics with momentum 0.1.  With ``lr == 0`` nothing is learned and
    the model is returned unchanged, running statistics included.
    """
    if lr == 0:
        return model.copy()
    has_bn = any(s.kind == BATCHNORM for s in model.layers)
    rng = np.random.default_rng(seed)
    for epoch in range(epochs):
        order = rng.permutation(len(ds))
        running = 0.0
        for start in range(0, len(ds), batch_size):
            idx = order[start : start + batch_size]
            if has_bn and len(idx) < 2:
                continue
            logits, cache = forward(model, ds.images[idx], keep_cache=True, training=True)
            loss, dlogits = softmax_cross_entropy(logits, ds.labels[idx])
            if not math.isfinite(loss):
                raise TrainingDiverged(f"loss became {loss} in epoch {epoch}, batch starting at {start}")
            grads = backward(model, cache, dlogits)
            model = sgd_step(model, grads, lr)
            _update_running_stats(model, cache.bn_updates)
            running += loss * len(idx)
        log.debug("epoch %d: mean training loss %.4f", epoch, running / len(ds))
    return model
