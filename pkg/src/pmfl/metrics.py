"""Run-time measurements: update deviation, accuracy/loss, summary statistics.

The deviation metric scores how far the participants' update vectors fan out
from their mean direction; perfectly aligned updates give zero, orthogonal
ones one unit each.  It is the per-round consistency signal the contrastive
term is supposed to push down.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .contrastive import cosine_similarity
from .nn import ModelParams, cross_entropy, forward_logits

log = logging.getLogger(__name__)


def update_deviation(updates: list[np.ndarray]) -> float:
    """Sum over participants of (1 - cos(update, mean update)).

    Pass the participants' update vectors only.  A single participant gives
    exactly 0; an all-zero mean is degenerate and reported as 0 with a
    warning.
    """
    if len(updates) == 0:
        raise ValueError("deviation needs at least one participant update")
    stack = np.stack([np.asarray(u, dtype=np.float64) for u in updates])
    mean = stack.mean(axis=0)
    if not mean.any():
        log.warning("mean update is the zero vector, deviation reported as 0")
        return 0.0
    return float(sum(1.0 - cosine_similarity(u, mean) for u in stack))


def evaluate(params: ModelParams, features: np.ndarray, labels: np.ndarray) -> tuple[float, float]:
    """(argmax accuracy, mean cross-entropy) of the model on a labelled set."""
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if features.shape[0] == 0:
        raise ValueError("cannot evaluate on an empty set")
    logits = forward_logits(params, features)
    pred = np.argmax(logits, axis=1)  # ties break to the lowest class index
    acc = float((pred == labels).mean())
    return acc, cross_entropy(logits, labels)


def top5_mean(values) -> float:
    """Mean of the five largest values; short series use all of them."""
    arr = np.asarray(list(values), dtype=np.float64)
    if arr.size == 0:
        raise ValueError("top5_mean needs at least one value")
    if arr.size < 5:
        log.warning("top5_mean over only %d values", arr.size)
        return float(arr.mean())
    top = np.sort(arr)[-5:]
    return float(top.mean())


def node_cdf(values) -> np.ndarray:
    """(value, cumulative fraction) rows, sorted ascending by value."""
    arr = np.sort(np.asarray(list(values), dtype=np.float64))
    if arr.size == 0:
        return np.zeros((0, 2))
    fractions = np.arange(1, arr.size + 1) / arr.size
    return np.column_stack([arr, fractions])


@dataclass
class RoundMetrics:
    """Everything recorded about one round; evaluation fields stay None on
    rounds where the model was not scored."""

    round_idx: int
    num_participants: int
    psi: float | None = None
    deviation: float | None = None
    train_accuracy: float | None = None
    train_loss: float | None = None
    test_accuracy: float | None = None
    test_loss: float | None = None
    weights: np.ndarray | None = None
