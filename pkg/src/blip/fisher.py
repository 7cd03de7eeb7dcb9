"""Diagonal empirical Fisher information and its running average over tasks."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from blip.nn import Network, _check_inputs, _trace, backprop, log_softmax


@dataclass
class FisherVector:
    values: np.ndarray
    task_count: int = 0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if not np.isfinite(self.values).all():
            raise ValueError("Fisher entries must be finite")
        if (self.values < 0).any():
            raise ValueError("Fisher entries must be non-negative")


def sample_labels(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One categorical draw per row of ``probs`` (inverse-CDF on a uniform)."""
    cdf = np.cumsum(probs, axis=1)
    u = rng.random((len(probs), 1)) * cdf[:, -1:]
    return np.minimum((cdf <= u).sum(axis=1), probs.shape[1] - 1)


def estimate_fisher(net: Network, inputs: np.ndarray, task_id: int, rng: np.random.Generator,
                    max_samples: int | None = None, chunk: int = 512) -> FisherVector:
    """Mean over datapoints of the squared score ``d ln p(y|x) / d theta``
    with ``y`` drawn from the model's own predictive distribution.

    Entries outside the backbone and the head of ``task_id`` stay zero.
    """
    inputs = np.asarray(inputs, dtype=np.float64)
    if len(inputs) == 0:
        raise ValueError("cannot estimate Fisher information from empty data")
    if max_samples is not None and max_samples < len(inputs):
        inputs = inputs[np.sort(rng.choice(len(inputs), max_samples, replace=False))]
    _check_inputs(net, inputs, task_id)
    total = np.zeros_like(net.params)
    part = np.zeros_like(net.params)
    for start in range(0, len(inputs), chunk):
        x = inputs[start:start + chunk]
        acts, logits = _trace(net, net.params, x, task_id)
        probs = np.exp(log_softmax(logits))
        y = sample_labels(probs, rng)
        # d ln p(y|x) / d logits = onehot(y) - p; the sign vanishes when squared
        dlogits = probs
        dlogits[np.arange(len(y)), y] -= 1.0
        backprop(net, net.params, acts, dlogits, task_id, part, squared=True)
        for span in net.active_slices(task_id):
            total[span] += part[span]
    total /= len(inputs)
    return FisherVector(total, task_count=1)


def exact_fisher(net: Network, inputs: np.ndarray, task_id: int) -> FisherVector:
    """Fisher with the label expectation taken exactly over all classes."""
    inputs = np.asarray(inputs, dtype=np.float64)
    total = np.zeros_like(net.params)
    part = np.zeros_like(net.params)
    acts, logits = _trace(net, net.params, inputs, task_id)
    probs = np.exp(log_softmax(logits))
    for label in range(probs.shape[1]):
        dlogits = probs.copy()
        dlogits[:, label] -= 1.0
        weighted = dlogits * np.sqrt(probs[:, label:label + 1])
        backprop(net, net.params, acts, weighted, task_id, part, squared=True)
        for span in net.active_slices(task_id):
            total[span] += part[span]
    total /= len(inputs)
    return FisherVector(total, task_count=1)


def fisher_recursion(f_prev: FisherVector, f_t: FisherVector, t: int, mask=None) -> FisherVector:
    """Running average ``(t * F_prev + F_t) / (t + 1)``; entries outside
    ``mask`` keep their previous value."""
    if t < 1:
        raise ValueError("t must be at least 1")
    if f_prev.values.shape != f_t.values.shape:
        raise ValueError(f"misaligned Fisher vectors: {f_prev.values.shape} vs {f_t.values.shape}")
    merged = (t * f_prev.values + f_t.values) / (t + 1)
    if mask is not None:
        merged = np.where(mask, merged, f_prev.values)
    return FisherVector(merged, task_count=t)
