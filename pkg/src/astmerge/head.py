"""Classification head and evaluation metrics.

The [CLS] embedding feeds one linear layer; probabilities come from softmax
(single-label) or elementwise sigmoid (multi-label). Metrics are top-1
accuracy and mean average precision in the precision-at-each-positive form
standard for audio tagging, with deterministic lowest-index tie-breaking.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError


@dataclass
class HeadWeights:
    linear: np.ndarray  # [d x n_classes]
    bias: np.ndarray  # [n_classes]


@dataclass
class Prediction:
    logits: np.ndarray
    probabilities: np.ndarray
    task_kind: str


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    """Max-subtracted softmax, stable for large logits."""
    shifted = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def sigmoid(logits: np.ndarray) -> np.ndarray:
    out = np.empty_like(logits, dtype=np.float64)
    pos = logits >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-logits[pos]))
    ez = np.exp(logits[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out.astype(logits.dtype) if logits.dtype == np.float32 else out


def classify(cls: np.ndarray, w: HeadWeights, task_kind: str) -> Prediction:
    """Linear readout plus the task's activation."""
    cls = np.asarray(cls, dtype=np.float32)
    if cls.shape[-1] != w.linear.shape[0]:
        raise ShapeError(
            f"CLS dim {cls.shape[-1]} does not match head input {w.linear.shape[0]}"
        )
    logits = cls @ w.linear + w.bias
    if task_kind == "single-label":
        probs = softmax(logits)
    elif task_kind == "multi-label":
        probs = sigmoid(logits)
    else:
        raise ConfigError(f"unknown task kind {task_kind!r}")
    return Prediction(logits=logits, probabilities=probs, task_kind=task_kind)


def accuracy(predictions: list[Prediction] | np.ndarray, labels: np.ndarray) -> float:
    """Fraction of samples whose argmax probability hits the label.

    Argmax ties resolve to the lowest class index. Single-label only.
    """
    if isinstance(predictions, np.ndarray):
        probs = predictions
    else:
        probs = np.stack([p.probabilities for p in predictions])
    labels = np.asarray(labels)
    if probs.shape[0] == 0:
        raise ConfigError("accuracy over an empty sample set is undefined")
    if probs.shape[0] != labels.shape[0]:
        raise ShapeError(
            f"{probs.shape[0]} predictions vs {labels.shape[0]} labels"
        )
    return float(np.mean(np.argmax(probs, axis=1) == labels))


def average_precision(scores: np.ndarray, labels: np.ndarray) -> float:
    """AP for one class: mean precision at each positive, ranked by
    descending score with ties going to the lower sample index."""
    order = np.argsort(-scores, kind="stable")
    ranked = labels[order].astype(bool)
    n_pos = int(ranked.sum())
    if n_pos == 0:
        raise ConfigError("average precision undefined without positives")
    hits = np.cumsum(ranked)
    ranks = np.arange(1, ranked.size + 1)
    return float((hits[ranked] / ranks[ranked]).sum() / n_pos)


def mean_average_precision(scores: np.ndarray, labels: np.ndarray) -> float:
    """Macro mAP over classes; classes with no positives are excluded."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape:
        raise ShapeError(f"scores {scores.shape} vs labels {labels.shape}")
    per_class = [
        average_precision(scores[:, c], labels[:, c])
        for c in range(scores.shape[1])
        if labels[:, c].sum() > 0
    ]
    if not per_class:
        raise ConfigError("no class has a positive label; mAP undefined")
    return float(np.mean(per_class))


def argmax_in_positives(scores: np.ndarray, labels: np.ndarray) -> float:
    """Multi-label 'accuracy' reconstruction: how often the top-scoring
    class is among the sample's positives. Reported for orientation only;
    mAP is the real multi-label metric."""
    scores = np.asarray(scores)
    labels = np.asarray(labels)
    top = np.argmax(scores, axis=1)
    return float(np.mean(labels[np.arange(labels.shape[0]), top] > 0))
