"""Cross-model knowledge distillation loss over precomputed teacher logits.

The training objective is a convex combination of a ground-truth term and a
distillation term:

    loss = lambda * L_g(act(Z_s), y) + (1 - lambda) * L_d(act(Z_s), act(Z_t / tau))

Only the teacher logits are temperature-scaled. Single-label tasks use
softmax with cross-entropy for both terms (soft targets for L_d);
multi-label tasks use sigmoid with mean binary cross-entropy. The teacher
is frozen: its logits arrive from a ``TLOG1`` file and are never modified.
The gradient with respect to the student logits is implemented analytically
and checked against finite differences in the tests. All math runs in
float64.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError, ShapeError

TLOG1_MAGIC = b"TLOG1"


@dataclass(frozen=True)
class KdConfig:
    lam: float = 0.1
    tau: float = 1.0
    task_kind: str = "single-label"

    def __post_init__(self) -> None:
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError(f"lambda must be in [0, 1], got {self.lam}")
        if self.tau <= 0.0:
            raise ConfigError(f"temperature must be positive, got {self.tau}")
        if self.task_kind not in ("single-label", "multi-label"):
            raise ConfigError(f"unknown task kind {self.task_kind!r}")


@dataclass
class KdBatch:
    """Student logits, frozen teacher logits, and ground-truth labels.

    ``labels`` is an index vector for single-label tasks or a binary
    [batch x classes] matrix for multi-label tasks.
    """

    student_logits: np.ndarray
    teacher_logits: np.ndarray
    labels: np.ndarray

    def __post_init__(self) -> None:
        self.student_logits = np.asarray(self.student_logits, dtype=np.float64)
        self.teacher_logits = np.asarray(self.teacher_logits, dtype=np.float64)
        self.labels = np.asarray(self.labels)
        if self.student_logits.shape != self.teacher_logits.shape:
            raise ShapeError(
                f"student logits {self.student_logits.shape} vs teacher "
                f"{self.teacher_logits.shape}"
            )
        if self.student_logits.ndim != 2:
            raise ShapeError("logits must be [batch x classes]")


def _log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def _softmax(z: np.ndarray) -> np.ndarray:
    return np.exp(_log_softmax(z))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _bce_with_logits(z: np.ndarray, targets: np.ndarray) -> float:
    # max(z,0) - z*t + log(1 + exp(-|z|)), stable for any logit magnitude.
    raw = np.maximum(z, 0.0) - z * targets + np.log1p(np.exp(-np.abs(z)))
    return float(raw.mean())


def _single_label_targets(labels: np.ndarray, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.ndim != 1:
        raise ShapeError("single-label targets must be an index vector")
    if labels.min() < 0 or labels.max() >= n_classes:
        raise ShapeError(f"label index outside [0, {n_classes})")
    onehot = np.zeros((labels.size, n_classes), dtype=np.float64)
    onehot[np.arange(labels.size), labels] = 1.0
    return onehot


def component_losses(b: KdBatch, cfg: KdConfig) -> tuple[float, float]:
    """(ground-truth loss, distillation loss), both lambda-independent."""
    z_s, z_t = b.student_logits, b.teacher_logits
    n, c = z_s.shape
    if cfg.task_kind == "single-label":
        log_p = _log_softmax(z_s)
        onehot = _single_label_targets(b.labels, c)
        loss_g = float(-(onehot * log_p).sum() / n)
        soft = _softmax(z_t / cfg.tau)
        loss_d = float(-(soft * log_p).sum() / n)
    else:
        targets = np.asarray(b.labels, dtype=np.float64)
        if targets.shape != z_s.shape:
            raise ShapeError(
                f"multi-label targets {targets.shape} vs logits {z_s.shape}"
            )
        loss_g = _bce_with_logits(z_s, targets)
        loss_d = _bce_with_logits(z_s, _sigmoid(z_t / cfg.tau))
    return loss_g, loss_d


def kd_loss(b: KdBatch, cfg: KdConfig) -> float:
    """lambda * loss_g + (1 - lambda) * loss_d, batch-mean reduction."""
    loss_g, loss_d = component_losses(b, cfg)
    return cfg.lam * loss_g + (1.0 - cfg.lam) * loss_d


def kd_loss_grad(b: KdBatch, cfg: KdConfig) -> np.ndarray:
    """Analytic d(loss)/d(student_logits), [batch x classes].

    Softmax cross-entropy and sigmoid BCE share the (p - target) form, so
    per row the gradient is lambda*(p_s - y) + (1-lambda)*(p_s - p_t),
    scaled by the same mean reduction as the loss.
    """
    z_s, z_t = b.student_logits, b.teacher_logits
    n, c = z_s.shape
    if cfg.task_kind == "single-label":
        p_s = _softmax(z_s)
        onehot = _single_label_targets(b.labels, c)
        p_t = _softmax(z_t / cfg.tau)
        scale = 1.0 / n
    else:
        p_s = _sigmoid(z_s)
        onehot = np.asarray(b.labels, dtype=np.float64)
        if onehot.shape != z_s.shape:
            raise ShapeError(
                f"multi-label targets {onehot.shape} vs logits {z_s.shape}"
            )
        p_t = _sigmoid(z_t / cfg.tau)
        scale = 1.0 / (n * c)
    return scale * (cfg.lam * (p_s - onehot) + (1.0 - cfg.lam) * (p_s - p_t))


def save_teacher_logits(path: str | Path, logits: np.ndarray) -> None:
    """Write TLOG1: magic, u32 n_samples, u32 n_classes, f32 row-major."""
    logits = np.ascontiguousarray(logits, dtype="<f4")
    if logits.ndim != 2:
        raise ShapeError("teacher logits must be [n_samples x n_classes]")
    with open(path, "wb") as f:
        f.write(TLOG1_MAGIC)
        f.write(struct.pack("<II", logits.shape[0], logits.shape[1]))
        f.write(logits.tobytes())


def load_teacher_logits(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 5 or data[:5] != TLOG1_MAGIC:
        raise FormatError(f"{path}: bad magic {data[:5]!r}, expected {TLOG1_MAGIC!r}")
    if len(data) < 13:
        raise FormatError(f"{path}: truncated TLOG1 header")
    n, c = struct.unpack_from("<II", data, 5)
    expected = 13 + 4 * n * c
    if len(data) != expected:
        raise FormatError(
            f"{path}: TLOG1 payload is {len(data)} bytes, expected {expected}"
        )
    return np.frombuffer(data, dtype="<f4", offset=13).reshape(n, c).copy()
