"""Greedy ensemble selection with replacement over stored predictions.

Binary prediction layout (all little-endian)::

    uint64 n_models, uint64 n_instances, uint64 n_classes
    float64 probs[n_models][n_instances][n_classes]   (row-major)
    int64   labels[n_instances]

A validation file and an optional test file make up one
:class:`PredictionSet`.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.stats import rankdata

from ._parallel import ordered_map
from .errors import ParseError, ValidationError

__all__ = [
    "PredictionSet",
    "LOSSES",
    "balanced_error_rate",
    "log_loss",
    "auc_loss",
    "ensemble_select",
    "ensemble_predict",
    "read_predictions",
    "write_predictions",
]

_HEADER = struct.Struct("<3Q")
_ROW_TOL = 1e-6


def balanced_error_rate(probs: np.ndarray, labels: np.ndarray) -> float:
    """One minus the mean recall over the classes present in ``labels``.

    The predicted class is the argmax, ties going to the lower class index.
    """
    pred = np.argmax(probs, axis=1)
    recalls = [float(np.mean(pred[labels == c] == c)) for c in np.unique(labels)]
    return 1.0 - float(np.mean(recalls))


def log_loss(probs: np.ndarray, labels: np.ndarray, eps: float = 1e-15) -> float:
    p = np.clip(probs[np.arange(len(labels)), labels], eps, 1.0)
    return float(-np.mean(np.log(p)))


def auc_loss(probs: np.ndarray, labels: np.ndarray) -> float:
    """``1 - AUC``; binary uses class 1, multiclass averages one-vs-rest.

    Classes without both positives and negatives are skipped; if none is
    usable the loss is 0.5 (chance level).
    """
    classes = [1] if probs.shape[1] == 2 else range(probs.shape[1])
    aucs = []
    for c in classes:
        pos = labels == c
        n_pos, n_neg = int(pos.sum()), int((~pos).sum())
        if n_pos == 0 or n_neg == 0:
            continue
        ranks = rankdata(probs[:, c])
        aucs.append((ranks[pos].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))
    return 0.5 if not aucs else 1.0 - float(np.mean(aucs))


LOSSES: dict[str, Callable[[np.ndarray, np.ndarray], float]] = {
    "ber": balanced_error_rate,
    "log_loss": log_loss,
    "auc": auc_loss,
}


def _check_probs(probs, labels, what):
    probs = np.asarray(probs, dtype=float)
    labels = np.asarray(labels, dtype=np.int64)
    if probs.ndim != 3:
        raise ValidationError(f"{what} predictions must be models x instances x classes")
    m, n, k = probs.shape
    if m < 1 or n < 1 or k < 1:
        raise ValidationError(f"{what} predictions are empty")
    if labels.shape != (n,):
        raise ValidationError(f"{what} labels must have one entry per instance")
    if labels.min() < 0 or labels.max() >= k:
        raise ValidationError(f"{what} labels must lie in [0, {k})")
    if np.any(probs < 0) or np.any(np.abs(probs.sum(axis=2) - 1.0) > _ROW_TOL):
        raise ValidationError(f"{what} probability rows must be nonnegative and sum to 1")
    return probs, labels


@dataclass(frozen=True)
class PredictionSet:
    val_probs: np.ndarray
    val_labels: np.ndarray
    test_probs: np.ndarray | None = None
    test_labels: np.ndarray | None = None
    loss: str = "ber"

    def __post_init__(self):
        if self.loss not in LOSSES:
            raise ValidationError(f"loss must be one of {sorted(LOSSES)}, got {self.loss!r}")
        vp, vl = _check_probs(self.val_probs, self.val_labels, "validation")
        object.__setattr__(self, "val_probs", vp)
        object.__setattr__(self, "val_labels", vl)
        if (self.test_probs is None) != (self.test_labels is None):
            raise ValidationError("test predictions and labels go together")
        if self.test_probs is not None:
            tp, tl = _check_probs(self.test_probs, self.test_labels, "test")
            if tp.shape[0] != vp.shape[0] or tp.shape[2] != vp.shape[2]:
                raise ValidationError("test predictions disagree with validation on models or classes")
            object.__setattr__(self, "test_probs", tp)
            object.__setattr__(self, "test_labels", tl)

    @property
    def n_models(self) -> int:
        return self.val_probs.shape[0]

    def loss_fn(self):
        return LOSSES[self.loss]


def ensemble_select(preds: PredictionSet, size: int = 50, jobs: int = 1) -> np.ndarray:
    """Integer weights from ``size`` greedy with-replacement steps.

    Starting from the empty ensemble, each step adds the model that gives the
    lowest validation loss of the averaged probabilities; ties go to the
    lowest model index.
    """
    if size < 1:
        raise ValidationError("ensemble size must be >= 1")
    fn = preds.loss_fn()
    probs, labels = preds.val_probs, preds.val_labels
    weights = np.zeros(preds.n_models, dtype=np.int64)
    total = np.zeros_like(probs[0])
    for step in range(1, size + 1):
        scores = ordered_map(lambda j: fn((total + probs[j]) / step, labels), range(preds.n_models), jobs)
        j = min(range(len(scores)), key=lambda i: (scores[i], i))
        weights[j] += 1
        total = total + probs[j]
    return weights


def _mix(weights, probs):
    w = np.asarray(weights, dtype=float)
    if w.shape != (probs.shape[0],):
        raise ValidationError("need one weight per model")
    if np.any(w < 0):
        raise ValidationError("weights must be nonnegative")
    if not w.sum() > 0:
        raise ValidationError("ensemble weights sum to zero")
    return np.tensordot(w / w.sum(), probs, axes=1)


def ensemble_predict(weights, preds: PredictionSet) -> dict:
    """Weighted mean probabilities and the set's loss on each available split."""
    fn = preds.loss_fn()
    val = _mix(weights, preds.val_probs)
    out = {"val_probs": val, "val_loss": fn(val, preds.val_labels), "test_probs": None, "test_loss": None}
    if preds.test_probs is not None:
        test = _mix(weights, preds.test_probs)
        out["test_probs"] = test
        out["test_loss"] = fn(test, preds.test_labels)
    return out


def write_predictions(probs, labels) -> bytes:
    probs = np.ascontiguousarray(probs, dtype="<f8")
    labels = np.ascontiguousarray(labels, dtype="<i8")
    if probs.ndim != 3 or labels.shape != (probs.shape[1],):
        raise ValidationError("expected models x instances x classes probabilities and per-instance labels")
    return _HEADER.pack(*probs.shape) + probs.tobytes() + labels.tobytes()


def read_predictions(data: bytes) -> tuple[np.ndarray, np.ndarray]:
    if len(data) < _HEADER.size:
        raise ParseError("prediction file shorter than its header")
    m, n, k = _HEADER.unpack_from(data)
    expected = _HEADER.size + 8 * (m * n * k + n)
    if len(data) != expected:
        raise ParseError(f"prediction file has {len(data)} bytes, header implies {expected}")
    off = _HEADER.size
    probs = np.frombuffer(data, dtype="<f8", count=m * n * k, offset=off).reshape(m, n, k)
    labels = np.frombuffer(data, dtype="<i8", count=n, offset=off + 8 * m * n * k)
    return probs.astype(float), labels.astype(np.int64)
