"""Accuracy, linear CKA, prediction KL and best-student selection."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .autodiff import log_softmax
from .data import Example, labels_array, tokens_array
from .model import Model, pooled_features, predict_logits


class MetricError(ValueError):
    """A metric is undefined for the given input."""


@dataclass
class MetricRecord:
    step: int
    model_id: str
    split: str
    accuracy: float
    cka_to_teacher: float | None = None
    kl_to_teacher: float | None = None
    losses: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}


def accuracy_from_logits(logits: np.ndarray, labels: np.ndarray) -> float:
    if len(labels) == 0:
        raise MetricError("accuracy of an empty split is undefined")
    # np.argmax returns the first maximum, i.e. ties go to the lower class
    return float(np.mean(np.argmax(logits, axis=1) == labels))


def accuracy(model: Model, split: Sequence[Example]) -> float:
    if not split:
        raise MetricError("accuracy of an empty split is undefined")
    if any(ex.label is None for ex in split):
        raise MetricError("accuracy needs a labeled split")
    ids = tokens_array(split, model.config.max_seq_len)
    return accuracy_from_logits(predict_logits(model, ids), labels_array(split))


def cka(X: np.ndarray, Y: np.ndarray) -> float:
    """Linear CKA between two feature matrices with the same row count."""
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if X.ndim != 2 or Y.ndim != 2 or X.shape[0] != Y.shape[0]:
        raise MetricError(f"cka needs 2-D inputs with equal rows, got {X.shape} and {Y.shape}")
    if X.shape[0] < 2:
        raise MetricError("cka needs at least two examples")
    Xc = X - X.mean(axis=0)
    Yc = Y - Y.mean(axis=0)
    xx = np.linalg.norm(Xc.T @ Xc)
    yy = np.linalg.norm(Yc.T @ Yc)
    if xx == 0 or yy == 0:
        raise MetricError("cka is undefined for zero-variance features")
    return float(np.linalg.norm(Yc.T @ Xc) ** 2 / (xx * yy))


def kl_match(teacher_logits: np.ndarray, student_logits: np.ndarray, tau: float = 1.0) -> float:
    """Mean KL(softmax(teacher / tau) || softmax(student / tau))."""
    t = np.asarray(teacher_logits, dtype=np.float64)
    s = np.asarray(student_logits, dtype=np.float64)
    if t.shape != s.shape:
        raise MetricError(f"kl_match shape mismatch {t.shape} vs {s.shape}")
    if tau <= 0:
        raise MetricError("tau must be > 0")
    lp = log_softmax(t / tau)
    lq = log_softmax(s / tau)
    return float(np.mean(np.sum(np.exp(lp) * (lp - lq), axis=-1)))


def teacher_alignment(teacher: Model, student: Model, probe: Sequence[Example]) -> tuple[float, float]:
    """(CKA of pooled states, KL of predictions) of ``student`` against ``teacher``."""
    ids = tokens_array(probe, teacher.config.max_seq_len)
    c = cka(pooled_features(student, ids), pooled_features(teacher, ids))
    kl = kl_match(predict_logits(teacher, ids), predict_logits(student, ids))
    return c, kl


def select_best_student(history: Iterable[dict | MetricRecord], split: str = "dev") -> int:
    """Id ``k`` (as in ``student_k``) of the student with the best dev accuracy.

    Ties go to the lower index.
    """
    best: dict[int, float] = {}
    for rec in history:
        rec = rec.to_dict() if isinstance(rec, MetricRecord) else rec
        mid = rec["model_id"]
        if not mid.startswith("student_") or rec.get("split", split) != split:
            continue
        k = int(mid.split("_", 1)[1])
        best[k] = max(best.get(k, -1.0), rec["accuracy"])
    if not best:
        raise MetricError("no student evaluation records")
    return max(sorted(best), key=lambda k: (best[k], -k))
