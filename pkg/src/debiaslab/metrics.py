"""Prediction containers and ROC AUC."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.stats import rankdata

from .errors import UndefinedMetricError, ValidationError


@dataclass(frozen=True)
class PredictionSet:
    """Per-sample melanoma probabilities aligned with labels by id."""

    ids: tuple[str, ...]
    probabilities: np.ndarray
    labels: np.ndarray
    provenance: Mapping[str, object] = field(default_factory=dict)

    def __post_init__(self):
        probs = np.asarray(self.probabilities, dtype=float)
        labels = np.asarray(self.labels, dtype=np.int64)
        if not (len(self.ids) == len(probs) == len(labels)):
            raise ValidationError("ids, probabilities and labels must be aligned")
        if probs.size and (probs.min() < 0 or probs.max() > 1):
            raise ValidationError("probabilities must lie in [0, 1]")
        object.__setattr__(self, "probabilities", probs)
        object.__setattr__(self, "labels", labels)


def roc_auc(scores, labels=None) -> float:
    """ROC AUC = (concordant pairs + 0.5 * tied pairs) / (P * N).

    Accepts a :class:`PredictionSet` or (scores, labels) arrays. Ties get the
    standard Mann-Whitney half credit.
    """
    if isinstance(scores, PredictionSet):
        labels = scores.labels
        scores = scores.probabilities
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels, dtype=np.int64)
    if scores.shape != labels.shape:
        raise ValidationError("scores and labels must have equal length")
    pos = int((labels == 1).sum())
    neg = int((labels == 0).sum())
    if pos == 0 or neg == 0:
        raise UndefinedMetricError("ROC AUC undefined: both classes must be present")
    ranks = rankdata(scores)
    return float((ranks[labels == 1].sum() - pos * (pos + 1) / 2) / (pos * neg))
