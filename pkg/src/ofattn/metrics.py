"""Mean average precision for multi-label classification."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class MapReport:
    mAP: float
    per_class: dict[int, float]
    excluded: list[int] = field(default_factory=list)  # classes with no positives

    def to_json(self) -> dict:
        return {"mAP": self.mAP, "per_class": {str(k): v for k, v in self.per_class.items()},
                "excluded": list(self.excluded)}


def average_precision(scores: np.ndarray, labels: np.ndarray) -> float:
    """Non-interpolated AP: mean precision at the rank of each positive.

    Ties in ``scores`` are broken by sample index, lower first.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    npos = int(labels.sum())
    if npos == 0:
        raise ValueError("average precision is undefined without positives")
    order = np.lexsort((np.arange(len(scores)), -scores))
    hits = labels[order]
    precision = np.cumsum(hits) / np.arange(1, len(hits) + 1)
    return float(precision[hits].sum() / npos)


def compute_map(scores, labels) -> MapReport:
    """Per-class AP and their mean over classes that have a positive."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 2:
        raise ValueError(f"scores {scores.shape} and labels {labels.shape} must be matching [n, C]")
    per_class, excluded = {}, []
    for c in range(scores.shape[1]):
        if labels[:, c].any():
            per_class[c] = average_precision(scores[:, c], labels[:, c])
        else:
            excluded.append(c)
    if not per_class:
        raise ValueError("no class has a positive sample")
    return MapReport(float(np.mean(list(per_class.values()))), per_class, excluded)
