"""Task metrics: accuracy, average-accuracy, AUROC, Dice, adversarial risk.

Accuracy-style metrics are reported on a 0-100 scale, AUROC and Dice on
0-1, matching the ranges used in the benchmark report tables.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np


@dataclass(frozen=True)
class MetricValue:
    kind: str
    value: float
    sample_count: int

    def __post_init__(self):
        lo, hi = (0.0, 1.0) if self.kind in ("auroc", "dice") else (0.0, 100.0)
        if not (lo - 1e-9 <= self.value <= hi + 1e-9):
            raise ValueError(f"{self.kind} value {self.value} outside [{lo}, {hi}]")


def accuracy(predictions: Sequence[int], labels: Sequence[int]) -> MetricValue:
    preds = np.asarray(predictions)
    labs = np.asarray(labels)
    if preds.size == 0:
        raise ValueError("accuracy of an empty prediction list")
    if preds.shape != labs.shape:
        raise ValueError(f"misaligned predictions {preds.shape} vs labels {labs.shape}")
    return MetricValue("accuracy", 100.0 * float(np.mean(preds == labs)), preds.size)


def average_accuracy(predictions: Sequence[int], labels: Sequence[int],
                     class_count: int) -> MetricValue:
    preds = np.asarray(predictions)
    labs = np.asarray(labels)
    if preds.shape != labs.shape or preds.size == 0:
        raise ValueError("misaligned or empty prediction/label lists")
    per_class = []
    for c in range(class_count):
        mask = labs == c
        if not mask.any():
            raise ValueError(f"class {c} absent from labels; average-accuracy undefined")
        per_class.append(float(np.mean(preds[mask] == c)))
    return MetricValue("average-accuracy", 100.0 * float(np.mean(per_class)), preds.size)


def auroc(scores_positive: Sequence[float], scores_negative: Sequence[float]) -> MetricValue:
    """Probability a random positive outscores a random negative; ties count half.

    Rank formulation: with R the rank-sum of positives over the pooled
    sample (average ranks on ties), AUROC = (R - n_p(n_p+1)/2) / (n_p n_n).
    """
    pos = np.asarray(scores_positive, dtype=np.float64)
    neg = np.asarray(scores_negative, dtype=np.float64)
    if pos.size == 0 or neg.size == 0:
        raise ValueError("auroc requires non-empty positive and negative score lists")
    pooled = np.concatenate([pos, neg])
    order = np.argsort(pooled, kind="stable")
    ranks = np.empty(pooled.size, dtype=np.float64)
    sorted_vals = pooled[order]
    i = 0
    while i < pooled.size:
        j = i
        while j + 1 < pooled.size and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0  # average 1-based rank of the tie run
        i = j + 1
    rank_sum = ranks[:pos.size].sum()
    value = (rank_sum - pos.size * (pos.size + 1) / 2.0) / (pos.size * neg.size)
    return MetricValue("auroc", float(value), pos.size + neg.size)


def dice(predicted_mask: np.ndarray, truth_mask: np.ndarray, smooth: float = 0.0) -> MetricValue:
    """Overlap 2|A∩B| / (|A|+|B|) on binary masks; both-empty counts as 1."""
    a = np.asarray(predicted_mask, dtype=np.float64)
    b = np.asarray(truth_mask, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    for m, name in ((a, "predicted"), (b, "truth")):
        if not np.isin(m, (0.0, 1.0)).all():
            raise ValueError(f"{name} mask is not binary")
    denom = a.sum() + b.sum() + smooth
    if denom == 0.0:
        return MetricValue("dice", 1.0, a.size)
    value = (2.0 * float((a * b).sum()) + smooth) / float(denom)
    return MetricValue("dice", value, a.size)


def adversarial_risk_from_accuracy(acc: MetricValue) -> MetricValue:
    if not (0.0 <= acc.value <= 100.0):
        raise ValueError(f"accuracy {acc.value} outside [0, 100]")
    return MetricValue("adversarial-risk", 100.0 - acc.value, acc.sample_count)


def joint_success_accuracy(predictions: Sequence[int], labels: Sequence[int],
                           flagged: Optional[Sequence[bool]]) -> MetricValue:
    """Defended accuracy: a sample is defended-correct if the detector flagged
    it or the model classified it correctly. Without a detector this is plain
    accuracy, so the attacker only wins on (fooled and unflagged)."""
    preds = np.asarray(predictions)
    labs = np.asarray(labels)
    if preds.shape != labs.shape or preds.size == 0:
        raise ValueError("misaligned or empty prediction/label lists")
    correct = preds == labs
    if flagged is not None:
        fl = np.asarray(flagged, dtype=bool)
        if fl.shape != preds.shape:
            raise ValueError("misaligned detector flags")
        correct = correct | fl
    return MetricValue("accuracy", 100.0 * float(np.mean(correct)), preds.size)
