"""Threshold-free OOD metrics over (ood_score, is_open) samples.

Scores can be any finite reals; only their ranking matters. "Open" samples are
the positives unless stated otherwise.
"""
from dataclasses import dataclass

import numpy as np

from .config import StrEnum
from .errors import DegenerateInput


class Positives(StrEnum):
    OPEN = "Open"
    CLOSED = "Closed"


@dataclass(frozen=True)
class MetricReport:
    auroc: float
    fpr95: float
    aupr_e: float
    aupr_s: float
    n_open: int
    n_closed: int


def as_arrays(samples):
    """(scores float64, labels bool) from a sequence of (score, is_open) pairs."""
    if isinstance(samples, tuple) and len(samples) == 2 and isinstance(samples[0], np.ndarray):
        scores, labels = samples
    else:
        arr = list(samples)
        scores = np.array([s for s, _ in arr], dtype=np.float64)
        labels = np.array([bool(y) for _, y in arr], dtype=bool)
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    if not np.all(np.isfinite(scores)):
        raise DegenerateInput("scores must be finite")
    return scores, labels


def _need_both(labels):
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DegenerateInput(f"need both classes, got {n_pos} open and {n_neg} closed samples")
    return n_pos, n_neg


def _sweep(scores, labels):
    """Cumulative (tp, fp) after accepting every sample with score >= each distinct threshold."""
    order = np.argsort(-scores, kind="mergesort")
    s = scores[order]
    y = labels[order]
    last = np.r_[np.flatnonzero(s[1:] != s[:-1]), s.size - 1]
    tp = np.cumsum(y)[last]
    fp = np.cumsum(~y)[last]
    return tp, fp


def auroc(samples) -> float:
    """P(open score > closed score) with ties counted 1/2 (trapezoidal ROC area)."""
    scores, labels = as_arrays(samples)
    n_pos, n_neg = _need_both(labels)
    tp, fp = _sweep(scores, labels)
    tp = np.r_[0, tp].astype(np.float64)
    fp = np.r_[0, fp].astype(np.float64)
    # sum of trapezoids in count units, normalised once at the end
    area = np.sum((fp[1:] - fp[:-1]) * (tp[1:] + tp[:-1])) / 2.0
    return float(area / (n_pos * n_neg))


def fpr_at_tpr(samples, tpr_target: float = 0.95) -> float:
    """FPR at the first (highest) threshold whose TPR reaches ``tpr_target``."""
    scores, labels = as_arrays(samples)
    n_pos, n_neg = _need_both(labels)
    tp, fp = _sweep(scores, labels)
    hit = np.flatnonzero(tp / n_pos >= tpr_target)
    return float(fp[hit[0]] / n_neg)


def aupr(samples, positives: Positives = Positives.OPEN) -> float:
    """Step-wise area under the precision-recall curve (average precision).

    ``positives=CLOSED`` ranks by the negated score, i.e. by how known a
    sample looks.
    """
    scores, labels = as_arrays(samples)
    positives = Positives.parse(positives)
    if positives is Positives.CLOSED:
        scores, labels = -scores, ~labels
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise DegenerateInput("no positive samples")
    tp, fp = _sweep(scores, labels)
    recall = tp / n_pos
    precision = tp / (tp + fp)
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


def evaluate(samples, tpr_target: float = 0.95) -> MetricReport:
    scores, labels = as_arrays(samples)
    pair = (scores, labels)
    n_open = int(labels.sum())
    return MetricReport(
        auroc=auroc(pair),
        fpr95=fpr_at_tpr(pair, tpr_target),
        aupr_e=aupr(pair, Positives.OPEN),
        aupr_s=aupr(pair, Positives.CLOSED),
        n_open=n_open,
        n_closed=labels.size - n_open,
    )
