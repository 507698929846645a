"""Multi-label ranking and threshold metrics.

Average precision is non-interpolated precision-at-each-positive, with ties
broken by stable original index order, so every value here is a deterministic
function of the score matrix. Micro-AP ranks all (sample, label) pairs pooled
into one list (flattened row-major, sample-major); macro-AP averages per-label
APs over the labels that have at least one positive and reports how many were
skipped. The F-beta score thresholds scores and macro-averages per-label
F-beta with the conventions documented on :func:`f_beta_macro`.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict

from .errors import SctFusionError


class UndefinedAPError(SctFusionError):
    """Average precision is undefined: the target vector has no positives."""


class MetricsReport(BaseModel):
    model_config = ConfigDict(extra="forbid")

    ap_micro: float
    ap_macro: float
    f2_macro: float
    threshold: float
    beta: float
    num_samples: int
    num_labels: int
    per_label_ap: list[Optional[float]]
    per_label_precision: list[float]
    per_label_recall: list[float]
    skipped_ap_labels: list[int]
    skipped_f_labels: list[int]


def _validate_pair(scores: np.ndarray, targets: np.ndarray) -> None:
    if scores.shape != targets.shape:
        raise ValueError(f"scores shape {scores.shape} != targets shape {targets.shape}")
    bad = np.setdiff1d(np.unique(targets), [0, 1])
    if bad.size:
        raise ValueError(f"targets must be 0/1, found {bad.tolist()}")


def average_precision(scores: Sequence[float], targets: Sequence[int]) -> float:
    """AP of one ranking: mean over positives of precision at each positive."""
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    t = np.asarray(targets).reshape(-1)
    _validate_pair(s, t)
    n_pos = int(t.sum())
    if n_pos == 0:
        raise UndefinedAPError("no positive targets; AP is undefined")
    order = np.argsort(-s, kind="stable")
    hits = t[order].astype(np.float64)
    cum_pos = np.cumsum(hits)
    ranks = np.arange(1, len(s) + 1, dtype=np.float64)
    return float((cum_pos[hits == 1] / ranks[hits == 1]).sum() / n_pos)


def ap_micro(scores: np.ndarray, targets: np.ndarray) -> float:
    """One AP over the pooled (sample, label) ranking."""
    s = np.asarray(scores, dtype=np.float64)
    t = np.asarray(targets)
    _validate_pair(s, t)
    return average_precision(s.reshape(-1), t.reshape(-1))


def ap_macro(scores: np.ndarray, targets: np.ndarray) -> tuple[float, list[Optional[float]], list[int]]:
    """Per-label APs averaged over labels with positives.

    Returns ``(macro, per_label, skipped)`` where ``per_label[k]`` is None for
    skipped (positive-free) labels.
    """
    s = np.asarray(scores, dtype=np.float64)
    t = np.asarray(targets)
    _validate_pair(s, t)
    if s.ndim != 2:
        raise ValueError(f"expected a [samples, labels] matrix, got shape {s.shape}")
    per_label: list[Optional[float]] = []
    skipped: list[int] = []
    values = []
    for k in range(s.shape[1]):
        try:
            ap = average_precision(s[:, k], t[:, k])
        except UndefinedAPError:
            per_label.append(None)
            skipped.append(k)
            continue
        per_label.append(ap)
        values.append(ap)
    if not values:
        raise UndefinedAPError("every label has zero positives; macro AP is undefined")
    return float(np.mean(values)), per_label, skipped


def f_beta_macro(
    scores: np.ndarray,
    targets: np.ndarray,
    beta: float = 2.0,
    threshold: float = 0.5,
) -> tuple[float, list[float], list[float], list[int]]:
    """Macro-averaged F-beta at a fixed decision threshold.

    Per label: predictions are ``score >= threshold``; P = TP/(TP+FP) with
    P := 0 when nothing is predicted; labels with no positives (TP+FN = 0) are
    skipped from the macro mean; F := 0 when P = R = 0.

    Returns ``(macro, precision_per_label, recall_per_label, skipped)``.
    """
    s = np.asarray(scores, dtype=np.float64)
    t = np.asarray(targets)
    _validate_pair(s, t)
    if s.ndim != 2:
        raise ValueError(f"expected a [samples, labels] matrix, got shape {s.shape}")
    pred = s >= threshold
    pos = t == 1
    b2 = beta * beta
    precisions: list[float] = []
    recalls: list[float] = []
    skipped: list[int] = []
    f_values = []
    for k in range(s.shape[1]):
        tp = int(np.sum(pred[:, k] & pos[:, k]))
        fp = int(np.sum(pred[:, k] & ~pos[:, k]))
        fn = int(np.sum(~pred[:, k] & pos[:, k]))
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        precisions.append(precision)
        recalls.append(recall)
        if tp + fn == 0:
            skipped.append(k)
            continue
        if precision == 0.0 and recall == 0.0:
            f_values.append(0.0)
        else:
            f_values.append((1 + b2) * precision * recall / (b2 * precision + recall))
    macro = float(np.mean(f_values)) if f_values else 0.0
    return macro, precisions, recalls, skipped


def compute_report(
    scores: np.ndarray,
    targets: np.ndarray,
    threshold: float = 0.5,
    beta: float = 2.0,
) -> MetricsReport:
    """Full evaluation report over a ``[samples, labels]`` score matrix."""
    s = np.asarray(scores, dtype=np.float64)
    t = np.asarray(targets)
    macro, per_label, skipped_ap = ap_macro(s, t)
    micro = ap_micro(s, t)
    f_macro, precisions, recalls, skipped_f = f_beta_macro(s, t, beta=beta, threshold=threshold)
    return MetricsReport(
        ap_micro=micro,
        ap_macro=macro,
        f2_macro=f_macro,
        threshold=threshold,
        beta=beta,
        num_samples=int(s.shape[0]),
        num_labels=int(s.shape[1]),
        per_label_ap=per_label,
        per_label_precision=precisions,
        per_label_recall=recalls,
        skipped_ap_labels=skipped_ap,
        skipped_f_labels=skipped_f,
    )
