"""Classification and segmentation metrics for imbalanced binary tasks."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class ClsMetrics:
    precision: float
    recall: float
    f1: float
    pr_auc: float
    tp: int
    fp: int
    fn: int
    tn: int


@dataclass(frozen=True)
class SegMetrics:
    dsc: float
    tp: int
    fp: int
    fn: int


def pr_auc(scores: np.ndarray, labels: np.ndarray) -> float:
    """Area under the precision-recall curve with step interpolation.

    Thresholds sweep the distinct scores in descending order (ties enter
    together); the area is sum_i Precision(R_i) * (R_i - R_{i-1}).
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n_pos = int((labels == 1).sum())
    if n_pos == 0:
        raise ValueError("PR-AUC undefined: no positive labels")
    order = np.argsort(-scores, kind="stable")
    sorted_scores = scores[order]
    sorted_labels = labels[order]
    tp = np.cumsum(sorted_labels == 1)
    fp = np.cumsum(sorted_labels != 1)
    # Keep only the last index of each tie group: that is the state after
    # admitting every item at that threshold.
    is_last = np.append(sorted_scores[1:] != sorted_scores[:-1], True)
    tp = tp[is_last].astype(np.float64)
    fp = fp[is_last].astype(np.float64)
    recall = tp / n_pos
    precision = tp / (tp + fp)
    prev_recall = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - prev_recall) * precision))


def classification_metrics(predictions: np.ndarray, labels: np.ndarray, scores: np.ndarray) -> ClsMetrics:
    """Precision/recall/F1 from hard predictions with class 1 as target,
    plus PR-AUC from the ranking scores."""
    predictions = np.asarray(predictions, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if predictions.shape != labels.shape:
        raise ValueError(f"predictions shape {predictions.shape} != labels shape {labels.shape}")
    if int((labels == 1).sum()) == 0:
        raise ValueError("recall undefined: no positive labels")
    tp = int(np.sum((predictions == 1) & (labels == 1)))
    fp = int(np.sum((predictions == 1) & (labels != 1)))
    fn = int(np.sum((predictions != 1) & (labels == 1)))
    tn = int(np.sum((predictions != 1) & (labels != 1)))
    precision = tp / (tp + fp) if tp + fp > 0 else 0.0
    recall = tp / (tp + fn)
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return ClsMetrics(
        precision=precision,
        recall=recall,
        f1=f1,
        pr_auc=pr_auc(scores, labels),
        tp=tp,
        fp=fp,
        fn=fn,
        tn=tn,
    )


def dice(pred_mask: np.ndarray, gt_mask: np.ndarray) -> SegMetrics:
    """Dice similarity 2TP / (2TP + FP + FN) over binary masks.

    Two empty masks score 1.0 (nothing to find, nothing predicted)."""
    pred = np.asarray(pred_mask, dtype=bool)
    gt = np.asarray(gt_mask, dtype=bool)
    if pred.shape != gt.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    tp = int(np.sum(pred & gt))
    fp = int(np.sum(pred & ~gt))
    fn = int(np.sum(~pred & gt))
    denom = 2 * tp + fp + fn
    dsc = 1.0 if denom == 0 else 2 * tp / denom
    return SegMetrics(dsc=dsc, tp=tp, fp=fp, fn=fn)
