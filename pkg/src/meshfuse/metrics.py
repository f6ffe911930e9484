"""Evaluation metrics: MAE/R2 for regression, ROC operating points for
classification.

Operating points use the step-function convention: TPR@FPR=f is the best TPR
among ROC points with FPR <= f, FPR@TPR=t the smallest FPR among points with
TPR >= t. No interpolation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class MetricError(ValueError):
    pass


def regression_metrics(preds, targets) -> dict:
    preds = np.asarray(preds, dtype=np.float64).reshape(-1)
    targets = np.asarray(targets, dtype=np.float64).reshape(-1)
    if preds.shape != targets.shape:
        raise MetricError("prediction/target length mismatch")
    if preds.size < 2:
        raise MetricError("need at least 2 samples")
    ss_tot = float(((targets - targets.mean()) ** 2).sum())
    if ss_tot == 0:
        raise MetricError("R2 undefined for constant targets")
    mae = float(np.abs(preds - targets).mean())
    r2 = 1.0 - float(((preds - targets) ** 2).sum()) / ss_tot
    return {"mae": mae, "r2": r2}


@dataclass(frozen=True)
class RocCurve:
    """Threshold-sweep ROC points, from (0, 0) to (1, 1)."""

    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray  # leading +inf sentinel for the (0, 0) point


def roc_curve(scores, labels) -> RocCurve:
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1).astype(np.int64)
    if scores.shape != labels.shape:
        raise MetricError("score/label length mismatch")
    npos = int((labels == 1).sum())
    nneg = int((labels == 0).sum())
    if npos == 0 or nneg == 0:
        raise MetricError("ROC requires both classes present")
    order = np.argsort(-scores, kind="stable")
    s, y = scores[order], labels[order]
    # group tied scores: one curve point per distinct threshold
    distinct = np.where(np.diff(s))[0]
    cut = np.concatenate([distinct, [s.size - 1]])
    tp = np.cumsum(y)[cut]
    fp = np.cumsum(1 - y)[cut]
    fpr = np.concatenate([[0.0], fp / nneg])
    tpr = np.concatenate([[0.0], tp / npos])
    thresholds = np.concatenate([[np.inf], s[cut]])
    return RocCurve(fpr, tpr, thresholds)


def auc_trapezoid(curve: RocCurve) -> float:
    return float(np.trapezoid(curve.tpr, curve.fpr))


def tpr_at_fpr(curve: RocCurve, max_fpr: float) -> float:
    ok = curve.fpr <= max_fpr + 1e-12
    return float(curve.tpr[ok].max())


def fpr_at_tpr(curve: RocCurve, min_tpr: float) -> float:
    ok = curve.tpr >= min_tpr - 1e-12
    return float(curve.fpr[ok].min())


def roc_and_operating_points(scores, labels) -> dict:
    curve = roc_curve(scores, labels)
    return {
        "curve": curve,
        "auc": auc_trapezoid(curve),
        "tpr_at_fpr_0.15": tpr_at_fpr(curve, 0.15),
        "tpr_at_fpr_0.20": tpr_at_fpr(curve, 0.20),
        "fpr_at_tpr_0.70": fpr_at_tpr(curve, 0.70),
    }


def classification_metrics(scores, labels) -> dict:
    out = roc_and_operating_points(scores, labels)
    return {k: v for k, v in out.items() if k != "curve"}


def write_roc_csv(curve: RocCurve, path) -> None:
    with open(str(path), "w") as fh:
        fh.write("threshold,fpr,tpr\n")
        for t, f, tp in zip(curve.thresholds, curve.fpr, curve.tpr):
            fh.write(f"{t},{f},{tp}\n")
