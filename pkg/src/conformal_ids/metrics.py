"""Binary detection metrics with explicit degenerate-denominator flags."""

from __future__ import annotations

import numpy as np


def binary_metrics(pred, labels) -> dict:
    """Accuracy, precision, recall and F1 with attack (1) as the positive class.

    A ratio whose denominator is zero is reported as 0 and listed under
    ``degenerate``.
    """
    pred = np.asarray(pred).astype(np.int64).ravel()
    labels = np.asarray(labels).astype(np.int64).ravel()
    if pred.shape != labels.shape:
        raise ValueError(f"length mismatch: {len(pred)} predictions, {len(labels)} labels")
    tp = int(np.sum((pred == 1) & (labels == 1)))
    fp = int(np.sum((pred == 1) & (labels == 0)))
    fn = int(np.sum((pred == 0) & (labels == 1)))
    tn = int(np.sum((pred == 0) & (labels == 0)))
    degenerate = []

    def ratio(num, den, name):
        if den == 0:
            degenerate.append(name)
            return 0.0
        return num / den

    accuracy = ratio(tp + tn, len(labels), "accuracy")
    precision = ratio(tp, tp + fp, "precision")
    recall = ratio(tp, tp + fn, "recall")
    f1 = ratio(2 * tp, 2 * tp + fp + fn, "f1")
    return {
        "accuracy": accuracy, "precision": precision, "recall": recall, "f1": f1,
        "tp": tp, "fp": fp, "fn": fn, "tn": tn, "n": int(len(labels)),
        "degenerate": degenerate,
    }


def compute_metrics(predictions, verdicts, labels) -> dict:
    """Metric set for a stream.

    ``predictions`` are the classifier's labels for every flow. ``verdicts``
    is a pair ``(accepted, ce_predicted_class)`` of aligned arrays. The ``ce``
    block counts accepted flows only; ``ce_all`` scores the evaluator's
    predicted class on every flow; ``classifier`` scores ``predictions``.
    """
    accepted, ce_pred = verdicts
    accepted = np.asarray(accepted, dtype=bool).ravel()
    ce_pred = np.asarray(ce_pred).ravel()
    labels = np.asarray(labels).ravel()
    if not (len(accepted) == len(ce_pred) == len(labels) == len(np.ravel(predictions))):
        raise ValueError("predictions, verdicts and labels must be aligned")
    return {
        "ce": binary_metrics(ce_pred[accepted], labels[accepted]),
        "ce_all": binary_metrics(ce_pred, labels),
        "classifier": binary_metrics(predictions, labels),
        "accept_rate": float(accepted.mean()) if len(accepted) else 0.0,
    }
