"""Classification metrics: accuracy, macro F1, macro-averaged MAE.

Macro averages run over classes that actually occur in the labels; a class
nobody was assigned contributes F1 = 0 only when it has true instances.
MMAE treats class indices as ordinals, so distance between classes matters.
"""

import numpy as np

from .errors import InputError


def _as_labels(x, name):
    arr = np.asarray(x)
    if arr.ndim != 1:
        raise InputError(f"{name} must be 1-D, got shape {arr.shape}")
    return arr.astype(np.int64)


def compute_metrics(preds, labels, n_classes):
    """{'acc', 'macro_f1', 'mmae'} over parallel prediction/label vectors."""
    p = _as_labels(preds, "preds")
    y = _as_labels(labels, "labels")
    if p.shape != y.shape:
        raise InputError(f"length mismatch: {p.shape[0]} preds vs {y.shape[0]} labels")
    if p.shape[0] == 0:
        raise InputError("need at least one prediction")
    if n_classes < 2:
        raise InputError(f"need at least 2 classes, got {n_classes}")

    acc = float(np.mean(p == y))

    f1s = []
    maes = []
    for k in range(n_classes):
        truth = y == k
        if not truth.any():
            continue  # class never occurs; skipped by macro convention
        guessed = p == k
        tp = float(np.sum(truth & guessed))
        fp = float(np.sum(~truth & guessed))
        fn = float(np.sum(truth & ~guessed))
        f1s.append(2.0 * tp / (2.0 * tp + fp + fn))
        maes.append(float(np.mean(np.abs(p[truth] - k))))

    return {
        "acc": acc,
        "macro_f1": float(np.mean(f1s)),
        "mmae": float(np.mean(maes)),
    }
