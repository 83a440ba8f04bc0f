import numpy as np
import pytest

from otgraph.errors import InputError
from otgraph.metrics import compute_metrics


def _confusion_oracle(preds, labels, n_classes):
    """Metrics recomputed from an explicit confusion matrix, sample by sample."""
    M = [[0] * n_classes for _ in range(n_classes)]
    for p, y in zip(preds, labels):
        M[y][p] += 1
    total = len(labels)
    acc = sum(M[k][k] for k in range(n_classes)) / total

    f1s = []
    maes = []
    for k in range(n_classes):
        support = sum(M[k])
        if support == 0:
            continue
        tp = M[k][k]
        fp = sum(M[t][k] for t in range(n_classes)) - tp
        fn = support - tp
        f1s.append(2.0 * tp / (2.0 * tp + fp + fn))
        maes.append(sum(M[k][p] * abs(p - k) for p in range(n_classes)) / support)
    return acc, float(np.mean(f1s)), float(np.mean(maes))


def test_pinned_two_class_case():
    m = compute_metrics([0, 0, 1, 1], [0, 1, 1, 1], 2)
    assert m["acc"] == 0.75
    # class 0: tp 1, fp 1, fn 0 -> 2/3; class 1: tp 2, fp 0, fn 1 -> 4/5
    assert abs(m["macro_f1"] - 11.0 / 15.0) < 1e-15
    # class 0 exact; class 1 misses one of three by a step
    assert abs(m["mmae"] - 1.0 / 6.0) < 1e-15


def test_pinned_ordinal_case():
    m = compute_metrics([0, 2], [1, 2], 3)
    # class 1 predicted one away, class 2 exact, class 0 never occurs
    assert m["mmae"] == 0.5
    assert m["acc"] == 0.5


def test_perfect_predictions():
    m = compute_metrics([0, 1, 2, 1], [0, 1, 2, 1], 3)
    assert m == {"acc": 1.0, "macro_f1": 1.0, "mmae": 0.0}


def test_matches_confusion_oracle_exactly():
    rng = np.random.default_rng(0)
    for trial in range(1000):
        c = 2 if trial % 2 == 0 else 3
        n = int(rng.integers(1, 40))
        labels = rng.integers(0, c, n)
        preds = rng.integers(0, c, n)
        m = compute_metrics(preds, labels, c)
        acc, f1, mmae = _confusion_oracle(preds.tolist(), labels.tolist(), c)
        assert m["acc"] == acc
        assert m["macro_f1"] == f1
        assert m["mmae"] == mmae


def test_absent_class_does_not_change_macro_averages():
    labels = [0, 2, 0, 2, 2]
    preds = [0, 2, 2, 0, 2]
    base = compute_metrics(preds, labels, 3)
    widened = compute_metrics(preds, labels, 4)
    assert base["macro_f1"] == widened["macro_f1"]
    assert base["mmae"] == widened["mmae"]


def test_unpredicted_but_present_class_scores_zero_f1():
    # class 1 exists in labels, never predicted: f1 contribution 0
    m = compute_metrics([0, 0, 0, 0], [0, 0, 1, 1], 2)
    assert abs(m["macro_f1"] - 0.5 * (2 * 2.0 / (2 * 2.0 + 2.0))) < 1e-15


def test_input_validation():
    with pytest.raises(InputError):
        compute_metrics([0, 1], [0], 2)
    with pytest.raises(InputError):
        compute_metrics([], [], 2)
    with pytest.raises(InputError):
        compute_metrics([0, 1], [0, 1], 1)
    with pytest.raises(InputError):
        compute_metrics(np.zeros((2, 2)), [0, 1], 2)
