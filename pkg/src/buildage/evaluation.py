"""Accuracy metrics, confusion matrices, baselines, and patch ranking."""

import numpy as np

from .data import N_EPOCHS
from .errors import EmptyInputError, LengthMismatchError, OutOfRangeError


def _paired(predictions, truths) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(predictions, dtype=np.intp)
    t = np.asarray(truths, dtype=np.intp)
    if p.shape[0] != t.shape[0]:
        raise LengthMismatchError(
            f"{p.shape[0]} predictions vs {t.shape[0]} truths")
    if p.shape[0] == 0:
        raise EmptyInputError("no predictions to score")
    return p, t


def accuracy(predictions, truths) -> float:
    """Fraction of exact label matches."""
    p, t = _paired(predictions, truths)
    return float(np.mean(p == t))


def top1_error(predictions, truths) -> float:
    return 1.0 - accuracy(predictions, truths)


def confusion_matrix(predictions, truths, n_classes: int = N_EPOCHS) -> np.ndarray:
    """Counts indexed [true, predicted]; entries sum to the sample count."""
    p, t = _paired(predictions, truths)
    if p.min() < 0 or p.max() >= n_classes or t.min() < 0 or t.max() >= n_classes:
        raise OutOfRangeError(f"labels outside [0, {n_classes})")
    matrix = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(matrix, (t, p), 1)
    return matrix


def zero_rule_baseline(truths) -> float:
    """Accuracy of always predicting the most frequent true class."""
    t = np.asarray(truths, dtype=np.intp)
    if t.shape[0] == 0:
        raise EmptyInputError("no labels")
    return float(np.bincount(t).max() / t.shape[0])


def underestimation_fraction(matrix: np.ndarray) -> float:
    """Diagnostic: share of errors that predict a later epoch than the truth.

    Values above 0.5 mean the classifier skews towards underestimating
    building age. Returns NaN when there are no errors at all.
    """
    matrix = np.asarray(matrix)
    errors = matrix.sum() - np.trace(matrix)
    if errors == 0:
        return float("nan")
    return float(np.triu(matrix, 1).sum() / errors)


def rank_confident_patches(records, top_n: int) -> list:
    """Correctly classified patches, ranked by probability of the true class.

    records: iterable of (patch_id, true_label, distribution). Returns up
    to top_n (patch_id, p_true) pairs, most confident first; ties keep
    input order.
    """
    if top_n < 1:
        raise ValueError("top_n must be >= 1")
    correct = []
    for patch_id, true_label, dist in records:
        dist = np.asarray(dist, dtype=np.float64)
        if int(dist.argmax()) == int(true_label):
            correct.append((patch_id, float(dist[true_label])))
    correct.sort(key=lambda item: -item[1])
    return correct[:top_n]


def rank_uncertain_patches(records, top_n: int) -> list:
    """All patches ranked by ascending top-two margin (most torn first).

    Returns up to top_n (patch_id, margin) pairs; ties keep input order.
    """
    if top_n < 1:
        raise ValueError("top_n must be >= 1")
    ranked = []
    for patch_id, _, dist in records:
        dist = np.asarray(dist, dtype=np.float64)
        top2 = np.partition(dist, -2)[-2:]
        ranked.append((patch_id, float(top2[1] - top2[0])))
    ranked.sort(key=lambda item: item[1])
    return ranked[:top_n]
