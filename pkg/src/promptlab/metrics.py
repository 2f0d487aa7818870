"""Accuracy, F1, MCC, Pearson, Spearman; the invalid-label rule; standardized scoring."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

METRIC_KINDS = ("accuracy", "f1", "mcc", "pearson", "spearman")
CLASSIFICATION_METRICS = ("accuracy", "f1", "mcc")
INVALID_REGRESSION_FILL = 0.5


class MetricError(ValueError):
    pass


class UndefinedMetricError(MetricError):
    """A correlation over a constant input."""


def _classes(predictions, targets, num_classes: int | None):
    t = np.asarray(targets, dtype=np.int64)
    k = num_classes or int(max(t.max(), max((p for p in predictions if p is not None), default=0))) + 1
    k = max(k, 2)
    # an invalid prediction counts as some wrong class
    p = np.array([(ti + 1) % k if pi is None else int(pi) for pi, ti in zip(predictions, t)],
                 dtype=np.int64)
    return p, t, k


def accuracy(predictions, targets) -> float:
    p, t, _ = _classes(predictions, targets, None)
    return float(np.mean(p == t))


def f1_binary(predictions, targets) -> float:
    """F1 of the positive class 1; 0 when there are no true positives."""
    p, t, _ = _classes(predictions, targets, 2)
    tp = int(np.sum((p == 1) & (t == 1)))
    fp = int(np.sum((p == 1) & (t != 1)))
    fn = int(np.sum((p != 1) & (t == 1)))
    return 0.0 if tp == 0 else 2 * tp / (2 * tp + fp + fn)


def mcc(predictions, targets, num_classes: int | None = None) -> float:
    """Matthews correlation from the K-class confusion matrix; 0 if undefined."""
    p, t, k = _classes(predictions, targets, num_classes)
    C = np.zeros((k, k))
    np.add.at(C, (t, p), 1.0)
    s = C.sum()
    c = np.trace(C)
    t_sum = C.sum(axis=1)
    p_sum = C.sum(axis=0)
    cov_pt = c * s - t_sum @ p_sum
    cov_pp = s * s - p_sum @ p_sum
    cov_tt = s * s - t_sum @ t_sum
    if cov_pp == 0 or cov_tt == 0:
        return 0.0
    return float(cov_pt / math.sqrt(cov_pp * cov_tt))


def _regression_values(predictions) -> np.ndarray:
    return np.array([INVALID_REGRESSION_FILL if v is None else float(v) for v in predictions])


def pearson(predictions, targets) -> float:
    x = _regression_values(predictions)
    y = np.asarray(targets, dtype=np.float64)
    if np.all(x == x[0]) or np.all(y == y[0]):
        raise UndefinedMetricError("correlation of a constant sequence")
    # rescale before squaring so tiny spreads do not underflow to zero
    xc, yc = x - x.mean(), y - y.mean()
    xc, yc = xc / np.abs(xc).max(), yc / np.abs(yc).max()
    den = math.sqrt(float(xc @ xc) * float(yc @ yc))
    return float(np.clip((xc @ yc) / den, -1.0, 1.0))


def average_ranks(values) -> np.ndarray:
    """1-based ranks with ties sharing the mean of their positions."""
    v = np.asarray(values, dtype=np.float64)
    order = np.argsort(v, kind="mergesort")
    ranks = np.empty(len(v))
    sorted_v = v[order]
    i = 0
    while i < len(v):
        j = i
        while j + 1 < len(v) and sorted_v[j + 1] == sorted_v[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def spearman(predictions, targets) -> float:
    return pearson(average_ranks(_regression_values(predictions)), average_ranks(targets))


_METRICS = {
    "accuracy": accuracy,
    "f1": f1_binary,
    "mcc": mcc,
    "pearson": pearson,
    "spearman": spearman,
}


def compute_metric(kind: str, predictions: Sequence, targets: Sequence) -> float:
    """Raw score (fraction or correlation); ``None`` predictions are invalid labels."""
    if kind not in _METRICS:
        raise MetricError(f"unknown metric {kind!r}; choose from {METRIC_KINDS}")
    if len(predictions) != len(targets) or len(targets) == 0:
        raise MetricError("predictions and targets must have equal nonzero length")
    return _METRICS[kind](list(predictions), list(targets))


@dataclass
class EvalResult:
    """Scores reported x100, as in benchmark tables."""

    scores: dict[str, float]
    invalid_count: int
    n_examples: int
    flags: list[str] = field(default_factory=list)

    @property
    def invalid_fraction(self) -> float:
        return self.invalid_count / self.n_examples if self.n_examples else 0.0

    def to_dict(self) -> dict:
        return {"scores": dict(self.scores), "invalid_count": self.invalid_count,
                "n_examples": self.n_examples, "flags": list(self.flags)}


def evaluate_predictions(metric_kinds: Sequence[str], predictions: Sequence,
                         targets: Sequence) -> EvalResult:
    """Score decoded predictions.

    If every prediction is invalid the model never emitted a label, and every
    metric is zero.  A correlation over constant input scores zero with a flag.
    """
    n = len(targets)
    invalid = sum(p is None for p in predictions)
    flags: list[str] = []
    if n and invalid == n:
        return EvalResult({k: 0.0 for k in metric_kinds}, invalid, n, ["all_invalid"])
    scores = {}
    for kind in metric_kinds:
        try:
            scores[kind] = 100.0 * compute_metric(kind, predictions, targets)
        except UndefinedMetricError:
            scores[kind] = 0.0
            flags.append(f"undefined_{kind}")
    return EvalResult(scores, invalid, n, flags)


def score_for_table(result: EvalResult) -> float:
    """Single number per task: the metric, or the mean of two metrics."""
    vals = list(result.scores.values())
    return float(sum(vals) / len(vals)) if vals else 0.0


def standardized_overall_scores(table: Mapping[str, Mapping[str, float | None]]
                                ) -> dict[str, tuple[float, float]]:
    """Per-method (mean, std) of per-task min-max scores scaled to [0, 100].

    ``table[method][task]``; ``None``/NaN cells are skipped for that task.  A
    task on which all present methods tie gives every one of them 100.
    """
    methods = list(table)
    tasks = sorted({t for row in table.values() for t in row})
    if len(methods) < 2 or len(tasks) < 2:
        raise MetricError("standardized scoring needs at least two methods and two tasks")
    scaled: dict[str, list[float]] = {m: [] for m in methods}
    for task in tasks:
        present = {m: table[m].get(task) for m in methods}
        present = {m: float(v) for m, v in present.items() if v is not None and not math.isnan(v)}
        if len(present) < len(methods):
            missing = sorted(set(methods) - set(present))
            warnings.warn(f"task {task!r}: no score for {missing}; excluded from their profile")
        if not present:
            continue
        lo, hi = min(present.values()), max(present.values())
        for m, v in present.items():
            scaled[m].append(100.0 if hi == lo else 100.0 * (v - lo) / (hi - lo))
    return {m: (float(np.mean(v)), float(np.std(v))) if v else (float("nan"), float("nan"))
            for m, v in scaled.items()}
