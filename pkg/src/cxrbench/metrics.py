"""Binary classification metrics with PositiveCOVID as the positive class.

Zero-denominator convention: precision and recall return 0.0 when their
denominator is zero; :func:`evaluate_fold` records such metrics in
``MetricReport.undefined_flags`` so the condition stays visible.
"""
from __future__ import annotations

import math
import statistics
from dataclasses import dataclass, field, fields
from typing import Sequence

from .dataset import ClassLabel
from .exceptions import DegenerateCurveError, UndefinedMetricError, ValidationError

METRIC_NAMES = ("auc", "accuracy", "precision", "recall", "f1")
MACRO_NAMES = ("macro_precision", "macro_recall", "macro_f1")


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    fp: int
    fn: int
    tn: int

    def __post_init__(self):
        if any(v < 0 for v in (self.tp, self.fp, self.fn, self.tn)):
            raise ValidationError("confusion counts must be nonnegative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn)

    def as_table(self) -> list[list[int]]:
        """Rows are actual classes, columns predicted, positive first."""
        return [[self.tp, self.fn], [self.fp, self.tn]]

    def swapped(self) -> "ConfusionMatrix":
        """The same counts with NegativePneumonia taken as the positive class."""
        return ConfusionMatrix(self.tn, self.fn, self.fp, self.tp)

    def to_dict(self) -> dict:
        return {"tp": self.tp, "fp": self.fp, "fn": self.fn, "tn": self.tn}


def confusion_matrix(predicted: Sequence, actual: Sequence) -> ConfusionMatrix:
    if len(predicted) != len(actual):
        raise ValidationError(f"length mismatch: {len(predicted)} predictions, {len(actual)} labels")
    if len(actual) == 0:
        raise ValidationError("confusion matrix needs at least one record")
    tp = fp = fn = tn = 0
    for p, a in zip(predicted, actual):
        p_pos = ClassLabel.coerce(p) is ClassLabel.POSITIVE
        a_pos = ClassLabel.coerce(a) is ClassLabel.POSITIVE
        if p_pos and a_pos:
            tp += 1
        elif p_pos:
            fp += 1
        elif a_pos:
            fn += 1
        else:
            tn += 1
    return ConfusionMatrix(tp, fp, fn, tn)


def accuracy(cm: ConfusionMatrix) -> float:
    if cm.total == 0:
        raise UndefinedMetricError("accuracy of an empty confusion matrix")
    return (cm.tp + cm.tn) / cm.total


def precision(cm: ConfusionMatrix) -> float:
    d = cm.tp + cm.fp
    return cm.tp / d if d else 0.0


def recall(cm: ConfusionMatrix) -> float:
    d = cm.tp + cm.fn
    return cm.tp / d if d else 0.0


def f1_score(precision: float, recall: float) -> float:
    s = precision + recall
    return 2.0 * precision * recall / s if s else 0.0


def undefined_metrics(cm: ConfusionMatrix) -> set[str]:
    flags = set()
    if cm.tp + cm.fp == 0:
        flags.add("precision")
    if cm.tp + cm.fn == 0:
        flags.add("recall")
    if "precision" in flags or "recall" in flags:
        flags.add("f1")
    return flags


def _positive_mask(actual: Sequence) -> list[bool]:
    return [ClassLabel.coerce(a) is ClassLabel.POSITIVE for a in actual]


def roc_curve(positive_scores: Sequence[float], actual: Sequence) -> list[tuple[float, float]]:
    """(FPR, TPR) points from (0, 0) through one point per distinct threshold.

    A sample counts as predicted positive at threshold ``t`` when its score
    is ``>= t``. Thresholds run from the highest score down, so the last
    point is always (1, 1).
    """
    if len(positive_scores) != len(actual):
        raise ValidationError("scores and labels differ in length")
    pos = _positive_mask(actual)
    n_pos = sum(pos)
    n_neg = len(pos) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DegenerateCurveError("ROC needs both positive and negative samples")
    pairs = sorted(zip((float(s) for s in positive_scores), pos), key=lambda t: -t[0])
    points = [(0.0, 0.0)]
    tp = fp = 0
    i = 0
    while i < len(pairs):
        threshold = pairs[i][0]
        while i < len(pairs) and pairs[i][0] == threshold:
            if pairs[i][1]:
                tp += 1
            else:
                fp += 1
            i += 1
        points.append((fp / n_neg, tp / n_pos))
    return points


def auc(roc: Sequence[tuple[float, float]]) -> float:
    """Trapezoidal area under a ROC curve."""
    if len(roc) < 2:
        raise ValidationError("a ROC curve needs at least two points")
    area = 0.0
    for (x0, y0), (x1, y1) in zip(roc, roc[1:]):
        if x1 < x0 or y1 < y0:
            raise ValidationError("ROC points must be nondecreasing")
        area += (x1 - x0) * (y0 + y1) / 2.0
    return area


@dataclass
class MetricReport:
    accuracy: float
    precision: float
    recall: float
    f1: float
    auc: float
    macro_precision: float = 0.0
    macro_recall: float = 0.0
    macro_f1: float = 0.0
    undefined_flags: set[str] = field(default_factory=set)

    def values(self) -> dict[str, float]:
        return {f.name: getattr(self, f.name) for f in fields(self) if f.name != "undefined_flags"}

    def to_dict(self) -> dict:
        return dict(self.values(), undefined_flags=sorted(self.undefined_flags))


def metric_report(cm: ConfusionMatrix, auc_value: float | None = None) -> MetricReport:
    """Binary metrics from ``cm``; a missing ``auc_value`` is reported as 0 and flagged."""
    flags = undefined_metrics(cm)
    p, r = precision(cm), recall(cm)
    neg = cm.swapped()
    pn, rn = precision(neg), recall(neg)
    flags |= {f"macro_{m}" for m in undefined_metrics(neg)}
    if auc_value is None:
        flags.add("auc")
    return MetricReport(
        accuracy=accuracy(cm),
        precision=p,
        recall=r,
        f1=f1_score(p, r),
        auc=0.0 if auc_value is None else auc_value,
        macro_precision=(p + pn) / 2,
        macro_recall=(r + rn) / 2,
        macro_f1=(f1_score(p, r) + f1_score(pn, rn)) / 2,
        undefined_flags=flags,
    )


def evaluate_fold(predicted: Sequence, actual: Sequence, positive_scores: Sequence[float]) -> MetricReport:
    cm = confusion_matrix(predicted, actual)
    try:
        auc_value = auc(roc_curve(positive_scores, actual))
    except DegenerateCurveError:
        auc_value = None
    return metric_report(cm, auc_value)


@dataclass
class AggregateReport:
    mean: dict[str, float]
    std: dict[str, float]
    k: int

    def to_dict(self) -> dict:
        return {"k": self.k, "mean": dict(self.mean), "std": dict(self.std)}

    @classmethod
    def from_dict(cls, d: dict) -> "AggregateReport":
        return cls(dict(d["mean"]), dict(d["std"]), int(d["k"]))


def aggregate_folds(reports: Sequence[MetricReport]) -> AggregateReport:
    """Per-metric mean and sample (n - 1) standard deviation across folds."""
    if len(reports) < 2:
        raise ValidationError("at least two fold reports are needed for a standard deviation")
    names = list(reports[0].values())
    mean, std = {}, {}
    for name in names:
        xs = [r.values()[name] for r in reports]
        mean[name] = math.fsum(xs) / len(xs)
        std[name] = statistics.stdev(xs)
    return AggregateReport(mean, std, len(reports))


def consolidate_confusions(per_fold: Sequence[ConfusionMatrix]) -> ConfusionMatrix:
    if not per_fold:
        raise ValidationError("nothing to consolidate")
    total = per_fold[0]
    for cm in per_fold[1:]:
        total = total + cm
    return total
