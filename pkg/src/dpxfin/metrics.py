"""Confusion counts and the binary classification metrics derived from them."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import NamedTuple


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    def __post_init__(self):
        for name, value in asdict(self).items():
            if value < 0:
                raise ValueError(f"{name} must be non-negative, got {value}")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(
            self.tp + other.tp, self.fp + other.fp, self.tn + other.tn, self.fn + other.fn
        )

    def as_dict(self) -> dict:
        return asdict(self)


class Ratio(NamedTuple):
    """A metric value plus a flag set when its denominator was zero."""

    value: float
    degenerate: bool = False

    def __float__(self) -> float:
        return self.value


def accuracy(c: ConfusionCounts) -> float:
    if c.total == 0:
        raise ValueError("accuracy is undefined for an empty confusion matrix")
    return (c.tp + c.tn) / c.total


def _safe_ratio(num: int, den: int) -> Ratio:
    # degenerate denominators give 0.0 rather than NaN so averages stay finite
    if den == 0:
        return Ratio(0.0, True)
    return Ratio(num / den, False)


def recall(c: ConfusionCounts) -> Ratio:
    return _safe_ratio(c.tp, c.tp + c.fn)


def precision(c: ConfusionCounts) -> Ratio:
    return _safe_ratio(c.tp, c.tp + c.fp)


def f1_from(p: float, r: float) -> float:
    if p + r == 0:
        return 0.0
    return 2 * p * r / (p + r)


def f1(c: ConfusionCounts) -> float:
    return f1_from(precision(c).value, recall(c).value)


def classification_report(c: ConfusionCounts) -> dict:
    """Accuracy, F1, precision and recall with the laundering class as positive."""
    p, r = precision(c), recall(c)
    return {
        "accuracy": accuracy(c),
        "f1": f1_from(p.value, r.value),
        "precision": p.value,
        "recall": r.value,
        "precision_degenerate": p.degenerate,
        "recall_degenerate": r.degenerate,
        **c.as_dict(),
    }
