"""Accuracy / precision / recall / F1 from a 3-class confusion matrix."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import LABELS, SentimentLabel
from .errors import InputError

UNPARSED = None


@dataclass
class ConfusionMatrix:
    """Rows are gold classes, columns predicted classes, in ``LABELS`` order."""

    counts: np.ndarray = field(default_factory=lambda: np.zeros((3, 3), dtype=np.int64))
    n_unparsed: int = 0

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def cell(self, gold: SentimentLabel, pred: SentimentLabel) -> int:
        return int(self.counts[LABELS.index(gold), LABELS.index(pred)])


@dataclass
class ClassScores:
    precision: float
    recall: float
    f1: float
    support: int


@dataclass
class MetricsReport:
    accuracy: float
    per_class: dict[str, ClassScores]
    macro: ClassScores
    weighted: ClassScores
    n_evaluated: int
    n_unparsed: int
    absent_classes: list[str]
    confusion: list[list[int]]

    def to_json(self) -> dict:
        def scores(s: ClassScores) -> dict:
            return {"precision": s.precision, "recall": s.recall, "f1": s.f1, "support": s.support}

        return {
            "accuracy": self.accuracy,
            "macro": scores(self.macro),
            "weighted": scores(self.weighted),
            "per_class": {k: scores(v) for k, v in self.per_class.items()},
            "n_evaluated": self.n_evaluated,
            "n_unparsed": self.n_unparsed,
            "absent_classes": self.absent_classes,
            "confusion": {"labels": [lab.value for lab in LABELS], "rows_gold_cols_pred": self.confusion},
        }

    def format_table(self) -> str:
        lines = [
            f"evaluated {self.n_evaluated} (unparsed {self.n_unparsed})",
            f"{'class':<10}{'precision':>10}{'recall':>10}{'f1':>10}{'support':>9}",
        ]
        rows = list(self.per_class.items()) + [("macro", self.macro), ("weighted", self.weighted)]
        for name, s in rows:
            lines.append(f"{name:<10}{s.precision:>10.4f}{s.recall:>10.4f}{s.f1:>10.4f}{s.support:>9d}")
        lines.append(f"accuracy  {self.accuracy:.4f}")
        lines.append("confusion (rows gold, cols pred: " + ", ".join(lab.value for lab in LABELS) + ")")
        lines.extend("  " + " ".join(f"{c:>5d}" for c in row) for row in self.confusion)
        if self.absent_classes:
            lines.append("classes absent from gold and predictions: " + ", ".join(self.absent_classes))
        return "\n".join(lines)


def confusion(golds: Sequence[SentimentLabel], preds: Sequence[SentimentLabel | None]) -> ConfusionMatrix:
    """Tally gold/predicted pairs; ``None`` predictions are counted as unparsed."""
    if len(golds) != len(preds):
        raise InputError(f"{len(golds)} gold labels but {len(preds)} predictions")
    if not golds:
        raise InputError("nothing to evaluate")
    cm = ConfusionMatrix()
    for g, p in zip(golds, preds):
        if p is UNPARSED:
            cm.n_unparsed += 1
            continue
        cm.counts[LABELS.index(SentimentLabel(g)), LABELS.index(SentimentLabel(p))] += 1
    return cm


def _ratio(num: float, den: float) -> float:
    return num / den if den else 0.0


def metrics(cm: ConfusionMatrix) -> MetricsReport:
    total = cm.total
    if total == 0:
        raise InputError("confusion matrix is empty")
    c = cm.counts
    per_class = {}
    absent = []
    for i, lab in enumerate(LABELS):
        tp = c[i, i]
        p = _ratio(tp, c[:, i].sum())
        r = _ratio(tp, c[i, :].sum())
        f1 = _ratio(2 * p * r, p + r)
        per_class[lab.value] = ClassScores(p, r, f1, int(c[i, :].sum()))
        if c[i, :].sum() == 0 and c[:, i].sum() == 0:
            absent.append(lab.value)

    vals = list(per_class.values())
    support = np.array([s.support for s in vals], dtype=float)
    macro = ClassScores(
        float(np.mean([s.precision for s in vals])),
        float(np.mean([s.recall for s in vals])),
        float(np.mean([s.f1 for s in vals])),
        total,
    )
    weighted = ClassScores(
        float(np.dot(support, [s.precision for s in vals]) / total),
        float(np.dot(support, [s.recall for s in vals]) / total),
        float(np.dot(support, [s.f1 for s in vals]) / total),
        total,
    )
    return MetricsReport(
        accuracy=float(np.trace(c)) / total,
        per_class=per_class,
        macro=macro,
        weighted=weighted,
        n_evaluated=total,
        n_unparsed=cm.n_unparsed,
        absent_classes=absent,
        confusion=c.tolist(),
    )


def evaluate(golds: Sequence[SentimentLabel], preds: Sequence[SentimentLabel | None]) -> MetricsReport:
    return metrics(confusion(golds, preds))
