"""Classification metrics and evaluation reports.

Balanced accuracy is the mean per-class recall over classes that occur in
the ground truth; classes with no samples are left out of the average and
listed in ``excluded`` rather than counted as zero recall.
"""

from __future__ import annotations

import csv
import io
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError


@dataclass
class ConfusionMatrix:
    """Counts with rows = true class and columns = predicted class."""

    counts: np.ndarray
    class_names: tuple[str, ...]

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        c = len(self.class_names)
        if self.counts.shape != (c, c):
            raise ContractError(f"counts shape {self.counts.shape} does not match {c} classes")
        if np.any(self.counts < 0):
            raise ContractError("confusion counts must be non-negative")

    @classmethod
    def from_predictions(cls, y_true, y_pred, class_names) -> "ConfusionMatrix":
        c = len(class_names)
        y_true, y_pred = np.asarray(y_true, np.int64), np.asarray(y_pred, np.int64)
        counts = np.zeros((c, c), dtype=np.int64)
        np.add.at(counts, (y_true, y_pred), 1)
        return cls(counts, tuple(class_names))

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def support(self) -> np.ndarray:
        return self.counts.sum(axis=1)

    def recalls(self) -> dict[str, float]:
        """Per-class recall for classes with support."""
        sup = self.support
        return {n: float(self.counts[i, i] / sup[i]) for i, n in enumerate(self.class_names) if sup[i] > 0}

    def normalized(self) -> np.ndarray:
        """Row-normalised matrix; rows of absent classes are NaN."""
        sup = self.support.astype(np.float64)[:, None]
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(sup > 0, self.counts / np.where(sup > 0, sup, 1.0), np.nan)

    def to_tsv(self, percent: bool = False) -> str:
        out = io.StringIO()
        w = csv.writer(out, delimiter="\t", lineterminator="\n")
        w.writerow(["true\\pred", *self.class_names])
        values = self.normalized() * 100.0 if percent else self.counts
        for name, row in zip(self.class_names, values):
            if percent:
                w.writerow([name, *("" if np.isnan(v) else f"{v:.2f}" for v in row)])
            else:
                w.writerow([name, *(int(v) for v in row)])
        return out.getvalue()


@dataclass(frozen=True)
class BalancedAccuracy:
    value: float
    excluded: tuple[str, ...]


def balanced_accuracy(cm: ConfusionMatrix) -> BalancedAccuracy:
    recalls = cm.recalls()
    if not recalls:
        raise ContractError("balanced accuracy of an empty confusion matrix is undefined")
    excluded = tuple(n for n in cm.class_names if n not in recalls)
    return BalancedAccuracy(float(np.mean(list(recalls.values()))), excluded)


def plain_accuracy(cm: ConfusionMatrix) -> float:
    if cm.total == 0:
        raise ContractError("accuracy of an empty confusion matrix is undefined")
    return float(np.trace(cm.counts) / cm.total)


@dataclass
class EvalReport:
    balanced_accuracy: float
    accuracy: float
    confusion: ConfusionMatrix
    recalls: dict[str, float]
    excluded: tuple[str, ...]
    predictions: list[tuple[str, str, str, float]] = field(default_factory=list)  # uri, true, predicted, confidence

    def summary_tsv(self) -> str:
        lines = ["metric\tvalue", f"balanced_accuracy\t{self.balanced_accuracy:.6f}", f"accuracy\t{self.accuracy:.6f}",
                 f"samples\t{self.confusion.total}", f"excluded_classes\t{','.join(self.excluded)}"]
        lines += [f"recall[{k}]\t{v:.6f}" for k, v in self.recalls.items()]
        return "\n".join(lines) + "\n"

    def audit_tsv(self) -> str:
        rows = ["uri\ttrue\tpredicted\tconfidence\tcorrect"]
        rows += [f"{u}\t{t}\t{p}\t{c:.6f}\t{int(t == p)}" for u, t, p, c in self.predictions]
        return "\n".join(rows) + "\n"


def evaluate_predictions(true_names, probabilities, class_names, uris=None) -> EvalReport:
    """Score class probabilities against ground-truth class names.

    ``class_names`` is the model's output order. Every ground-truth name must
    be one of them.
    """
    class_names = tuple(class_names)
    true_names = list(true_names)
    probabilities = np.asarray(probabilities, dtype=np.float64)
    if not true_names:
        raise ContractError("nothing to evaluate: the split is empty")
    if probabilities.shape != (len(true_names), len(class_names)):
        raise ContractError(f"probabilities shape {probabilities.shape} != ({len(true_names)}, {len(class_names)})")
    unknown = sorted(set(true_names) - set(class_names))
    if unknown:
        raise ContractError(f"classes absent from the model head: {unknown}")
    pos = {n: i for i, n in enumerate(class_names)}
    y_true = np.array([pos[n] for n in true_names])
    y_pred = probabilities.argmax(axis=1)
    cm = ConfusionMatrix.from_predictions(y_true, y_pred, class_names)
    ba = balanced_accuracy(cm)
    uris = list(uris) if uris is not None else [str(i) for i in range(len(true_names))]
    audit = [(u, t, class_names[p], float(probabilities[i, p]))
             for i, (u, t, p) in enumerate(zip(uris, true_names, y_pred))]
    return EvalReport(ba.value, plain_accuracy(cm), cm, cm.recalls(), ba.excluded, audit)


def evaluate(model, images, true_names, class_names, uris=None, batch_size: int = 128) -> EvalReport:
    """Run ``model.predict`` over ``images`` and score the result."""
    return evaluate_predictions(true_names, model.predict(images, batch_size), class_names, uris)


@dataclass
class GroupRow:
    group: str
    report: EvalReport
    histogram: dict[str, int]


def grouped_report(report: EvalReport, groups: dict[str, str], known_groups=None) -> list[GroupRow]:
    """Split an evaluation by a per-uri group tag.

    Each group gets its own metrics plus the histogram of ground-truth
    classes it contains. Every audited uri needs a tag; with
    ``known_groups`` any other tag is rejected.
    """
    members: dict[str, list[int]] = {}
    for i, (uri, *_rest) in enumerate(report.predictions):
        if uri not in groups:
            raise ContractError(f"no group tag for {uri}")
        tag = groups[uri]
        if known_groups is not None and tag not in known_groups:
            raise ContractError(f"unknown group tag {tag!r} for {uri}; expected one of {sorted(known_groups)}")
        members.setdefault(tag, []).append(i)
    names = report.confusion.class_names
    pos = {n: i for i, n in enumerate(names)}
    rows = []
    for tag in sorted(members):
        preds = [report.predictions[i] for i in members[tag]]
        cm = ConfusionMatrix.from_predictions([pos[p[1]] for p in preds], [pos[p[2]] for p in preds], names)
        ba = balanced_accuracy(cm)
        sub = EvalReport(ba.value, plain_accuracy(cm), cm, cm.recalls(), ba.excluded, preds)
        hist = Counter(p[1] for p in preds)
        rows.append(GroupRow(tag, sub, {n: hist.get(n, 0) for n in names}))
    return rows


def grouped_tsv(rows: list[GroupRow]) -> str:
    if not rows:
        return ""
    names = list(rows[0].histogram)
    lines = ["group\tsamples\tbalanced_accuracy\taccuracy\texcluded\t" + "\t".join(f"n[{n}]" for n in names)]
    for r in rows:
        lines.append(f"{r.group}\t{r.report.confusion.total}\t{r.report.balanced_accuracy:.6f}\t{r.report.accuracy:.6f}\t"
                     f"{','.join(r.report.excluded)}\t" + "\t".join(str(r.histogram[n]) for n in names))
    return "\n".join(lines) + "\n"
