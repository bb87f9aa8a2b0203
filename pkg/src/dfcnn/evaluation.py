"""Confusion-matrix accounting and the metric suite, including the
accuracy-parameter trade-off (APT) score and its per-epoch report series.

Opacity is the positive class.  Metrics whose denominator is zero are
reported as None ("undefined") rather than silently coerced to 0 or 1, so
degenerate validation splits stay visible.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

DECISION_THRESHOLD = 0.5
APT_ACC_WEIGHT = 0.9
APT_PARAM_WEIGHT = 0.1
APT_PARAM_SCALE_MILLIONS = 7.3  # fixed normalizer of the metric


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    fp: int
    tn: int
    fn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.tn, self.fn) < 0:
            raise ValueError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


@dataclass(frozen=True)
class MetricsReport:
    """Metric values in [0,1] (None where undefined) plus model size."""

    acc: Optional[float]
    sen: Optional[float]
    spe: Optional[float]
    f1: Optional[float]
    apt: Optional[float]
    params_millions: float


def confusion(predictions: Sequence[float], labels: Sequence[int],
              threshold: float = DECISION_THRESHOLD) -> ConfusionMatrix:
    """Count outcomes, classifying p >= threshold as positive (opacity)."""
    p = np.asarray(predictions, dtype=np.float64).reshape(-1)
    t = np.asarray(labels).reshape(-1)
    if p.shape != t.shape:
        raise ValueError(f"length mismatch: {p.shape[0]} predictions, {t.shape[0]} labels")
    if not np.isin(t, (0, 1)).all():
        raise ValueError("labels must be 0 or 1")
    pos = p >= threshold
    truth = t == 1
    return ConfusionMatrix(tp=int(np.sum(pos & truth)),
                           fp=int(np.sum(pos & ~truth)),
                           tn=int(np.sum(~pos & ~truth)),
                           fn=int(np.sum(~pos & truth)))


def _ratio(num: int, den: int) -> Optional[float]:
    return num / den if den > 0 else None


def metrics(cm: ConfusionMatrix) -> tuple:
    """(accuracy, sensitivity, specificity, f1); None where the denominator is zero."""
    acc = _ratio(cm.tp + cm.tn, cm.total)
    sen = _ratio(cm.tp, cm.tp + cm.fn)
    spe = _ratio(cm.tn, cm.tn + cm.fp)
    f1 = _ratio(2 * cm.tp, 2 * cm.tp + cm.fp + cm.fn)
    return acc, sen, spe, f1


def apt(acc: float, params_millions: float) -> float:
    """Accuracy-parameter trade-off: 0.9*acc - 0.1*params/7.3 (params in millions)."""
    if params_millions <= 0:
        raise ValueError(f"parameter count must be positive, got {params_millions}")
    return APT_ACC_WEIGHT * acc - APT_PARAM_WEIGHT * params_millions / APT_PARAM_SCALE_MILLIONS


def make_report(cm: ConfusionMatrix, params_millions: float) -> MetricsReport:
    acc, sen, spe, f1 = metrics(cm)
    score = apt(acc, params_millions) if acc is not None else None
    return MetricsReport(acc=acc, sen=sen, spe=spe, f1=f1, apt=score,
                         params_millions=params_millions)


@dataclass(frozen=True)
class ExternalModel:
    """A competing model supplied as (name, accuracy-per-epoch, params)."""

    name: str
    accuracies: tuple
    params_millions: float

    def __post_init__(self):
        if not self.name:
            raise ValueError("external model needs a name")
        if self.params_millions <= 0:
            raise ValueError(f"{self.name}: parameter count must be positive")
        accs = tuple(float(a) for a in self.accuracies)
        if not accs:
            raise ValueError(f"{self.name}: needs at least one accuracy value")
        for a in accs:
            if not 0.0 <= a <= 1.0:
                raise ValueError(f"{self.name}: accuracy {a} outside [0, 1]")
        object.__setattr__(self, "accuracies", accs)


def _fmt(value: Optional[float]) -> str:
    return "undefined" if value is None else f"{value:.4f}"


def emit_report(trace_rows: Sequence, external: Sequence[ExternalModel],
                csv_path, summary_path, model_name: str = "dual-feedback") -> None:
    """Write the per-epoch APT series (CSV) and a text summary.

    The trained model's rows come from its training trace; external models
    contribute their own accuracy series so their APT curves can be plotted
    alongside.
    """
    series = []
    for row in trace_rows:
        score = row.val_apt if row.val_acc is not None else None
        series.append((model_name, row.epoch, row.val_acc, score))
    for ext in external:
        for epoch, acc in enumerate(ext.accuracies, start=1):
            series.append((ext.name, epoch, acc, apt(acc, ext.params_millions)))

    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["model", "epoch", "accuracy", "apt"])
        for name, epoch, acc, score in series:
            writer.writerow([name, epoch,
                             "" if acc is None else repr(float(acc)),
                             "" if score is None else repr(float(score))])

    lines = ["APT analysis", "============", ""]
    final = {}
    for name, epoch, acc, score in series:
        final[name] = (epoch, acc, score)
    for name, (epoch, acc, score) in final.items():
        lines.append(f"{name}: epoch {epoch}, accuracy {_fmt(acc)}, APT {_fmt(score)}")
    Path(summary_path).write_text("\n".join(lines) + "\n")


def write_metrics_summary(rows: Sequence[tuple], path) -> None:
    """Per-partition metric table (accuracy/sensitivity/specificity/F1/APT).

    ``rows`` holds (label, MetricsReport) pairs; a Mean row is appended
    when more than one partition is listed and all values are defined.
    """
    header = ("Partition", "Accuracy", "Sensitivity", "Specificity", "F1", "APT")
    table = [header]
    for label, rep in rows:
        table.append((label, _fmt(rep.acc), _fmt(rep.sen), _fmt(rep.spe),
                      _fmt(rep.f1), _fmt(rep.apt)))
    if len(rows) > 1:
        cols = []
        for attr in ("acc", "sen", "spe", "f1", "apt"):
            vals = [getattr(rep, attr) for _, rep in rows]
            cols.append(_fmt(sum(vals) / len(vals)) if None not in vals else "undefined")
        table.append(("Mean", *cols))
    widths = [max(len(r[i]) for r in table) for i in range(len(header))]
    lines = ["  ".join(cell.ljust(widths[i]) for i, cell in enumerate(row)).rstrip()
             for row in table]
    lines.insert(1, "  ".join("-" * w for w in widths))
    Path(path).write_text("\n".join(lines) + "\n")
