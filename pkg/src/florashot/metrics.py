"""Confusion matrices, precision/recall/F1, and report rendering.

Convention: confusion matrix rows are the true class, columns the
predicted class, so recall reads along rows and precision down columns.
When a precision or recall denominator is zero the score is reported as
0 and flagged as undefined rather than silently dropped.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

__all__ = [
    "ConfusionMatrix",
    "ClassReport",
    "ReportSummary",
    "confusion",
    "class_report",
    "render_text_table",
    "write_report_csv",
    "write_heatmap",
    "render_report",
]


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # CxC, rows = true, cols = predicted
    class_names: list[str]

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        c = len(self.class_names)
        if self.counts.shape != (c, c):
            raise ValueError(
                f"counts shape {self.counts.shape} does not match {c} classes"
            )
        if (self.counts < 0).any():
            raise ValueError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def accuracy(self) -> float:
        return float(np.trace(self.counts)) / self.total if self.total else 0.0


@dataclass
class ClassReport:
    class_name: str
    precision: float
    recall: float
    f1: float
    support: int
    precision_undefined: bool = False
    recall_undefined: bool = False


@dataclass
class ReportSummary:
    macro_precision: float
    macro_recall: float
    macro_f1: float
    weighted_precision: float
    weighted_recall: float
    weighted_f1: float
    accuracy: float
    total: int


def confusion(
    preds: Sequence[int], labels: Sequence[int], n_classes: int,
    class_names: Optional[Sequence[str]] = None,
) -> ConfusionMatrix:
    """Tally (true, predicted) pairs into a CxC matrix."""
    preds = np.asarray(preds, dtype=int)
    labels = np.asarray(labels, dtype=int)
    if preds.shape != labels.shape or preds.ndim != 1:
        raise ValueError(
            f"preds and labels must be equal-length 1-D, got {preds.shape} vs {labels.shape}"
        )
    for name, arr in (("preds", preds), ("labels", labels)):
        if arr.size and (arr.min() < 0 or arr.max() >= n_classes):
            raise ValueError(f"{name} contain indices outside [0, {n_classes})")
    counts = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(counts, (labels, preds), 1)
    names = list(class_names) if class_names else [f"class{i}" for i in range(n_classes)]
    return ConfusionMatrix(counts=counts, class_names=names)


def class_report(cm: ConfusionMatrix) -> tuple[list[ClassReport], ReportSummary]:
    """Per-class precision/recall/F1 plus macro and support-weighted averages."""
    counts = cm.counts
    reports: list[ClassReport] = []
    for i, name in enumerate(cm.class_names):
        tp = int(counts[i, i])
        fn = int(counts[i, :].sum()) - tp
        fp = int(counts[:, i].sum()) - tp
        p_undef = (tp + fp) == 0
        r_undef = (tp + fn) == 0
        precision = 0.0 if p_undef else tp / (tp + fp)
        recall = 0.0 if r_undef else tp / (tp + fn)
        f1 = 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)
        reports.append(
            ClassReport(
                class_name=name,
                precision=precision,
                recall=recall,
                f1=f1,
                support=tp + fn,
                precision_undefined=p_undef,
                recall_undefined=r_undef,
            )
        )
    supports = np.array([r.support for r in reports], dtype=np.float64)
    total = cm.total
    weights = supports / total if total else np.zeros_like(supports)

    def wavg(values):
        return float(np.sum(np.array(values) * weights))

    summary = ReportSummary(
        macro_precision=float(np.mean([r.precision for r in reports])),
        macro_recall=float(np.mean([r.recall for r in reports])),
        macro_f1=float(np.mean([r.f1 for r in reports])),
        weighted_precision=wavg([r.precision for r in reports]),
        weighted_recall=wavg([r.recall for r in reports]),
        weighted_f1=wavg([r.f1 for r in reports]),
        accuracy=cm.accuracy,
        total=total,
    )
    return reports, summary


def render_text_table(reports: list[ClassReport], summary: ReportSummary) -> str:
    """Aligned text table: one row per class plus macro and weighted rows."""
    name_w = max(12, max((len(r.class_name) for r in reports), default=0) + 2)
    lines = [
        f"{'class':<{name_w}}{'precision':>10}{'recall':>10}{'f1':>10}{'support':>10}"
    ]
    for r in reports:
        lines.append(
            f"{r.class_name:<{name_w}}{r.precision:>10.4f}{r.recall:>10.4f}"
            f"{r.f1:>10.4f}{r.support:>10d}"
        )
    lines.append(
        f"{'macro avg':<{name_w}}{summary.macro_precision:>10.4f}"
        f"{summary.macro_recall:>10.4f}{summary.macro_f1:>10.4f}{summary.total:>10d}"
    )
    lines.append(
        f"{'weighted avg':<{name_w}}{summary.weighted_precision:>10.4f}"
        f"{summary.weighted_recall:>10.4f}{summary.weighted_f1:>10.4f}{summary.total:>10d}"
    )
    lines.append("")
    lines.append(f"accuracy: {summary.accuracy:.4f} ({summary.total} samples)")
    return "\n".join(lines)


def write_report_csv(path, reports: list[ClassReport], summary: ReportSummary) -> None:
    """CSV twin of the text table; float fields keep full precision."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["class_name", "precision", "recall", "f1", "support", "undefined_flags"])
        for r in reports:
            flags = []
            if r.precision_undefined:
                flags.append("precision")
            if r.recall_undefined:
                flags.append("recall")
            w.writerow(
                [r.class_name, repr(r.precision), repr(r.recall), repr(r.f1),
                 r.support, "|".join(flags)]
            )
        w.writerow(
            ["macro avg", repr(summary.macro_precision), repr(summary.macro_recall),
             repr(summary.macro_f1), summary.total, ""]
        )
        w.writerow(
            ["weighted avg", repr(summary.weighted_precision), repr(summary.weighted_recall),
             repr(summary.weighted_f1), summary.total, ""]
        )


def write_heatmap(path, cm: ConfusionMatrix, cell: int = 32) -> None:
    """Grayscale confusion heatmap; cell brightness is count / max count."""
    from PIL import Image

    counts = cm.counts.astype(np.float64)
    peak = counts.max() if counts.max() > 0 else 1.0
    gray = np.round(255.0 * counts / peak).astype(np.uint8)
    img = np.kron(gray, np.ones((cell, cell), dtype=np.uint8))
    Image.fromarray(img, mode="L").save(path)


def render_report(out_prefix, preds, labels, n_classes, class_names=None) -> dict:
    """Write the text/CSV/heatmap report trio; returns the artifact paths."""
    cm = confusion(preds, labels, n_classes, class_names)
    reports, summary = class_report(cm)
    text_path = f"{out_prefix}_report.txt"
    csv_path = f"{out_prefix}_report.csv"
    png_path = f"{out_prefix}_confusion.png"
    with open(text_path, "w") as f:
        f.write(render_text_table(reports, summary) + "\n")
    write_report_csv(csv_path, reports, summary)
    write_heatmap(png_path, cm)
    return {"text": text_path, "csv": csv_path, "heatmap": png_path, "summary": summary}
