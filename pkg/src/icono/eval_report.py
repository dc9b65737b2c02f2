"""Confusion matrices, macro metrics, result tables and learning curves."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import kernels
from .errors import EmptyLog, EmptyMatrix, LengthMismatch, UnknownLabel

# Display order of model rows.
ROW_ORDER = ("random_forest", "logistic_regression", "svm_linear", "svm_rbf", "A", "B", "C")

LAYOUT_TITLES = {
    "face": "Performance metrics for models trained on features from FACE images",
    "body": "Performance metrics for models trained on features from BODY images",
}


@dataclass(frozen=True)
class ConfusionMatrix:
    counts: np.ndarray  # [true][predicted]
    class_names: tuple

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def errors(self) -> int:
        return self.total - int(np.trace(self.counts))

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["true\\predicted", *self.class_names])
        for name, row in zip(self.class_names, self.counts):
            writer.writerow([name, *(int(v) for v in row)])
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {"class_names": list(self.class_names), "counts": self.counts.tolist()}


@dataclass
class MetricsReport:
    precision: float
    recall: float
    f1: float
    accuracy: float
    confusion: Optional[ConfusionMatrix] = None
    model_id: str = ""
    dataset_id: str = ""
    label: str = ""
    per_class: dict = field(default_factory=dict)
    flags: list = field(default_factory=list)
    averaging: str = "macro"

    def to_dict(self) -> dict:
        return {
            "model_id": self.model_id,
            "dataset_id": self.dataset_id,
            "label": self.label,
            "averaging": self.averaging,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "accuracy": self.accuracy,
            "per_class": self.per_class,
            "flags": list(self.flags),
            "confusion": self.confusion.to_dict() if self.confusion is not None else None,
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "MetricsReport":
        cm = raw.get("confusion")
        confusion_matrix = None
        if cm is not None:
            confusion_matrix = ConfusionMatrix(np.asarray(cm["counts"], dtype=np.int64), tuple(cm["class_names"]))
        return cls(
            precision=raw["precision"], recall=raw["recall"], f1=raw["f1"], accuracy=raw["accuracy"],
            confusion=confusion_matrix, model_id=raw.get("model_id", ""), dataset_id=raw.get("dataset_id", ""),
            label=raw.get("label", ""), per_class=raw.get("per_class", {}), flags=raw.get("flags", []),
            averaging=raw.get("averaging", "macro"),
        )

    def save_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")


def _as_indices(values: Sequence, class_names: Sequence) -> np.ndarray:
    lookup = {name: i for i, name in enumerate(class_names)}
    out = np.empty(len(values), dtype=np.int64)
    for i, v in enumerate(values):
        if isinstance(v, (int, np.integer)) and not isinstance(v, bool):
            if not 0 <= v < len(class_names):
                raise UnknownLabel(f"class index {v} outside {tuple(class_names)}")
            out[i] = v
        elif v in lookup:
            out[i] = lookup[v]
        else:
            raise UnknownLabel(f"label {v!r} not in {tuple(class_names)}")
    return out


def confusion(predictions: Sequence, labels: Sequence, class_names: Sequence) -> ConfusionMatrix:
    """Count (true, predicted) pairs. Entries may be class names or indices."""
    if len(predictions) != len(labels):
        raise LengthMismatch(f"{len(predictions)} predictions vs {len(labels)} labels")
    class_names = tuple(class_names)
    y_pred = _as_indices(predictions, class_names)
    y_true = _as_indices(labels, class_names)
    return ConfusionMatrix(kernels.confusion_counts(y_true, y_pred, len(class_names)), class_names)


def metrics(cm: ConfusionMatrix, model_id: str = "", dataset_id: str = "", label: str = "") -> MetricsReport:
    """Accuracy plus macro-averaged precision, recall and F1.

    A class with no predictions gets precision 0, one with no true samples
    gets recall 0, and either case is recorded in ``flags``.
    """
    counts = np.asarray(cm.counts, dtype=np.int64)
    total = int(counts.sum())
    if total == 0:
        raise EmptyMatrix("confusion matrix has no samples")
    flags, per_class = [], {}
    for i, name in enumerate(cm.class_names):
        tp = int(counts[i, i])
        predicted = int(counts[:, i].sum())
        actual = int(counts[i, :].sum())
        if predicted:
            p = tp / predicted
        else:
            p = 0.0
            flags.append(f"zero_division:precision:{name}")
        if actual:
            r = tp / actual
        else:
            r = 0.0
            flags.append(f"zero_division:recall:{name}")
        f = 2 * p * r / (p + r) if p + r > 0 else 0.0
        if not predicted and not actual:
            flags.append(f"absent_class:{name}")
        per_class[name] = {"precision": p, "recall": r, "f1": f, "support": actual}
    k = len(cm.class_names)
    return MetricsReport(
        precision=sum(v["precision"] for v in per_class.values()) / k,
        recall=sum(v["recall"] for v in per_class.values()) / k,
        f1=sum(v["f1"] for v in per_class.values()) / k,
        accuracy=int(np.trace(counts)) / total,
        confusion=cm,
        model_id=model_id,
        dataset_id=dataset_id,
        label=label,
        per_class=per_class,
        flags=flags,
    )


# -- rendering ------------------------------------------------------------

def fmt2(value: float) -> str:
    """Two-decimal rendering, half away from zero on the decimal repr."""
    return str(Decimal(repr(float(value))).quantize(Decimal("0.01"), rounding=ROUND_HALF_UP))


def _ordered(reports: Sequence[MetricsReport]) -> list:
    rank = {m: i for i, m in enumerate(ROW_ORDER)}
    indexed = list(enumerate(reports))
    indexed.sort(key=lambda p: (rank.get(p[1].model_id, len(ROW_ORDER)), p[0]))
    return [r for _, r in indexed]


def render_table(reports: Sequence[MetricsReport], layout: str = "body") -> tuple:
    """Render reports as (markdown text, csv text).

    Rows follow the canonical model order; the best-accuracy row is bolded,
    first listed on ties.
    """
    if not reports:
        raise ValueError("render_table needs at least one report")
    if layout not in LAYOUT_TITLES:
        raise ValueError(f"unknown layout {layout!r}")
    rows = _ordered(reports)
    best = max(range(len(rows)), key=lambda i: (rows[i].accuracy, -i))

    header = ["Model Type", "Pr", "Re", "F1", "Acc."]
    body = []
    for i, r in enumerate(rows):
        cells = [r.label or r.model_id, fmt2(r.precision), fmt2(r.recall), fmt2(r.f1), fmt2(r.accuracy)]
        if i == best:
            cells = [f"**{c}**" for c in cells]
        body.append(cells)
    widths = [max(len(row[j]) for row in [header, *body]) for j in range(len(header))]

    def line(cells):
        first = cells[0].ljust(widths[0])
        rest = [c.rjust(w) for c, w in zip(cells[1:], widths[1:])]
        return "| " + " | ".join([first, *rest]) + " |"

    rule = "|" + "|".join(
        ["-" * (widths[0] + 2)] + ["-" * (w + 1) + ":" for w in widths[1:]]
    ) + "|"
    text = "\n".join([LAYOUT_TITLES[layout], "", line(header), rule, *(line(c) for c in body)]) + "\n"

    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["model_id", "model_type", "precision", "recall", "f1", "accuracy", "best"])
    for i, r in enumerate(rows):
        writer.writerow([r.model_id, r.label or r.model_id, repr(r.precision), repr(r.recall),
                         repr(r.f1), repr(r.accuracy), int(i == best)])
    return text, buf.getvalue()


def render_curves(logs: Sequence, out_prefix) -> tuple:
    """Plot train/validation accuracy and loss against epoch.

    Writes ``<prefix>_accuracy.png``, ``<prefix>_loss.png`` and the plotted
    series as ``<prefix>_curves.csv``; returns the three paths.
    """
    logs = list(logs)
    if not logs:
        raise EmptyLog("render_curves needs at least one epoch log")
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    prefix = Path(out_prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    epochs = [log.epoch for log in logs]
    paths = []
    for kind, attr in (("accuracy", "acc"), ("loss", "loss")):
        fig, ax = plt.subplots(figsize=(5, 3.5), dpi=100)
        marker = "o" if len(logs) == 1 else None
        ax.plot(epochs, [getattr(log, f"train_{attr}") for log in logs], label="train", marker=marker)
        ax.plot(epochs, [getattr(log, f"val_{attr}") for log in logs], label="validation", marker=marker)
        ax.set_xlabel("epoch")
        ax.set_ylabel(kind)
        ax.legend()
        fig.tight_layout()
        path = prefix.with_name(f"{prefix.name}_{kind}.png")
        fig.savefig(path)
        plt.close(fig)
        paths.append(path)

    data_path = prefix.with_name(f"{prefix.name}_curves.csv")
    with open(data_path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["epoch", "train_loss", "train_acc", "val_loss", "val_acc"])
        for log in logs:
            writer.writerow([log.epoch, repr(log.train_loss), repr(log.train_acc),
                             repr(log.val_loss), repr(log.val_acc)])
    paths.append(data_path)
    return tuple(paths)


# -- reference metric rows ------------------------------------------------

_FACE_ROWS = (
    ("random_forest", "Random Forests (200 est.)", 0.75, 0.75, 0.75, 0.75),
    ("logistic_regression", "Logistic Regression", 0.70, 0.68, 0.68, 0.68),
    ("svm_linear", "SVM (Linear, C = 100)", 0.78, 0.78, 0.78, 0.78),
    ("svm_rbf", "SVM (RBF, C = 1000, γ = 0.01)", 0.80, 0.79, 0.79, 0.79),
)
_BODY_ROWS = (
    ("random_forest", "Random Forests (200 est.)", 0.59, 0.56, 0.54, 0.59),
    ("logistic_regression", "Logistic Regression", 0.68, 0.68, 0.68, 0.69),
    ("svm_linear", "SVM (Linear, C = 10)", 0.68, 0.68, 0.68, 0.68),
    ("svm_rbf", "SVM (RBF, C = 1000, γ = 0.01)", 0.70, 0.70, 0.71, 0.71),
    ("A", "VGGFace-A", 0.77, 0.70, 0.73, 0.72),
    ("B", "VGGFace-B", 0.53, 0.49, 0.51, 0.49),
    ("C", "VGGFace-C", 0.84, 0.76, 0.79, 0.79),
)


def reference_reports(layout: str) -> list:
    """Reference metric rows for the face or body layout."""
    rows = {"face": _FACE_ROWS, "body": _BODY_ROWS}[layout]
    return [
        MetricsReport(precision=p, recall=r, f1=f, accuracy=a, model_id=m,
                      dataset_id=f"reference-{layout}", label=lbl)
        for m, lbl, p, r, f, a in rows
    ]
