"""Confusion matrices and the accuracy statistics reported for land-cover maps.

Rows of a confusion matrix are ground-truth classes, columns are predictions.
Class ``k`` (1-based label id) lives at index ``k - 1``. Pixels whose truth is 0
are not evaluated.

Classes absent from both truth and prediction are left out of every class mean.
A class absent from truth but predicted somewhere has an undefined recall, so it
is left out of AA; its IoU and F1 are 0 and count towards mIoU and mF1.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .data import LabelMap
from .exceptions import DataError, DimensionError


class EmptyEvaluationError(DataError):
    pass


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # (C, C) int64

    @property
    def n(self):
        return int(self.counts.sum())

    @property
    def n_classes(self):
        return self.counts.shape[0]

    @property
    def rows(self):
        return self.counts.sum(axis=1)

    @property
    def cols(self):
        return self.counts.sum(axis=0)

    @property
    def diag(self):
        return np.diag(self.counts)


def confusion(pred, truth, n_classes=None) -> ConfusionMatrix:
    p = pred.labels if isinstance(pred, LabelMap) else np.asarray(pred)
    t = truth.labels if isinstance(truth, LabelMap) else np.asarray(truth)
    if p.shape != t.shape:
        raise DimensionError(f"prediction {p.shape} and truth {t.shape} differ in shape")
    if n_classes is None:
        n_classes = max(
            getattr(truth, "n_classes", 0), getattr(pred, "n_classes", 0),
            int(t.max(initial=0)), int(p.max(initial=0)))
    mask = t != 0
    tv, pv = t[mask].astype(np.int64), p[mask].astype(np.int64)
    if pv.size and pv.min() < 1:
        raise DataError("prediction leaves an evaluated pixel unlabeled")
    if pv.size and max(pv.max(), tv.max()) > n_classes:
        raise DataError(f"class id exceeds n_classes={n_classes}")
    counts = np.bincount((tv - 1) * n_classes + (pv - 1), minlength=n_classes * n_classes)
    return ConfusionMatrix(counts.reshape(n_classes, n_classes).astype(np.int64))


def _as_counts(m):
    counts = m.counts if isinstance(m, ConfusionMatrix) else np.asarray(m)
    counts = counts.astype(np.float64)
    if counts.sum() <= 0:
        raise EmptyEvaluationError("no evaluated pixels")
    return counts


def per_class_accuracy(m):
    """Recall per class; NaN where the class never occurs in truth."""
    c = _as_counts(m)
    rows = c.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(rows > 0, np.diag(c) / rows, np.nan)


def oa(m):
    c = _as_counts(m)
    return float(np.trace(c) / c.sum())


def aa(m):
    rec = per_class_accuracy(m)
    return float(np.nanmean(rec))


def kappa(m):
    c = _as_counts(m)
    n = c.sum()
    po = np.trace(c) / n
    pe = float((c.sum(axis=1) * c.sum(axis=0)).sum() / n**2)
    if pe == 1.0:
        return 1.0 if po == 1.0 else 0.0
    return float((po - pe) / (1 - pe))


def _present(c):
    return (c.sum(axis=1) + c.sum(axis=0)) > 0


def per_class_iou(m):
    c = _as_counts(m)
    d = np.diag(c)
    denom = c.sum(axis=1) + c.sum(axis=0) - d
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(_present(c), d / denom, np.nan)


def per_class_f1(m):
    c = _as_counts(m)
    d = np.diag(c)
    denom = c.sum(axis=1) + c.sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(_present(c), 2 * d / denom, np.nan)


def mean_iou(m):
    return float(np.nanmean(per_class_iou(m)))


def mean_f1(m):
    return float(np.nanmean(per_class_f1(m)))


def evaluate(pred, truth, n_classes=None):
    """All statistics for one prediction as a plain dict."""
    m = confusion(pred, truth, n_classes)
    return {
        "per_class": per_class_accuracy(m),
        "oa": oa(m),
        "aa": aa(m),
        "kappa": kappa(m),
        "miou": mean_iou(m),
        "mf1": mean_f1(m),
        "n": m.n,
    }


# -- result tables -------------------------------------------------------------

SUMMARY_ROWS = (
    ("Overall Accuracy (%)", "oa", True),
    ("AA (%)", "aa", True),
    ("Kappa Coefficient", "kappa", False),
    ("Mean IoU", "miou", False),
    ("Mean F1 Score", "mf1", False),
)


def table_rows(columns, class_names=None):
    """Rows of a results table: one per class, then OA, AA, kappa, mIoU, mF1.

    ``columns`` is a list of ``(header, result_dict)``. Percentages carry two
    decimals, ratios four, as in the usual published layout.
    """
    n_classes = max(len(r["per_class"]) for _, r in columns) if columns else 0
    names = list(class_names or [f"Class {k}" for k in range(1, n_classes + 1)])
    header = ["Class"] + [h for h, _ in columns]
    rows = [header]
    for k in range(n_classes):
        row = [names[k]]
        for _, r in columns:
            v = r["per_class"][k] if k < len(r["per_class"]) else np.nan
            row.append("-" if not np.isfinite(v) else f"{100 * v:.2f}")
        rows.append(row)
    for label, key, pct in SUMMARY_ROWS:
        row = [label]
        for _, r in columns:
            v = r.get(key, np.nan)
            if v is None or not np.isfinite(v):
                row.append("-")
            else:
                row.append(f"{100 * v:.2f}" if pct else f"{v:.4f}")
        rows.append(row)
    return rows


def format_table(columns, class_names=None):
    rows = table_rows(columns, class_names)
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    lines = []
    for j, r in enumerate(rows):
        cells = [r[0].ljust(widths[0])] + [c.rjust(w) for c, w in zip(r[1:], widths[1:])]
        lines.append("  ".join(cells).rstrip())
        if j == 0 or j == len(rows) - len(SUMMARY_ROWS) - 1:
            lines.append("-" * len(lines[0]))
    return "\n".join(lines) + "\n"


def table_csv(columns, class_names=None):
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(table_rows(columns, class_names))
    return buf.getvalue()
