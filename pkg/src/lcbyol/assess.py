"""Thematic accuracy assessment: confusion matrices and map accuracy metrics.

Rows of a confusion matrix are true labels, columns predictions; class codes
1..C map to index 0..C-1 and code 0 is nodata.
"""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .synth import LEGEND

OA_NOTE = ("overall accuracy = trace / total; the TP/(TP+FP+FN) form is ambiguous for "
           "multiclass aggregation and is not used")

# Reference confusion matrix of an 8-class statewide map, 25,000 assessment points.
REFERENCE_COUNTS = np.array([
    [511, 1, 0, 10, 11, 18, 0, 21],
    [0, 80, 15, 3, 3, 5, 0, 0],
    [1, 5, 183, 17, 1, 22, 0, 1],
    [6, 4, 68, 944, 22, 451, 144, 5],
    [1, 2, 2, 6, 14712, 366, 6, 22],
    [7, 2, 20, 138, 376, 3699, 492, 17],
    [0, 0, 0, 17, 2, 38, 1243, 1],
    [2, 11, 6, 7, 753, 86, 1, 413],
], dtype=np.int64)


@dataclass
class ConfusionMatrix:
    counts: np.ndarray
    legend: list = field(default_factory=lambda: [LEGEND[i] for i in range(1, 9)])

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        c = self.counts.shape
        if len(c) != 2 or c[0] != c[1]:
            raise ValueError(f"confusion matrix must be square, got {c}")
        if (self.counts < 0).any():
            raise ValueError("confusion counts must be non-negative")
        if len(self.legend) != c[0]:
            self.legend = [f"class {i}" for i in range(1, c[0] + 1)]

    @property
    def n_classes(self):
        return self.counts.shape[0]

    @property
    def total(self):
        return int(self.counts.sum())

    @classmethod
    def empty(cls, n_classes=8):
        return cls(np.zeros((n_classes, n_classes), dtype=np.int64))

    @classmethod
    def from_labels(cls, truth, pred, n_classes=8):
        """Count (truth, pred) pairs of class codes 1..n; truth code 0 is ignored."""
        t = np.asarray(truth).ravel().astype(np.int64)
        p = np.asarray(pred).ravel().astype(np.int64)
        keep = t > 0
        t, p = t[keep] - 1, p[keep] - 1
        if ((p < 0) | (p >= n_classes)).any() or (t >= n_classes).any():
            raise ValueError("labels outside 1..n_classes")
        counts = np.bincount(t * n_classes + p, minlength=n_classes * n_classes)
        return cls(counts.reshape(n_classes, n_classes))

    def __add__(self, other):
        return ConfusionMatrix(self.counts + other.counts, self.legend)


def overall_accuracy(cm: ConfusionMatrix) -> float:
    if cm.total <= 0:
        raise ValueError("empty confusion matrix")
    return float(np.trace(cm.counts) / cm.total)


def producers_accuracy(cm: ConfusionMatrix):
    """Per-class recall; NaN for classes absent from the truth."""
    rows = cm.counts.sum(1)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(rows > 0, np.diag(cm.counts) / rows, np.nan)


def users_accuracy(cm: ConfusionMatrix):
    """Per-class precision; NaN for classes never predicted."""
    cols = cm.counts.sum(0)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(cols > 0, np.diag(cm.counts) / cols, np.nan)


def per_class_f1(cm: ConfusionMatrix):
    tp = np.diag(cm.counts).astype(np.float64)
    denom = 2 * tp + (cm.counts.sum(0) - tp) + (cm.counts.sum(1) - tp)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(denom > 0, 2 * tp / denom, 0.0)


@dataclass
class MetricsReport:
    overall_accuracy: float
    producers_accuracy: list
    users_accuracy: list
    f1: list
    macro_f1: float
    mean_producers_accuracy: float
    mean_users_accuracy: float
    legend: list
    total: int
    note: str = OA_NOTE

    def to_dict(self):
        def clean(v):
            return None if isinstance(v, float) and math.isnan(v) else v
        return {
            "overall_accuracy": self.overall_accuracy,
            "producers_accuracy": [clean(float(v)) for v in self.producers_accuracy],
            "users_accuracy": [clean(float(v)) for v in self.users_accuracy],
            "f1": [float(v) for v in self.f1],
            "macro_f1": self.macro_f1,
            "mean_producers_accuracy": clean(self.mean_producers_accuracy),
            "mean_users_accuracy": clean(self.mean_users_accuracy),
            "legend": self.legend,
            "total": self.total,
            "note": self.note,
        }


def report(cm: ConfusionMatrix) -> MetricsReport:
    from .finetune import macro_f1

    pa, ua = producers_accuracy(cm), users_accuracy(cm)
    if np.isnan(pa).any():
        warnings.warn("classes absent from the truth: producer's accuracy reported as n/a")
    return MetricsReport(
        overall_accuracy(cm), pa.tolist(), ua.tolist(), per_class_f1(cm).tolist(), macro_f1(cm),
        float(np.nanmean(pa)) if not np.isnan(pa).all() else math.nan,
        float(np.nanmean(ua)) if not np.isnan(ua).all() else math.nan,
        list(cm.legend), cm.total)


def _pct(v):
    return "n/a" if v is None or (isinstance(v, float) and math.isnan(v)) else f"{100 * v:.2f}%"


def format_table(cm: ConfusionMatrix, rep: MetricsReport | None = None) -> str:
    """Confusion matrix with PA column, UA row and a per-class F1 line."""
    rep = rep or report(cm)
    names = [n[:14] for n in cm.legend]
    w = max(10, max(len(n) for n in names) + 1)
    lines = [f"{'true/pred':<{w}}" + "".join(f"{n:>{w}}" for n in names) + f"{'PA':>{w}}"]
    for i, name in enumerate(names):
        row = "".join(f"{v:>{w}d}" for v in cm.counts[i])
        lines.append(f"{name:<{w}}{row}{_pct(rep.producers_accuracy[i]):>{w}}")
    lines.append(f"{'UA':<{w}}" + "".join(f"{_pct(v):>{w}}" for v in rep.users_accuracy)
                 + f"{'OA ' + _pct(rep.overall_accuracy):>{w}}")
    lines.append(f"{'F1':<{w}}" + "".join(f"{_pct(v):>{w}}" for v in rep.f1))
    lines.append("")
    lines.append(f"macro F1 {_pct(rep.macro_f1)}  mean PA {_pct(rep.mean_producers_accuracy)}  "
                 f"mean UA {_pct(rep.mean_users_accuracy)}  points {rep.total}")
    lines.append(f"note: {rep.note}")
    return "\n".join(lines)


def write_assessment(path_dir, cm: ConfusionMatrix, extra=None):
    out = Path(path_dir)
    out.mkdir(parents=True, exist_ok=True)
    rep = report(cm)
    doc = {"confusion_matrix": cm.counts.tolist(), "metrics": rep.to_dict(), **(extra or {})}
    (out / "assessment.json").write_text(json.dumps(doc, indent=2, sort_keys=True))
    (out / "assessment.txt").write_text(format_table(cm, rep) + "\n")
    return rep


def load_matrix(path) -> ConfusionMatrix:
    """Counts from a JSON file (list of rows, or {"confusion_matrix": ...}) or CSV/whitespace text."""
    text = Path(path).read_text()
    try:
        doc = json.loads(text)
        counts = doc["confusion_matrix"] if isinstance(doc, dict) else doc
    except json.JSONDecodeError:
        counts = [[int(v) for v in line.replace(",", " ").split()] for line in text.splitlines() if line.strip()]
    return ConfusionMatrix(np.array(counts, dtype=np.int64))


# ---------------------------------------------------------------- point evaluation


def extract_centered(image, row, col, patch):
    """Window of ``image`` (C, H, W) whose pixel (patch/2, patch/2) sits at (row, col).

    Parts beyond the raster are filled by symmetric reflection.
    """
    _, h, w = image.shape
    half = patch // 2
    y0, x0 = row - half, col - half
    pad = ((0, 0), (max(0, -y0), max(0, y0 + patch - h)), (max(0, -x0), max(0, x0 + patch - w)))
    if any(p for pair in pad[1:] for p in pair):
        padded = np.pad(image, pad, mode="symmetric")
        y0 += pad[1][0]
        x0 += pad[2][0]
        return padded[:, y0:y0 + patch, x0:x0 + patch]
    return image[:, y0:y0 + patch, x0:x0 + patch]


def evaluate_points(points, labels, class_raster=None, model=None, image=None, patch=256,
                    n_classes=8, batch=64):
    """Confusion matrix of point labels against a class raster or a model.

    Raster mode reads the class at each point.  Model mode runs ``model`` (a
    callable returning N x C x P x P probabilities) on a window centred on each
    point and reads the centre pixel.  Returns (matrix, skipped point indices).
    """
    if (class_raster is None) == (model is None):
        raise ValueError("give exactly one of class_raster or model")
    shape = class_raster.shape if class_raster is not None else image.shape[-2:]
    keep, skipped = [], []
    for i, (r, c) in enumerate(points):
        (keep if 0 <= r < shape[0] and 0 <= c < shape[1] else skipped).append(i)
    truth = np.array([labels[i] for i in keep], dtype=np.int64)
    if class_raster is not None:
        pred = np.array([class_raster[points[i][0], points[i][1]] for i in keep], dtype=np.int64)
    else:
        img = image.astype(np.float32) / 255.0 if image.dtype == np.uint8 else image
        pred = []
        half = patch // 2
        with torch.no_grad():
            for s in range(0, len(keep), batch):
                idx = keep[s:s + batch]
                wins = np.stack([extract_centered(img, *points[i], patch) for i in idx])
                probs = model(torch.from_numpy(np.ascontiguousarray(wins)))
                pred.extend((probs[:, :, half, half].argmax(1) + 1).tolist())
        pred = np.array(pred, dtype=np.int64)
    if skipped:
        warnings.warn(f"{len(skipped)} points fall outside the raster and were skipped")
    cm = ConfusionMatrix.from_labels(truth, pred, n_classes) if len(keep) else ConfusionMatrix.empty(n_classes)
    return cm, skipped


def evaluate_patches(model, images_u8, labels, n_classes=8, batch=16):
    """Dense confusion matrix of a probability model over whole labeled patches."""
    cm = ConfusionMatrix.empty(n_classes)
    with torch.no_grad():
        for s in range(0, len(images_u8), batch):
            x = torch.from_numpy(images_u8[s:s + batch].astype(np.float32) / 255.0)
            pred = (model(x).argmax(1) + 1).numpy()
            cm = cm + ConfusionMatrix.from_labels(labels[s:s + batch], pred, n_classes)
    return cm
