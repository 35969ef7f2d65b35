"""Whole-cloud inference (subsample -> classify -> nearest-neighbor upsample) and metrics."""
from __future__ import annotations

import csv
import io
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .cloud import LabeledCloud
from .network import Network, ParameterStore
from .spatial import build_index, grid_subsample, transfer_labels
from .voxel import GridSpec, rasterize


def representative_grids(cloud: LabeledCloud, centers_idx: np.ndarray, index, grid_n: int,
                         deltas: Sequence[float]) -> np.ndarray:
    """(len(centers_idx), K, n, n, n) occupancy stack; neighborhoods searched in `cloud`."""
    specs = [GridSpec(grid_n, d) for d in deltas]
    centers = cloud.points[centers_idx]
    hits = index.box_query_many(centers, specs[-1].half_extent)
    out = np.zeros((len(centers), len(specs), grid_n, grid_n, grid_n), dtype=np.float32)
    for i, (c, idx) in enumerate(zip(centers, hits)):
        near = cloud.points[idx] - c
        for k, s in enumerate(specs):
            rasterize(near, s, out=out[i, k])
    return out


def classify_cloud(net: Network, store: ParameterStore, cloud: LabeledCloud, cell: float,
                   batch_size: int = 64, workers: int = 1, n_classes: int | None = None) -> np.ndarray:
    """Predicted class for every point of `cloud`."""
    if len(cloud) == 0:
        raise ValueError("cannot classify an empty cloud")
    if n_classes is not None and n_classes != net.spec.n_classes:
        raise ValueError(f"model predicts {net.spec.n_classes} classes, expected {n_classes}")
    sub = grid_subsample(cloud, cell)
    rep = sub.cloud
    index = build_index(rep)
    starts = range(0, len(rep), batch_size)

    def run(b0):
        idx = np.arange(b0, min(b0 + batch_size, len(rep)))
        x = representative_grids(rep, idx, index, net.spec.grid_n, net.spec.deltas)
        return net.forward(x, store, train=False, keep_cache=False).argmax(axis=1)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(run, starts))
    else:
        parts = [run(b0) for b0 in starts]
    rep_labels = np.concatenate(parts).astype(np.int64)
    return transfer_labels(cloud, sub, rep_labels, index)


@dataclass(frozen=True)
class ConfusionMatrix:
    """Rows are ground truth, columns are predictions."""

    counts: np.ndarray

    @property
    def n_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def tp(self):
        return np.diag(self.counts).astype(np.float64)

    def fp(self):
        return self.counts.sum(axis=0) - self.tp()

    def fn(self):
        return self.counts.sum(axis=1) - self.tp()

    def tn(self):
        return self.total - self.tp() - self.fp() - self.fn()


def confusion(pred, gt, n_classes: int) -> ConfusionMatrix:
    pred = np.asarray(pred, dtype=np.int64).reshape(-1)
    gt = np.asarray(gt, dtype=np.int64).reshape(-1)
    if pred.shape != gt.shape:
        raise ValueError(f"{len(pred)} predictions for {len(gt)} ground-truth labels")
    for name, v in (("prediction", pred), ("ground truth", gt)):
        if len(v) and (v.min() < 0 or v.max() >= n_classes):
            raise ValueError(f"{name} labels outside [0, {n_classes})")
    counts = np.bincount(gt * n_classes + pred, minlength=n_classes * n_classes)
    return ConfusionMatrix(counts.reshape(n_classes, n_classes))


@dataclass
class ClassMetrics:
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    accuracy: np.ndarray
    iou: np.ndarray
    present: np.ndarray  # classes that occur in the ground truth
    mean_iou: float
    mean_f1: float
    overall_accuracy: float
    # (class, metric) pairs whose denominator was zero and were set to 0
    undefined: list[tuple[int, str]] = field(default_factory=list)


def _ratio(num, den, name, undefined):
    out = np.zeros_like(num, dtype=np.float64)
    ok = den > 0
    out[ok] = num[ok] / den[ok]
    undefined.extend((int(c), name) for c in np.flatnonzero(~ok))
    return out


def metrics(cm: ConfusionMatrix) -> ClassMetrics:
    if cm.total == 0:
        raise ValueError("confusion matrix is empty")
    tp, fp, fn = cm.tp(), cm.fp(), cm.fn()
    undefined: list[tuple[int, str]] = []
    precision = _ratio(tp, tp + fp, "precision", undefined)
    recall = _ratio(tp, tp + fn, "recall", undefined)
    f1 = _ratio(2 * tp, 2 * tp + fp + fn, "f1", undefined)
    # per-class accuracy as conventionally printed for this benchmark: TP / (TP + FN)
    accuracy = _ratio(tp, tp + fn, "accuracy", undefined)
    iou = _ratio(tp, tp + fp + fn, "iou", undefined)
    present = np.flatnonzero(cm.counts.sum(axis=1) > 0)
    return ClassMetrics(precision, recall, f1, accuracy, iou, present,
                        float(iou[present].mean()), float(f1[present].mean()),
                        float(tp.sum() / cm.total), undefined)


def _names(n: int, class_names: Mapping[int, str] | Sequence[str] | None) -> list[str]:
    if class_names is None:
        return [f"class_{i}" for i in range(n)]
    if isinstance(class_names, Mapping):
        return [class_names.get(i, f"class_{i}") for i in range(n)]
    return list(class_names)


def report_table(m: ClassMetrics, class_names=None) -> str:
    """Aligned per-class table, values in percent with two decimals."""
    names = _names(len(m.iou), class_names)
    w = max([len(s) for s in names] + [5])
    head = f"{'class':<{w}}  {'P':>7}  {'R':>7}  {'F1':>7}  {'IoU':>7}"
    lines = [head, "-" * len(head)]
    for c in range(len(m.iou)):
        lines.append(f"{names[c]:<{w}}  {100 * m.precision[c]:6.2f}%  {100 * m.recall[c]:6.2f}%  "
                     f"{100 * m.f1[c]:6.2f}%  {100 * m.iou[c]:6.2f}%")
    lines.append("-" * len(head))
    lines.append(f"Averaged IoU      {100 * m.mean_iou:6.2f}%")
    lines.append(f"Mean F1           {100 * m.mean_f1:6.2f}%")
    lines.append(f"Overall Accuracy  {100 * m.overall_accuracy:6.2f}%")
    return "\n".join(lines)


def report_csv(m: ClassMetrics, class_names=None) -> str:
    names = _names(len(m.iou), class_names)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["class", "precision", "recall", "f1", "accuracy", "iou"])
    for c in range(len(m.iou)):
        w.writerow([names[c], repr(float(m.precision[c])), repr(float(m.recall[c])),
                    repr(float(m.f1[c])), repr(float(m.accuracy[c])), repr(float(m.iou[c]))])
    w.writerow(["mean_iou", "", "", "", "", repr(m.mean_iou)])
    w.writerow(["mean_f1", "", "", repr(m.mean_f1), "", ""])
    w.writerow(["overall_accuracy", "", "", "", repr(m.overall_accuracy), ""])
    return buf.getvalue()
