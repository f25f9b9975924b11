"""
Pixel- and target-level detection metrics.

IoU and Fa are global ratios over summed pixel counts; nIoU averages the
per-image IoU terms; Pd counts ground-truth components (8-connected) that
are detected by the prediction.
"""

import csv
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from hintu.engine import ops
from hintu.errors import ConfigError, DatasetError, ShapeError

_MOORE = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)]


def binarize(prob, threshold=0.5):
    return np.asarray(prob) >= threshold


@dataclass
class Component:
    label: int
    size: int
    bbox: tuple  # (row0, col0, row1, col1), inclusive
    centroid: tuple


@dataclass
class LabeledComponents:
    labels: np.ndarray
    components: list

    def __len__(self):
        return len(self.components)


def label_components_moore(mask):
    """8-connected labeling; labels are assigned in row-major first-seen order."""
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim != 2:
        raise ShapeError(f"mask must be 2-D, got shape {mask.shape}")
    h, w = mask.shape
    labels = np.zeros((h, w), dtype=np.int32)
    comps = []
    for r0, c0 in zip(*np.nonzero(mask)):
        if labels[r0, c0]:
            continue
        lab = len(comps) + 1
        labels[r0, c0] = lab
        queue = deque([(r0, c0)])
        pixels = []
        while queue:
            r, c = queue.popleft()
            pixels.append((r, c))
            for dr, dc in _MOORE:
                rr, cc = r + dr, c + dc
                if 0 <= rr < h and 0 <= cc < w and mask[rr, cc] and not labels[rr, cc]:
                    labels[rr, cc] = lab
                    queue.append((rr, cc))
        pts = np.array(pixels)
        comps.append(Component(
            lab, len(pixels),
            (int(pts[:, 0].min()), int(pts[:, 1].min()), int(pts[:, 0].max()), int(pts[:, 1].max())),
            (float(pts[:, 0].mean()), float(pts[:, 1].mean())),
        ))
    return LabeledComponents(labels, comps)


@dataclass
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    gp: int
    height: int
    width: int

    @property
    def pixels(self):
        return self.height * self.width

    @property
    def iou(self):
        """Per-image IoU term; 1 when there is nothing to find and nothing claimed."""
        denom = self.gp + self.fp
        return 1.0 if denom == 0 else self.tp / denom


def confusion_counts(pred, gt):
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    tp = int(np.count_nonzero(pred & gt))
    gp = int(np.count_nonzero(gt))
    fp = int(np.count_nonzero(pred)) - tp
    return ConfusionCounts(tp, fp, gp - tp, gp, gt.shape[0], gt.shape[1])


def match_targets(pred, gt, mode="overlap", distance=3.0):
    """Return ``(detected, total)`` ground-truth components.

    overlap: a component is detected when any predicted pixel lies inside it.
    centroid: when some predicted component's centroid is within ``distance``
    pixels of its centroid.
    """
    gt_lab = label_components_moore(gt)
    pred = np.asarray(pred, dtype=bool)
    if mode == "overlap":
        hit = np.unique(gt_lab.labels[pred & (gt_lab.labels > 0)])
        return len(hit), len(gt_lab)
    if mode == "centroid":
        pc = np.array([c.centroid for c in label_components_moore(pred).components]).reshape(-1, 2)
        detected = 0
        for comp in gt_lab.components:
            if len(pc) and np.min(np.hypot(*(pc - comp.centroid).T)) <= distance:
                detected += 1
        return detected, len(gt_lab)
    raise ConfigError(f"unknown Pd matching mode {mode!r}")


@dataclass
class ImageRow:
    image: str
    counts: ConfusionCounts
    detected: int
    total: int


@dataclass
class EvalReport:
    n: int
    iou: float
    niou: float
    fa: float
    pd: float
    rows: list = field(default_factory=list)

    def summary(self):
        return (f"images={self.n} IoU={self.iou:.4f} nIoU={self.niou:.4f} "
                f"Fa={self.fa * 1e6:.2f}e-6 Pd={self.pd:.4f}")


def aggregate_metrics(counts, matches, names=None):
    if not counts:
        raise DatasetError("cannot aggregate metrics over zero images")
    if len(matches) != len(counts):
        raise ShapeError("counts and matches must have equal length")
    tp = sum(c.tp for c in counts)
    denom = sum(c.gp + c.fp for c in counts)
    iou = tp / denom if denom else 1.0
    niou = float(np.mean([c.iou for c in counts]))
    fa = sum(c.fp for c in counts) / sum(c.pixels for c in counts)
    det = sum(m[0] for m in matches)
    tot = sum(m[1] for m in matches)
    pd = det / tot if tot else 1.0
    names = names or [str(i) for i in range(len(counts))]
    rows = [ImageRow(nm, c, m[0], m[1]) for nm, c, m in zip(names, counts, matches)]
    return EvalReport(len(counts), iou, niou, fa, pd, rows)


def predict_native(model, dataset, resolution=None, batch_size=8):
    """Probability maps at each sample's native size.

    Images are resized to ``resolution`` for inference (skipped when None or
    already that size) and predictions are resized back bilinearly.
    """
    out = []
    for start in range(0, len(dataset), batch_size):
        chunk = dataset[start : start + batch_size]
        groups = {}
        for j, s in enumerate(chunk):
            img = s.image.astype(np.float32)
            if resolution and img.shape[2:] != (resolution, resolution):
                img, _ = ops.resize_bilinear_forward(img, resolution, resolution)
            groups.setdefault(img.shape, []).append((j, img))
        probs = [None] * len(chunk)
        for items in groups.values():
            batch = np.concatenate([img for _, img in items], axis=0)
            pred = np.asarray(model(batch), dtype=np.float32)
            for (j, _), p in zip(items, pred):
                s = chunk[j]
                h, w = s.mask.shape
                p = p[None]
                if p.shape[2:] != (h, w):
                    p, _ = ops.resize_bilinear_forward(p, h, w)
                probs[j] = p[0, 0]
        out.extend(probs)
    return out


def evaluate_probs(probs, dataset, threshold=0.5, pd_mode="overlap", pd_distance=3.0):
    counts, matches = [], []
    for p, s in zip(probs, dataset):
        pred = binarize(p, threshold)
        counts.append(confusion_counts(pred, s.mask))
        matches.append(match_targets(pred, s.mask, pd_mode, pd_distance))
    return aggregate_metrics(counts, matches, [s.source for s in dataset])


def evaluate_dataset(model, dataset, threshold=0.5, resolution=None, pd_mode="overlap", pd_distance=3.0):
    """Run ``model`` (any callable mapping an image batch to probabilities) over a dataset."""
    if not dataset:
        raise DatasetError("evaluation dataset is empty")
    return evaluate_probs(predict_native(model, dataset, resolution), dataset, threshold, pd_mode, pd_distance)


@dataclass
class CurvePoint:
    threshold: float
    pd: float
    fa: float
    tp: int
    fp: int


def pd_fa_curve(model, dataset, thresholds, resolution=None, pd_mode="overlap", pd_distance=3.0, probs=None):
    thresholds = [float(t) for t in thresholds]
    if not thresholds:
        raise ConfigError("pd_fa_curve needs at least one threshold")
    if any(b < a for a, b in zip(thresholds, thresholds[1:])):
        raise ConfigError("thresholds must be sorted ascending")
    if not dataset:
        raise DatasetError("curve dataset is empty")
    if probs is None:
        probs = predict_native(model, dataset, resolution)
    points = []
    for t in thresholds:
        rep = evaluate_probs(probs, dataset, t, pd_mode, pd_distance)
        points.append(CurvePoint(t, rep.pd, rep.fa,
                                 sum(r.counts.tp for r in rep.rows), sum(r.counts.fp for r in rep.rows)))
    return points


REPORT_HEADER = ["image", "tp", "fp", "fn", "gp", "iou_i", "detected", "total"]


def write_report_csv(path, report):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_HEADER)
        for r in report.rows:
            c = r.counts
            w.writerow([r.image, c.tp, c.fp, c.fn, c.gp, repr(c.iou), r.detected, r.total])
        w.writerow([])
        w.writerow(["# summary", f"IoU={report.iou!r}", f"nIoU={report.niou!r}",
                    f"Fa_x1e-6={report.fa * 1e6!r}", f"Pd={report.pd!r}"])


def write_curve_csv(path, points):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["threshold", "pd", "fa_x1e-6", "tp", "fp"])
        for p in points:
            w.writerow([repr(p.threshold), repr(p.pd), repr(p.fa * 1e6), p.tp, p.fp])
