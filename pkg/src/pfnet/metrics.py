"""Segmentation quality: per-class IoU/F1 from a confusion matrix,
contour F1 at pixel tolerances via an exact distance transform, and the
foreground-sampled-point-ratio diagnostic.

Confusion matrices and boundary match counts are mergeable, so metrics
computed streaming over crops equal the same metrics on pooled counts.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import distance_transform_edt

IGNORE_LABEL = 255

# contour tolerances in pixels; desk-scale counterparts of the full-scale
# {12, 9, 5, 3} set, floored at 1 px
FULL_SCALE_THRESHOLDS = (12, 9, 5, 3)
DESK_THRESHOLDS = (3, 2, 1, 1)


class ConfusionMatrix:
    """K x K counts; rows are ground truth, columns prediction."""

    def __init__(self, num_classes):
        if num_classes < 2:
            raise ValueError("need at least 2 classes")
        self.num_classes = num_classes
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)

    def update(self, gt, pred, ignore_label=IGNORE_LABEL):
        gt = np.asarray(gt).ravel()
        pred = np.asarray(pred).ravel()
        if gt.shape != pred.shape:
            raise ValueError("ground truth and prediction sizes differ")
        valid = gt != ignore_label
        gt = gt[valid].astype(np.int64)
        pred = pred[valid].astype(np.int64)
        if gt.size and (gt.max() >= self.num_classes or pred.max() >= self.num_classes):
            raise ValueError("label outside class range")
        k = self.num_classes
        self.counts += np.bincount(gt * k + pred, minlength=k * k).reshape(k, k)
        return self

    def merge(self, other):
        if other.num_classes != self.num_classes:
            raise ValueError("class counts differ")
        self.counts += other.counts
        return self

    @property
    def total(self):
        return int(self.counts.sum())


@dataclass
class ClasswiseResult:
    per_class: np.ndarray  # NaN where the class was excluded
    mean: float
    excluded: int


def miou(cm):
    """Per-class IoU = tp / (tp + fp + fn); zero-union classes excluded."""
    if cm.total == 0:
        raise ValueError("empty confusion matrix")
    tp = np.diag(cm.counts).astype(np.float64)
    fp = cm.counts.sum(axis=0) - tp
    fn = cm.counts.sum(axis=1) - tp
    union = tp + fp + fn
    per_class = np.full(cm.num_classes, np.nan)
    present = union > 0
    per_class[present] = tp[present] / union[present]
    excluded = int((~present).sum())
    return ClasswiseResult(per_class, float(per_class[present].mean()), excluded)


def class_f1(cm):
    """Per-class F1 = 2tp / (2tp + fp + fn) over classes present."""
    if cm.total == 0:
        raise ValueError("empty confusion matrix")
    tp = np.diag(cm.counts).astype(np.float64)
    fp = cm.counts.sum(axis=0) - tp
    fn = cm.counts.sum(axis=1) - tp
    denom = 2 * tp + fp + fn
    per_class = np.full(cm.num_classes, np.nan)
    present = denom > 0
    per_class[present] = 2 * tp[present] / denom[present]
    excluded = int((~present).sum())
    return ClasswiseResult(per_class, float(per_class[present].mean()), excluded)


# ---------------------------------------------------------------------------
# boundaries


def label_boundaries(mask):
    """Pixels whose label differs from any 4-neighbor (both sides marked)."""
    mask = np.asarray(mask)
    if mask.size == 0:
        raise ValueError("empty mask")
    b = np.zeros(mask.shape, dtype=bool)
    diff_v = mask[:-1, :] != mask[1:, :]
    b[:-1, :] |= diff_v
    b[1:, :] |= diff_v
    diff_h = mask[:, :-1] != mask[:, 1:]
    b[:, :-1] |= diff_h
    b[:, 1:] |= diff_h
    return b


def boundary_pixel_set(mask):
    """Contour pixels for the F-measure: label change against the right or
    down neighbor, one pixel per crossing.

    Marking a single side keeps the set distance equal to the contour
    displacement (a 2 px shift yields sets 2 px apart), which is what the
    pixel-tolerance thresholds measure.
    """
    mask = np.asarray(mask)
    if mask.size == 0:
        raise ValueError("empty mask")
    b = np.zeros(mask.shape, dtype=bool)
    b[:-1, :] |= mask[:-1, :] != mask[1:, :]
    b[:, :-1] |= mask[:, :-1] != mask[:, 1:]
    return b


def boundary_match_counts(pred_mask, gt_mask, threshold):
    """Matched/total boundary-pixel counts under a Euclidean tolerance.

    Returns (pred_matched, pred_total, gt_matched, gt_total); counts merge
    additively across crops.
    """
    if pred_mask.shape != gt_mask.shape:
        raise ValueError("mask shapes differ")
    if threshold < 1:
        raise ValueError("threshold must be >= 1 pixel")
    pred_b = boundary_pixel_set(pred_mask)
    gt_b = boundary_pixel_set(gt_mask)
    pred_total = int(pred_b.sum())
    gt_total = int(gt_b.sum())
    pred_matched = gt_matched = 0
    if pred_total and gt_total:
        dist_to_gt = distance_transform_edt(~gt_b)
        pred_matched = int((dist_to_gt[pred_b] <= threshold).sum())
        dist_to_pred = distance_transform_edt(~pred_b)
        gt_matched = int((dist_to_pred[gt_b] <= threshold).sum())
    return pred_matched, pred_total, gt_matched, gt_total


def _f_measure(pred_matched, pred_total, gt_matched, gt_total):
    if pred_total == 0 and gt_total == 0:
        return 1.0  # vacuous agreement
    if pred_total == 0 or gt_total == 0:
        return 0.0
    precision = pred_matched / pred_total
    recall = gt_matched / gt_total
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def boundary_f1(pred_mask, gt_mask, threshold):
    return _f_measure(*boundary_match_counts(pred_mask, gt_mask, threshold))


@dataclass
class BoundaryStats:
    """Streaming boundary-match counts per threshold (a mergeable monoid)."""

    thresholds: tuple
    counts: dict = field(default_factory=dict)

    def __post_init__(self):
        for t in self.thresholds:
            self.counts.setdefault(t, np.zeros(4, dtype=np.int64))

    def update(self, pred_mask, gt_mask):
        for t in self.thresholds:
            self.counts[t] += np.array(boundary_match_counts(pred_mask, gt_mask, t))
        return self

    def merge(self, other):
        for t in self.thresholds:
            self.counts[t] += other.counts[t]
        return self

    def f1(self, threshold):
        return _f_measure(*self.counts[threshold])


# ---------------------------------------------------------------------------
# sampled-point diagnostics


def fg_sample_ratio(point_sets, gt_mask):
    """Fraction of unique sampled points that land on foreground pixels.

    Points from every module are mapped to full-resolution cells and
    de-duplicated by cell before counting.
    """
    h, w = gt_mask.shape
    cells = []
    for pts in point_sets:
        pts = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
        if pts.shape[0] == 0:
            continue
        rows = np.clip(np.floor(pts[:, 0] * h), 0, h - 1).astype(np.int64)
        cols = np.clip(np.floor(pts[:, 1] * w), 0, w - 1).astype(np.int64)
        cells.append(rows * w + cols)
    if not cells:
        raise ValueError("empty point set")
    unique = np.unique(np.concatenate(cells))
    fg = np.asarray(gt_mask).ravel()[unique] > 0
    return float(fg.sum()) / unique.size


def fg_point_counts(point_sets, gt_mask):
    """(foreground hits, unique points) for streaming aggregation."""
    h, w = gt_mask.shape
    cells = []
    for pts in point_sets:
        pts = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
        if pts.shape[0] == 0:
            continue
        rows = np.clip(np.floor(pts[:, 0] * h), 0, h - 1).astype(np.int64)
        cols = np.clip(np.floor(pts[:, 1] * w), 0, w - 1).astype(np.int64)
        cells.append(rows * w + cols)
    if not cells:
        return 0, 0
    unique = np.unique(np.concatenate(cells))
    fg = np.asarray(gt_mask).ravel()[unique] > 0
    return int(fg.sum()), int(unique.size)


# ---------------------------------------------------------------------------
# reports


def report_rows(iou_result, f1_result, boundary_stats=None, extras=None):
    """Flat (key, value) rows shared by the CSV and text reports."""
    rows = []
    for k in range(len(iou_result.per_class)):
        rows.append((f"class{k}_iou", iou_result.per_class[k]))
        rows.append((f"class{k}_f1", f1_result.per_class[k]))
    rows.append(("miou", iou_result.mean))
    rows.append(("mean_f1", f1_result.mean))
    rows.append(("excluded_classes", iou_result.excluded))
    if boundary_stats is not None:
        for t in boundary_stats.thresholds:
            rows.append((f"boundary_f1_{t}px", boundary_stats.f1(t)))
    for key, value in (extras or {}).items():
        rows.append((key, value))
    return rows


def write_report_csv(rows, path):
    with open(path, "w") as f:
        f.write("metric,value\n")
        for key, value in rows:
            f.write(f"{key},{_fmt(value)}\n")


def write_report_text(rows, path):
    width = max(len(k) for k, _ in rows)
    with open(path, "w") as f:
        for key, value in rows:
            f.write(f"{key.ljust(width)}  {_fmt(value)}\n")


def _fmt(value):
    if isinstance(value, float):
        if np.isnan(value):
            return "nan"
        return f"{value:.6f}"
    return str(value)
