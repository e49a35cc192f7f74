"""Segmentation scores from a confusion matrix, boundary ODS/OIS/AP, and JSON reports."""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

IGNORE_INDEX = 255
THRESHOLDS = np.round(np.arange(1, 100) / 100.0, 2)
SCORE_KEYS = ("pixAcc", "mAcc", "fwIoU", "mIoU")


def confusion(pred, gt, num_classes, ignore_index=IGNORE_INDEX):
    """Counts ``n[i, j]`` of pixels with ground truth ``i`` predicted as ``j``."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction shape {pred.shape} does not match ground truth shape {gt.shape}")
    valid = gt != ignore_index
    g = gt[valid].astype(np.int64)
    p = pred[valid].astype(np.int64)
    for name, arr in (("ground truth", g), ("prediction", p)):
        if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
            raise ValueError(f"{name} contains class ids outside [0, {num_classes})")
    return np.bincount(g * num_classes + p, minlength=num_classes * num_classes).reshape(num_classes, num_classes)


@dataclass
class SegScores:
    pixAcc: float
    mAcc: float
    fwIoU: float
    mIoU: float
    per_class_iou: np.ndarray
    present: np.ndarray

    def as_dict(self):
        return {k: getattr(self, k) for k in SCORE_KEYS}


def seg_scores(cm):
    """pixAcc, mAcc, fwIoU, mIoU and per-class IoU from a confusion matrix.

    Classes with neither ground-truth nor predicted pixels are left out of
    the class means and get a NaN IoU.
    """
    cm = np.asarray(cm, dtype=np.int64)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1]:
        raise ValueError(f"confusion matrix must be square, got shape {cm.shape}")
    total = int(cm.sum())
    if total == 0:
        raise ValueError("confusion matrix is empty")
    k = cm.shape[0]
    n_ii = [int(cm[i, i]) for i in range(k)]
    t = [int(cm[i].sum()) for i in range(k)]
    predicted = [int(cm[:, i].sum()) for i in range(k)]
    present = np.array([t[i] > 0 or predicted[i] > 0 for i in range(k)])
    acc = [n_ii[i] / t[i] if t[i] else 0.0 for i in range(k)]
    iou = np.full(k, np.nan)
    for i in range(k):
        if present[i]:
            iou[i] = n_ii[i] / (t[i] + predicted[i] - n_ii[i])
    n_present = int(present.sum())
    pix = sum(n_ii) / sum(t)
    macc = sum(acc[i] for i in range(k) if present[i]) / n_present
    miou = sum(float(iou[i]) for i in range(k) if present[i]) / n_present
    fw = sum(t[i] * float(iou[i]) for i in range(k) if t[i]) / sum(t)
    return SegScores(pix, macc, fw, miou, iou, present)


# -- boundaries -----------------------------------------------------------------


@dataclass
class BoundaryScores:
    ods: float
    ois: float
    ap: float
    ods_threshold: float
    pr_curve: list = field(default_factory=list)


def _offsets(radius, width):
    return [dy * width + dx for dy in range(-radius, radius + 1) for dx in range(-radius, radius + 1)]


def match_counts(pred_mask, gt_mask, radius=1):
    """Greedy one-to-one matching in raster order.

    Each predicted edge pixel, visited in raster order, claims the first
    unclaimed ground-truth edge pixel (raster order within its window) at
    Chebyshev distance ``<= radius``.  Returns ``(tp, n_pred, n_gt)``.
    """
    pred_mask = np.asarray(pred_mask, dtype=bool)
    gt_mask = np.asarray(gt_mask, dtype=bool)
    if pred_mask.shape != gt_mask.shape:
        raise ValueError(f"boundary shapes differ: {pred_mask.shape} vs {gt_mask.shape}")
    n_pred, n_gt = int(pred_mask.sum()), int(gt_mask.sum())
    if n_pred == 0 or n_gt == 0:
        return 0, n_pred, n_gt
    near = ndimage.binary_dilation(gt_mask, structure=np.ones((2 * radius + 1,) * 2, bool)) if radius else gt_mask
    padded = np.pad(gt_mask, radius)
    width = padded.shape[1]
    free = bytearray(padded.ravel().astype(np.uint8).tobytes())
    offsets = _offsets(radius, width)
    ys, xs = np.nonzero(pred_mask & near)
    tp = 0
    for y, x in zip(ys.tolist(), xs.tolist()):
        base = (y + radius) * width + x + radius
        for off in offsets:
            j = base + off
            if free[j]:
                free[j] = 0
                tp += 1
                break
    return tp, n_pred, n_gt


def _prf(tp, n_pred, n_gt):
    # no predictions -> precision 1; no ground truth -> recall 1
    p = tp / n_pred if n_pred else 1.0
    r = tp / n_gt if n_gt else 1.0
    f = 2 * p * r / (p + r) if p + r > 0 else 0.0
    return p, r, f


def boundary_scores(preds, gts, radius=1, thresholds=THRESHOLDS):
    """ODS, OIS and AP over a list of boundary probability maps."""
    preds, gts = list(preds), list(gts)
    if not preds or len(preds) != len(gts):
        raise ValueError(f"need matched non-empty lists, got {len(preds)} predictions and {len(gts)} ground truths")
    if radius < 0:
        raise ValueError(f"radius must be >= 0, got {radius}")
    thresholds = np.asarray(thresholds, dtype=float)
    counts = np.zeros((len(preds), len(thresholds), 3), dtype=np.int64)
    for i, (p, g) in enumerate(zip(preds, gts)):
        p = np.asarray(p, dtype=float)
        g = np.asarray(g).astype(bool)
        for j, t in enumerate(thresholds):
            counts[i, j] = match_counts(p >= t, g, radius)
    total = counts.sum(axis=0)
    curve = []
    best_f, best_t = -1.0, float(thresholds[0])
    for j, t in enumerate(thresholds):
        p, r, f = _prf(*total[j])
        curve.append((float(t), p, r))
        if f > best_f:
            best_f, best_t = f, float(t)
    ois = float(np.mean([max(_prf(*counts[i, j])[2] for j in range(len(thresholds))) for i in range(len(preds))]))
    pts = sorted((r, p) for _, p, r in curve)
    rec = np.array([r for r, _ in pts])
    prec = np.array([p for _, p in pts])
    ap = float(np.sum(np.diff(rec) * (prec[1:] + prec[:-1]) / 2.0)) if len(pts) > 1 else 0.0
    return BoundaryScores(float(best_f), ois, ap, best_t, curve)


# -- reports --------------------------------------------------------------------


def row_normalized(cm):
    cm = np.asarray(cm, dtype=np.float64)
    rows = cm.sum(axis=1, keepdims=True)
    return np.divide(cm, rows, out=np.zeros_like(cm), where=rows > 0)


def _pct(x):
    return round(100.0 * float(x), 1)


def make_report(scores, cm, class_names, boundary=None, meta=None):
    if len(class_names) != len(scores.per_class_iou) or np.shape(cm)[0] != len(class_names):
        raise ValueError("class names, per-class IoU and confusion matrix disagree on the class count")
    rep = {
        "scores": {k: _pct(getattr(scores, k)) for k in SCORE_KEYS},
        "per_class_iou": {
            name: (None if np.isnan(v) else _pct(v)) for name, v in zip(class_names, scores.per_class_iou)
        },
        "confusion_row_normalized": row_normalized(cm).tolist(),
        "meta": dict(meta or {}),
    }
    if boundary is not None:
        rep["boundary"] = {"ods": round(boundary.ods, 4), "ois": round(boundary.ois, 4), "ap": round(boundary.ap, 4)}
    return rep


def dumps_report(report):
    return json.dumps(report, indent=1, sort_keys=True) + "\n"


def write_report(path, report):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dumps_report(report))


def read_report(path):
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)
