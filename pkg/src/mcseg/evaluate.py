"""Whole-split inference and scoring for trained models."""
from __future__ import annotations

import numpy as np

from . import metrics
from .refine import refine, sobel_edges
from .trainer import predict_proba


def predict(model, rgb=None, hha=None, refine_output=False, threshold=0.5):
    """Label map (argmax of the mean classifier probability) and boundary map, for one image.

    ``refine_output`` votes labels inside the regions cut out by the model's
    own boundary map and needs a model with a boundary head.
    """
    rgb = None if rgb is None else np.asarray(rgb, dtype=np.float32)[None]
    hha = None if hha is None else np.asarray(hha, dtype=np.float32)[None]
    probs, out = predict_proba(model, rgb, hha)
    labels = probs[0].argmax(axis=0).astype(np.uint8)
    bmap = None if out.boundary is None else out.boundary.data[0, 0].astype(np.float64)
    if refine_output:
        if bmap is None:
            raise ValueError("refinement needs a model trained with the boundary task (tasks='triple')")
        labels = refine(labels, bmap, threshold)
    return labels, bmap


def evaluate(model, dataset, split="target_test", refine_output=False, threshold=0.5, radius=1, meta=None):
    """Score ``model`` on ``split`` of ``dataset``; returns ``(report, confusion)``."""
    entries = dataset.entries(split)
    if not entries:
        raise ValueError(f"split {split!r} is empty")
    k = dataset.num_classes
    if model.num_classes != k:
        raise ValueError(f"model predicts {model.num_classes} classes but the dataset has {k}")
    cm = np.zeros((k, k), dtype=np.int64)
    bmaps, bgts = [], []
    kinds = ["labels"] + (["rgb"] if model.uses_rgb() else []) + (["hha"] if model.uses_hha() else [])
    with_boundary = model.tasks == "triple"
    if with_boundary:
        kinds.append("boundaries")
    for e in entries:
        d = dataset.load(e, kinds)
        labels, bmap = predict(model, d.get("rgb"), d.get("hha"), refine_output, threshold)
        cm += metrics.confusion(labels, d["labels"], k)
        if with_boundary:
            bmaps.append(bmap)
            bgts.append(d["boundaries"])
    boundary = metrics.boundary_scores(bmaps, bgts, radius) if with_boundary else None
    scores = metrics.seg_scores(cm)
    info = {"split": split, "refine": bool(refine_output)}
    info.update(meta or {})
    return metrics.make_report(scores, cm, dataset.class_names, boundary, info), cm


def sobel_boundary_scores(dataset, split="target_test", radius=1):
    """ODS/OIS/AP of the normalized Sobel magnitude on ``split``."""
    preds, gts = [], []
    for e in dataset.entries(split):
        d = dataset.load(e, ("rgb", "boundaries"))
        preds.append(sobel_edges(d["rgb"]))
        gts.append(d["boundaries"])
    return metrics.boundary_scores(preds, gts, radius)
