"""Variant matrix runner producing a consolidated results table (CSV + JSON)."""
from __future__ import annotations

import csv
import json
import os
import re
import traceback

import numpy as np

from .evaluate import evaluate, sobel_boundary_scores
from .metrics import SCORE_KEYS
from .models import load_checkpoint
from .scenegen import Dataset, write_dataset
from .trainer import TrainConfig, TrainingDiverged, checkpoint_path, select_epoch, train

BOUNDARY_KEYS = ("ods", "ois", "ap")

DEFAULT_VARIANTS = [
    {"name": "SourceOnly(RGB)", "mode": "source_only", "fusion": "rgb_only", "tasks": "seg_only"},
    {"name": "Adapt(RGB)", "mode": "adapt", "fusion": "rgb_only", "tasks": "seg_only"},
    {"name": "Adapt(EarlyFusion)", "mode": "adapt", "fusion": "early", "tasks": "seg_only"},
    {"name": "Adapt(Multitask:Triple+Refine)", "mode": "adapt", "fusion": "rgb_only", "tasks": "triple",
     "refine": True},
]


def default_config():
    return {
        "dataset": {"seed": 0},
        "seeds": [0, 1, 2],
        "train": {"epochs": 6},
        "variants": DEFAULT_VARIANTS,
        "oracle": False,
        "sobel": True,
    }


def _slug(name):
    return re.sub(r"[^A-Za-z0-9]+", "_", name).strip("_").lower()


def validate_config(config):
    if not isinstance(config, dict):
        raise ValueError("benchmark config must be a JSON object")
    unknown = set(config) - {"dataset", "data", "seeds", "train", "variants", "oracle", "sobel", "radius"}
    if unknown:
        raise ValueError(f"unknown benchmark config field(s): {sorted(unknown)}")
    variants = config.get("variants")
    if not variants:
        raise ValueError("benchmark config needs a non-empty 'variants' list")
    names = [v.get("name") for v in variants]
    if any(not n for n in names) or len(set(names)) != len(names):
        raise ValueError("every variant needs a unique 'name'")
    for v in variants:
        bad = set(v) - {"name", "mode", "fusion", "tasks", "refine", "train"}
        if bad:
            raise ValueError(f"variant {v['name']!r}: unknown field(s) {sorted(bad)}")
    seeds = config.get("seeds", [0])
    if not seeds or not all(isinstance(s, int) for s in seeds):
        raise ValueError("'seeds' must be a non-empty list of integers")
    # surface bad training fields before any run starts
    for v in variants:
        TrainConfig.from_dict(_train_fields(config, v, seeds[0], "", ""))


def _train_fields(config, variant, seed, data_dir, out_dir):
    fields = dict(config.get("train", {}))
    fields.update(variant.get("train", {}))
    for key in ("mode", "fusion", "tasks"):
        if key in variant:
            fields[key] = variant[key]
    fields.update(seed=seed, data_dir=data_dir, out_dir=out_dir)
    return fields


def _run_variant(config, variant, seed, data_dir, runs_dir, dataset, radius):
    out_dir = os.path.join(runs_dir, f"{_slug(variant['name'])}_seed{seed}")
    cfg = TrainConfig.from_dict(_train_fields(config, variant, seed, data_dir, out_dir))
    diverged = None
    try:
        train(cfg)
    except TrainingDiverged as exc:
        # selection falls back to the epochs that finished before the blow-up
        if exc.completed == 0:
            raise
        diverged = {"epoch": exc.epoch, "iteration": exc.iteration}
    epoch = select_epoch(out_dir)
    ckpt = checkpoint_path(out_dir, epoch)
    model, _ = load_checkpoint(ckpt)
    refine_output = bool(variant.get("refine", False))
    report, _ = evaluate(model, dataset, "target_test", refine_output, cfg.boundary_threshold, radius,
                         meta={"checkpoint": os.path.basename(ckpt), "epoch": epoch, "diverged": diverged})
    with open(os.path.join(out_dir, "report.json"), "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return report


def _median(values):
    values = [v for v in values if v is not None]
    return round(float(np.median(values)), 4) if values else None


def run_benchmark(config, out_dir, log=None):
    """Train and score every variant for every seed; returns the table dict."""
    validate_config(config)
    os.makedirs(out_dir, exist_ok=True)
    if "data" in config:
        data_dir = config["data"]
    else:
        data_dir = os.path.join(out_dir, "data")
        if not os.path.exists(os.path.join(data_dir, "manifest.json")):
            write_dataset(config.get("dataset", {}), data_dir)
    dataset = Dataset(data_dir)
    runs_dir = os.path.join(out_dir, "runs")
    os.makedirs(runs_dir, exist_ok=True)
    seeds = list(config.get("seeds", [0]))
    radius = int(config.get("radius", 1))
    variants = list(config["variants"])
    if config.get("oracle"):
        variants.append({"name": "Oracle(TargetOnly,RGB)", "mode": "oracle", "fusion": "rgb_only", "tasks": "seg_only"})

    rows = []
    for variant in variants:
        per_seed = []
        for seed in seeds:
            try:
                rep = _run_variant(config, variant, seed, data_dir, runs_dir, dataset, radius)
                per_seed.append({"seed": seed, "scores": rep["scores"], "boundary": rep.get("boundary"),
                                 "epoch": rep["meta"]["epoch"], "diverged": rep["meta"]["diverged"],
                                 "error": None})
            except Exception as exc:  # recorded, the table is still emitted
                per_seed.append({"seed": seed, "scores": None, "boundary": None, "epoch": None, "diverged": None,
                                 "error": f"{type(exc).__name__}: {exc}"})
                if log is not None:
                    log(traceback.format_exc())
            if log is not None:
                log(f"{variant['name']} seed {seed}: {per_seed[-1]['scores'] or per_seed[-1]['error']}")
        row = {"method": variant["name"], "seeds": per_seed}
        for k in SCORE_KEYS:
            row[k] = _median([s["scores"][k] for s in per_seed if s["scores"]])
        for k in BOUNDARY_KEYS:
            row[k] = _median([s["boundary"][k] for s in per_seed if s["boundary"]])
        rows.append(row)
    if config.get("sobel", False):
        b = sobel_boundary_scores(dataset, "target_test", radius)
        row = {"method": "Sobel", "seeds": []}
        row.update({k: None for k in SCORE_KEYS})
        row.update({"ods": round(b.ods, 4), "ois": round(b.ois, 4), "ap": round(b.ap, 4)})
        rows.append(row)
    table = {"seeds": seeds, "rows": rows, "split": "target_test", "radius": radius}
    _write_table(table, out_dir)
    return table


def _fmt(v):
    return "" if v is None else f"{v:g}"


def _write_table(table, out_dir):
    with open(os.path.join(out_dir, "table.json"), "w", encoding="utf-8") as fh:
        json.dump(table, fh, indent=1, sort_keys=True)
        fh.write("\n")
    seeds = table["seeds"]
    header = ["method", *SCORE_KEYS, *BOUNDARY_KEYS] + [f"mIoU_seed{s}" for s in seeds]
    with open(os.path.join(out_dir, "table.csv"), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in table["rows"]:
            by_seed = {s["seed"]: s for s in row["seeds"]}
            seed_cells = [
                _fmt(by_seed[s]["scores"]["mIoU"]) if s in by_seed and by_seed[s]["scores"] else "" for s in seeds
            ]
            w.writerow([row["method"]] + [_fmt(row[k]) for k in (*SCORE_KEYS, *BOUNDARY_KEYS)] + seed_cells)
