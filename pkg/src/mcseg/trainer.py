"""Adversarial two-classifier training (steps A, B, C), its multitask variant,
epoch logging and entropy-based checkpoint selection."""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass
from datetime import datetime, timezone

import numpy as np

from . import __version__, losses
from .autodiff import SGD, ContractError, no_grad, ops
from .autodiff.tensor import is_debug
from .models import SegModel, save_checkpoint
from .scenegen import Dataset

MODES = ("adapt", "source_only", "oracle")
LOG_FIELDS = ("epoch", "L_seg_src", "L_adv_tgt", "L_depth", "L_boundary", "target_entropy")
DYNAMICS_FIELDS = ("epoch", "b_pre", "b_post", "c_pre", "c_post")


class TrainingDiverged(RuntimeError):
    """A loss went non-finite; checkpoints and log rows of completed epochs are kept."""

    def __init__(self, epoch, iteration, completed):
        super().__init__(f"training diverged (non-finite loss) in epoch {epoch} at iteration {iteration}; "
                         f"{completed} completed epoch(s) kept")
        self.epoch = epoch
        self.iteration = iteration
        self.completed = completed


@dataclass
class TrainConfig:
    fusion: str = "rgb_only"
    tasks: str = "seg_only"
    mode: str = "adapt"
    lr: float = 1e-3
    momentum: float = 0.9
    batch_size: int = 1
    iters_per_epoch: int = 500
    epochs: int = 10
    num_c_steps: int = 4
    warmup_epochs: int = 0
    seed: int = 0
    width: int = 16
    adv_weight: float = 1.0
    discrepancy_order: int = 1
    boundary_threshold: float = 0.5
    entropy_samples: int = 32
    track_dynamics: bool = False
    data_dir: str = None
    out_dir: str = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        for name in ("batch_size", "iters_per_epoch", "epochs", "width", "entropy_samples"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be a positive integer, got {getattr(self, name)}")
        if not 0 <= self.warmup_epochs <= self.epochs:
            raise ValueError(f"warmup_epochs must lie in [0, epochs], got {self.warmup_epochs}")
        if self.num_c_steps < 0:
            raise ValueError(f"num_c_steps must be >= 0, got {self.num_c_steps}")
        if not self.lr > 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")
        if not 0 < self.boundary_threshold < 1:
            raise ValueError(f"boundary_threshold must lie in (0, 1), got {self.boundary_threshold}")

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training config field(s): {sorted(unknown)}")
        return cls(**d)

    def to_dict(self):
        return dataclasses.asdict(self)


@dataclass
class Batch:
    """Model inputs plus whatever supervision the caller is allowed to see."""

    rgb: np.ndarray = None
    hha: np.ndarray = None
    labels: np.ndarray = None
    boundaries: np.ndarray = None


class TrainState:
    """Model, one optimizer per parameter group, iteration counter and epoch log."""

    def __init__(self, model, lr=1e-3, momentum=0.9, adv_weight=1.0, discrepancy_order=1):
        self.model = model
        groups = model.parameter_groups()
        self.optimizers = {g: SGD(ps, lr=lr, momentum=momentum) for g, ps in groups.items() if ps}
        self.adv_weight = adv_weight
        self.discrepancy_order = discrepancy_order
        self.iteration = 0
        self.log = []

    @classmethod
    def from_config(cls, config, num_classes):
        model = SegModel(config.fusion, config.tasks, num_classes, config.width, seed=config.seed)
        return cls(model, config.lr, config.momentum, config.adv_weight, config.discrepancy_order)

    def _step(self, groups):
        for g in groups:
            if g in self.optimizers:
                self.optimizers[g].step()
        self.model.zero_grad()


def _forward(model, batch):
    return model.forward(batch.rgb if model.uses_rgb() else None, batch.hha if model.uses_hha() else None)


def _seg_loss(out, labels):
    return ops.add(losses.softmax_cross_entropy(out.logits1, labels),
                   losses.softmax_cross_entropy(out.logits2, labels))


def _adv_loss(out, order):
    p1, p2 = out.probs()
    return losses.discrepancy(p1, p2, order)


def step_a(state, src, tgt=None):
    """Fit G, both classifiers and any task heads on labelled source data.

    Multitask models add the target depth regression when ``tgt`` is given.
    """
    if src.labels is None:
        raise ContractError("step_a needs a labelled source sample")
    model = state.model
    model.set_trainable(("generator", "classifier", "head", "uncertainty"))
    out = _forward(model, src)
    l_seg = _seg_loss(out, src.labels)
    result = {"L_seg": l_seg.item()}
    if model.tasks == "seg_only":
        total = l_seg
    else:
        l_depth = losses.depth_mse(out.depth, src.hha)
        l_depth_tgt = None
        if tgt is not None:
            l_depth_tgt = losses.depth_mse(model.predict_depth(tgt.rgb), tgt.hha)
            result["L_depth_tgt"] = l_depth_tgt.item()
        l_bnd = None
        if model.tasks == "triple":
            if src.boundaries is None:
                raise ContractError("triple task set needs source boundary maps")
            l_bnd = losses.balanced_bce(out.boundary, src.boundaries[:, None])
            result["L_boundary"] = l_bnd.item()
        total = losses.multitask_total(l_seg, l_depth, l_depth_tgt, l_bnd, model.params["log_vars"], model.tasks)
        result["L_depth"] = l_depth.item()
    total.backward()
    state._step(("generator", "classifier", "head", "uncertainty"))
    result["total"] = total.item()
    return result


def step_b(state, src, tgt):
    """Classifiers only: stay accurate on source while disagreeing on target."""
    model = state.model
    model.set_trainable("classifier")
    l_seg = _seg_loss(_forward(model, src), src.labels)
    l_adv = _adv_loss(_forward(model, tgt), state.discrepancy_order)
    loss = ops.add(l_seg, ops.mul(l_adv, -float(state.adv_weight)))
    loss.backward()
    state._step(("classifier",))
    return {"L_seg": l_seg.item(), "L_adv": l_adv.item()}


def step_c(state, tgt, num_c_steps=4):
    """Generator only: reduce classifier disagreement on target, ``num_c_steps`` times.

    Returns the discrepancy before the first update (``L_adv``).
    """
    model = state.model
    model.set_trainable("generator")
    first = None
    for _ in range(num_c_steps):
        l_adv = _adv_loss(_forward(model, tgt), state.discrepancy_order)
        l_adv.backward()
        state._step(("generator",))
        first = l_adv.item() if first is None else first
    return {"L_adv": first}


def discrepancy_value(state, batch):
    with no_grad():
        return _adv_loss(_forward(state.model, batch), state.discrepancy_order).item()


def predict_proba(model, rgb=None, hha=None):
    """Mean of the two classifiers' softmax maps, N x K x H x W."""
    with no_grad():
        out = model.forward(rgb if model.uses_rgb() else None, hha if model.uses_hha() else None)
        p1, p2 = out.probs()
        return 0.5 * (p1.data + p2.data), out


# -- data plumbing -------------------------------------------------------------


class SampleCache:
    """Reads each sample file at most once; only the requested kinds are touched."""

    def __init__(self, dataset):
        self.dataset = dataset
        self._cache = {}

    def get(self, entry, kinds):
        return {k: self._read(entry, k) for k in kinds}

    def _read(self, entry, kind):
        key = (entry["id"], kind)
        if key not in self._cache:
            self._cache[key] = self.dataset.read(entry, kind)
        return self._cache[key]


def _batch(cache, entries, kinds):
    parts = [cache.get(e, kinds) for e in entries]
    stack = {k: np.stack([p[k] for p in parts]) for k in kinds}
    return Batch(**stack)


def _source_kinds(model):
    kinds = ["labels", "hha"] if model.tasks != "seg_only" or model.uses_hha() else ["labels"]
    if model.uses_rgb():
        kinds.append("rgb")
    if model.tasks == "triple":
        kinds.append("boundaries")
    return tuple(kinds)


def _target_kinds(model):
    # unlabelled: image modalities only
    kinds = []
    if model.uses_rgb():
        kinds.append("rgb")
    if model.uses_hha() or model.tasks != "seg_only":
        kinds.append("hha")
    return tuple(kinds)


def target_entropy(model, cache, entries):
    values = []
    for e in entries:
        b = _batch(cache, [e], _target_kinds(model))
        probs, _ = predict_proba(model, b.rgb, b.hha)
        values.append(losses.mean_entropy(probs))
    return float(np.mean(values))


def _fmt(v):
    return "" if v is None else f"{v:.6f}"


def _mean(values):
    values = [v for v in values if v is not None]
    return float(np.mean(values)) if values else None


def train(config, progress=None):
    """Run the full schedule; writes config.json, log.csv and one checkpoint per epoch.

    Returns the run directory.
    """
    if isinstance(config, dict):
        config = TrainConfig.from_dict(config)
    if not config.data_dir or not config.out_dir:
        raise ValueError("training needs both data_dir and out_dir")
    dataset = Dataset(config.data_dir)
    started = _now()
    os.makedirs(config.out_dir, exist_ok=True)
    with open(os.path.join(config.out_dir, "config.json"), "w", encoding="utf-8") as fh:
        json.dump(config.to_dict(), fh, indent=1, sort_keys=True)
        fh.write("\n")

    state = TrainState.from_config(config, dataset.num_classes)
    model = state.model
    cache = SampleCache(dataset)
    labelled = dataset.entries("target_train" if config.mode == "oracle" else "source_train")
    if not labelled:
        raise ValueError(f"no training samples for mode {config.mode!r} in {config.data_dir}")
    adapt = config.mode == "adapt"
    unlabelled = dataset.entries("target_train") if adapt else []
    if adapt and not unlabelled:
        raise ValueError(f"adaptation needs target_train samples in {config.data_dir}")
    entropy_entries = unlabelled[: config.entropy_samples]
    if config.mode == "oracle":
        entropy_entries = labelled[: config.entropy_samples]
    src_kinds, tgt_kinds = _source_kinds(model), _target_kinds(model)
    sampler = np.random.default_rng(np.random.SeedSequence([config.seed, 1]))
    # held-out probes for the dynamics log draw from their own stream so the
    # training sequence is the same with or without tracking
    prober = np.random.default_rng(np.random.SeedSequence([config.seed, 2]))

    log_path = os.path.join(config.out_dir, "log.csv")
    dyn_path = os.path.join(config.out_dir, "dynamics.csv")
    _write_rows(log_path, LOG_FIELDS, [])
    if config.track_dynamics and adapt:
        _write_rows(dyn_path, DYNAMICS_FIELDS, [])

    for epoch in range(1, config.epochs + 1):
        acc = {k: [] for k in ("L_seg", "L_adv", "L_depth", "L_boundary", "b_pre", "b_post", "c_pre", "c_post")}
        for _ in range(config.iters_per_epoch):
            src_idx = sampler.integers(len(labelled), size=config.batch_size)
            src = _batch(cache, [labelled[i] for i in src_idx], src_kinds)
            tgt = None
            if adapt:
                tgt_idx = sampler.integers(len(unlabelled), size=config.batch_size)
                tgt = _batch(cache, [unlabelled[i] for i in tgt_idx], tgt_kinds)
            adversarial = adapt and epoch > config.warmup_epochs
            ra = step_a(state, src, tgt)
            step_losses = [ra["total"]]
            acc["L_seg"].append(ra["L_seg"])
            acc["L_depth"].append(ra.get("L_depth"))
            acc["L_boundary"].append(ra.get("L_boundary"))
            if adversarial:
                probe = None
                if config.track_dynamics:
                    probe_idx = prober.integers(len(unlabelled), size=config.batch_size)
                    probe = _batch(cache, [unlabelled[i] for i in probe_idx], tgt_kinds)
                    acc["b_pre"].append(discrepancy_value(state, probe))
                rb = step_b(state, src, tgt)
                if probe is not None:
                    mid = discrepancy_value(state, probe)
                    acc["b_post"].append(mid)
                    acc["c_pre"].append(mid)
                rc = step_c(state, tgt, config.num_c_steps)
                step_losses += [rb["L_seg"], rb["L_adv"], rc["L_adv"]]
                acc["L_adv"].append(rc["L_adv"])
                if probe is not None:
                    acc["c_post"].append(discrepancy_value(state, probe))
            state.iteration += 1
            # the partial epoch is dropped so every saved checkpoint and log row stays finite
            if not all(np.isfinite(v) for v in step_losses if v is not None):
                write_run_manifest(config, started, diverged={"epoch": epoch, "iteration": state.iteration})
                raise TrainingDiverged(epoch, state.iteration, epoch - 1)
            if is_debug():
                _check_finite(model)
        entropy = target_entropy(model, cache, entropy_entries) if entropy_entries else None
        row = {
            "epoch": epoch,
            "L_seg_src": _mean(acc["L_seg"]),
            "L_adv_tgt": _mean(acc["L_adv"]),
            "L_depth": _mean(acc["L_depth"]),
            "L_boundary": _mean(acc["L_boundary"]),
            "target_entropy": entropy,
        }
        state.log.append(row)
        _append_row(log_path, LOG_FIELDS, row)
        if config.track_dynamics and adapt and acc["b_pre"]:
            _append_row(dyn_path, DYNAMICS_FIELDS, {"epoch": epoch, **{k: _mean(acc[k]) for k in DYNAMICS_FIELDS[1:]}})
        save_checkpoint(model, checkpoint_path(config.out_dir, epoch),
                        meta={"epoch": epoch, "mode": config.mode, "class_names": dataset.class_names})
        if progress is not None:
            progress(row)
    write_run_manifest(config, started)
    return config.out_dir


def _now():
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


RUN_MANIFEST = "run_manifest.json"


def write_run_manifest(config, started, diverged=None):
    """Resolved config, version, timestamps and an inventory (size, sha256) of the run files.

    The timestamps make this the one run file that differs between reruns.
    """
    files = []
    for name in sorted(os.listdir(config.out_dir)):
        path = os.path.join(config.out_dir, name)
        if name == RUN_MANIFEST or not os.path.isfile(path):
            continue
        with open(path, "rb") as fh:
            blob = fh.read()
        files.append({"name": name, "bytes": len(blob), "sha256": hashlib.sha256(blob).hexdigest()})
    manifest = {
        "version": f"mcseg-{__version__}",
        "seed": config.seed,
        "config": config.to_dict(),
        "started": started,
        "finished": _now(),
        "files": files,
    }
    if diverged is not None:
        manifest["diverged"] = diverged
    with open(os.path.join(config.out_dir, RUN_MANIFEST), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return manifest


def _check_finite(model):
    for name, p in model.params.items():
        if not np.all(np.isfinite(p.data)):
            raise FloatingPointError(f"parameter {name} became non-finite")


def checkpoint_path(run_dir, epoch):
    return os.path.join(run_dir, f"ckpt_epoch{epoch}.mcseg")


def _write_rows(path, fields, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(fields)
        for r in rows:
            w.writerow([r["epoch"]] + [_fmt(r[f]) for f in fields[1:]])


def _append_row(path, fields, row):
    with open(path, "a", newline="", encoding="utf-8") as fh:
        csv.writer(fh, lineterminator="\n").writerow([row["epoch"]] + [_fmt(row[f]) for f in fields[1:]])


def read_log(run_dir, name="log.csv"):
    """Rows of a run's CSV log with numeric fields parsed (blank -> None)."""
    path = os.path.join(run_dir, name)
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    out = []
    for r in rows:
        out.append({k: (int(v) if k == "epoch" else (float(v) if v != "" else None)) for k, v in r.items()})
    return out


def select_epoch(run_dir):
    """Epoch with the lowest target entropy (earliest on ties).

    Runs that never saw target data have no entropy column values; the last
    epoch is returned for those.
    """
    rows = read_log(run_dir) if isinstance(run_dir, (str, os.PathLike)) else list(run_dir)
    if not rows:
        raise ValueError(f"{run_dir}: log has no completed epochs")
    scored = [(r["target_entropy"], r["epoch"]) for r in rows
              if r.get("target_entropy") is not None and np.isfinite(r["target_entropy"])]
    if not scored:
        return rows[-1]["epoch"]
    best = min(e for e, _ in scored)
    return min(ep for e, ep in scored if e == best)


def select_from_entropies(entropies):
    """1-based argmin with earliest tie-break."""
    if len(entropies) == 0:
        raise ValueError("no epochs to select from")
    return int(np.argmin(np.asarray(entropies, dtype=float))) + 1

