"""Feature generator + twin classifier architectures, with fusion and multitask variants.

Generator: per modality, three stages of ``[conv3x3 stride 2, relu, conv3x3,
relu]`` with widths ``(w, 2w, 4w)``, giving a 1/8-resolution feature map.
Classifier heads upsample that map 8x bilinearly and apply three 1x1 convs.
"""
from __future__ import annotations

import io
import json
import struct
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from .autodiff import ContractError, Tensor, ops

FUSION_KINDS = (
    "rgb_only",
    "hha_only",
    "early",
    "late_add",
    "late_concat",
    "score_add",
    "score_concat_conv",
    "score_gate",
    "fusenet",
)
TASK_SETS = ("seg_only", "dual", "triple")
GROUPS = ("generator", "classifier", "head", "uncertainty")
CHECKPOINT_MAGIC = b"MCSEG1\n"

_TWO_ENCODERS = ("late_add", "late_concat", "score_add", "score_concat_conv", "score_gate", "fusenet")
_SCORE = ("score_add", "score_concat_conv", "score_gate")


@dataclass
class Outputs:
    logits1: Tensor
    logits2: Tensor
    depth: Tensor = None
    boundary: Tensor = None

    def probs(self):
        return ops.softmax_channel(self.logits1), ops.softmax_channel(self.logits2)


def _kaiming_uniform(rng, shape):
    fan_in = int(np.prod(shape[1:]))
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


class SegModel:
    """Generator G, classifiers C1/C2 (four for score fusion) and optional task heads."""

    def __init__(self, fusion="rgb_only", tasks="seg_only", num_classes=6, width=16, seed=0):
        if fusion not in FUSION_KINDS:
            raise ContractError(f"unknown fusion kind {fusion!r}; expected one of {FUSION_KINDS}")
        if tasks not in TASK_SETS:
            raise ContractError(f"unknown task set {tasks!r}; expected one of {TASK_SETS}")
        if tasks != "seg_only" and fusion != "rgb_only":
            raise ContractError(f"multitask models take RGB input only; got fusion={fusion!r} with tasks={tasks!r}")
        if num_classes < 2 or width < 1:
            raise ContractError(f"need num_classes >= 2 and width >= 1, got {num_classes}, {width}")
        self.fusion = fusion
        self.tasks = tasks
        self.num_classes = num_classes
        self.width = width
        self.seed = seed
        self.params = OrderedDict()
        self.groups = {g: [] for g in GROUPS}
        self._build(np.random.default_rng(seed))

    # -- construction ---------------------------------------------------------

    def _conv(self, name, group, cin, cout, k, rng):
        self.params[f"{name}.weight"] = Tensor(_kaiming_uniform(rng, (cout, cin, k, k)), requires_grad=True)
        self.params[f"{name}.bias"] = Tensor(np.zeros(cout, np.float32), requires_grad=True)
        self.groups[group] += [f"{name}.weight", f"{name}.bias"]

    def _encoder(self, name, cin, rng):
        w = self.width
        for s, cout in enumerate((w, 2 * w, 4 * w), start=1):
            self._conv(f"{name}.s{s}.down", "generator", cin, cout, 3, rng)
            self._conv(f"{name}.s{s}.conv", "generator", cout, cout, 3, rng)
            cin = cout

    def _head(self, name, group, cin, cout, rng):
        w = self.width
        self._conv(f"{name}.conv1", group, cin, w, 1, rng)
        self._conv(f"{name}.conv2", group, w, w, 1, rng)
        self._conv(f"{name}.conv3", group, w, cout, 1, rng)

    def _build(self, rng):
        w, k = self.width, self.num_classes
        f = self.fusion
        if f in ("rgb_only", "hha_only"):
            self._encoder("enc", 3, rng)
        elif f == "early":
            self._encoder("enc", 6, rng)
        else:
            self._encoder("enc_rgb", 3, rng)
            self._encoder("enc_hha", 3, rng)
        feat = 8 * w if f == "late_concat" else 4 * w
        if f in _SCORE:
            for i in (1, 2):
                for m in ("rgb", "hha"):
                    self._head(f"c{i}_{m}", "classifier", feat, k, rng)
            if f in ("score_concat_conv", "score_gate"):
                self._conv("fuse", "classifier", 2 * k, k, 1, rng)
        else:
            for i in (1, 2):
                self._head(f"c{i}", "classifier", feat, k, rng)
        if self.tasks in ("dual", "triple"):
            self._head("depth", "head", feat, 3, rng)
            self.params["log_vars"] = Tensor(np.zeros(3, np.float32), requires_grad=True)
            self.groups["uncertainty"].append("log_vars")
        if self.tasks == "triple":
            self._conv("edge.side1", "head", w, 1, 1, rng)
            self._conv("edge.side2", "head", 2 * w, 1, 1, rng)
            self._conv("edge.final", "head", 4 * w, 1, 1, rng)

    # -- parameters -----------------------------------------------------------

    def parameters(self, groups=GROUPS):
        if isinstance(groups, str):
            groups = (groups,)
        return [self.params[n] for g in groups for n in self.groups[g]]

    def parameter_groups(self):
        return {g: [self.params[n] for n in self.groups[g]] for g in GROUPS}

    def named_parameters(self):
        return list(self.params.items())

    def set_trainable(self, groups):
        """Only parameters in ``groups`` record gradients."""
        groups = (groups,) if isinstance(groups, str) else tuple(groups)
        for g in GROUPS:
            for n in self.groups[g]:
                self.params[n].requires_grad = g in groups

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def astype(self, dtype):
        for p in self.params.values():
            p.data = p.data.astype(dtype)
        return self

    def uses_hha(self):
        return self.fusion != "rgb_only"

    def uses_rgb(self):
        return self.fusion != "hha_only"

    def config(self):
        return {"fusion": self.fusion, "tasks": self.tasks, "num_classes": self.num_classes,
                "width": self.width, "seed": self.seed}

    # -- forward --------------------------------------------------------------

    def _p(self, name):
        return self.params[name]

    def _conv_apply(self, name, x, stride=1, pad=0):
        return ops.conv2d(x, self._p(f"{name}.weight"), self._p(f"{name}.bias"), stride=stride, pad=pad)

    def _stage(self, name, s, x):
        x = ops.relu(self._conv_apply(f"{name}.s{s}.down", x, stride=2, pad=1))
        return ops.relu(self._conv_apply(f"{name}.s{s}.conv", x, stride=1, pad=1))

    def _encode(self, name, x):
        taps = []
        for s in (1, 2, 3):
            x = self._stage(name, s, x)
            taps.append(x)
        return x, taps

    def _head_apply(self, name, feat):
        # upsample(conv1x1(x)) == conv1x1(upsample(x)): both are linear and the
        # interpolation weights sum to one, so the first conv runs at 1/8 size
        x = ops.bilinear_upsample(self._conv_apply(f"{name}.conv1", feat), 8)
        x = ops.relu(x)
        x = ops.relu(self._conv_apply(f"{name}.conv2", x))
        return self._conv_apply(f"{name}.conv3", x)

    def generate(self, rgb=None, hha=None):
        """Run G; returns ``(features, stage_outputs)`` or, for score fusion, a pair of those."""
        rgb, hha = self._check_inputs(rgb, hha)
        f = self.fusion
        if f == "rgb_only":
            return self._encode("enc", rgb)
        if f == "hha_only":
            return self._encode("enc", hha)
        if f == "early":
            return self._encode("enc", ops.concat_channels(rgb, hha))
        if f == "fusenet":
            xr, xh, taps = rgb, hha, []
            for s in (1, 2, 3):
                xh = self._stage("enc_hha", s, xh)
                xr = ops.add(self._stage("enc_rgb", s, xr), xh)
                taps.append(xr)
            return xr, taps
        fr, taps = self._encode("enc_rgb", rgb)
        fh, _ = self._encode("enc_hha", hha)
        if f == "late_add":
            return ops.add(fr, fh), taps
        if f == "late_concat":
            return ops.concat_channels(fr, fh), taps
        return (fr, fh), taps

    def classify(self, feat):
        """Both classifier outputs (logits) from generator features."""
        if self.fusion not in _SCORE:
            return self._head_apply("c1", feat), self._head_apply("c2", feat)
        fr, fh = feat
        return tuple(self._fuse_scores(self._head_apply(f"c{i}_rgb", fr), self._head_apply(f"c{i}_hha", fh))
                     for i in (1, 2))

    def _fuse_scores(self, s_rgb, s_hha):
        if self.fusion == "score_add":
            return ops.add(s_rgb, s_hha)
        both = ops.concat_channels(s_rgb, s_hha)
        if self.fusion == "score_concat_conv":
            return self._conv_apply("fuse", both)
        gate = ops.sigmoid(self._conv_apply("fuse", both))
        return ops.add(s_hha, ops.mul(gate, ops.add(s_rgb, ops.neg(s_hha))))

    def forward(self, rgb=None, hha=None, mode="train"):
        if mode not in ("train", "eval"):
            raise ContractError(f"mode must be 'train' or 'eval', got {mode!r}")
        feat, taps = self.generate(rgb, hha)
        logits1, logits2 = self.classify(feat)
        out = Outputs(logits1, logits2)
        if self.tasks in ("dual", "triple"):
            out.depth = self._head_apply("depth", feat)
        if self.tasks == "triple":
            out.boundary = self.boundary_map(taps)
        return out

    __call__ = forward

    def predict_depth(self, rgb):
        """Depth-head output alone (skips the classifiers)."""
        if self.tasks == "seg_only":
            raise ContractError("model has no depth head")
        feat, _ = self.generate(rgb)
        return self._head_apply("depth", feat)

    def boundary_map(self, taps):
        """Mean of the three side-output boundary probabilities."""
        maps = [
            ops.sigmoid(ops.bilinear_upsample(self._conv_apply(f"edge.{name}", tap), factor))
            for name, tap, factor in zip(("side1", "side2", "final"), taps, (2, 4, 8))
        ]
        return ops.mul(ops.add(ops.add(maps[0], maps[1]), maps[2]), 1.0 / 3.0)

    def _check_inputs(self, rgb, hha):
        if self.uses_rgb() and rgb is None:
            raise ContractError(f"fusion {self.fusion!r} needs an RGB input")
        if self.uses_hha() and hha is None:
            raise ContractError(f"fusion {self.fusion!r} needs an HHA input")
        rgb = _as_batch(rgb, "rgb") if rgb is not None else None
        hha = _as_batch(hha, "hha") if hha is not None else None
        x = rgb if rgb is not None else hha
        _, _, h, w = x.shape
        if h % 8 or w % 8:
            raise ContractError(f"input height and width must be multiples of 8, got {h}x{w}")
        if rgb is not None and hha is not None and rgb.shape != hha.shape:
            raise ContractError(f"rgb shape {rgb.shape} and hha shape {hha.shape} differ")
        return rgb, hha


def _as_batch(x, name):
    if not isinstance(x, Tensor):
        x = Tensor(np.asarray(x, dtype=np.float32))
    if x.ndim == 3:
        x = Tensor(x.data[None], requires_grad=False)
    if x.ndim != 4 or x.shape[1] != 3:
        raise ContractError(f"{name} input must be N x 3 x H x W, got shape {x.shape}")
    return x


def build_model(fusion="rgb_only", tasks="seg_only", num_classes=6, width=16, seed=0):
    return SegModel(fusion=fusion, tasks=tasks, num_classes=num_classes, width=width, seed=seed)


def parameter_groups(model):
    return model.parameter_groups()


# -- checkpoints ---------------------------------------------------------------


def checkpoint_bytes(model, meta=None):
    records = [{"name": n, "shape": list(p.shape), "dtype": "f32"} for n, p in model.params.items()]
    header = {"model": model.config(), "params": records, "meta": meta or {}}
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", len(blob)))
    buf.write(blob)
    for p in model.params.values():
        buf.write(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
    return buf.getvalue()


def save_checkpoint(model, path, meta=None):
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(model, meta))


def load_checkpoint(path):
    """Rebuild the model stored at ``path``; returns ``(model, meta)``."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if not raw.startswith(CHECKPOINT_MAGIC):
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    off = len(CHECKPOINT_MAGIC)
    try:
        (n,) = struct.unpack_from("<I", raw, off)
        header = json.loads(raw[off + 4: off + 4 + n].decode("utf-8"))
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ValueError(f"{path}: corrupt checkpoint header ({exc})") from exc
    off += 4 + n
    model = SegModel(**header["model"])
    names = list(model.params)
    stored = [r["name"] for r in header["params"]]
    if stored != names:
        raise ValueError(f"{path}: parameter list does not match a {header['model']} model")
    for rec in header["params"]:
        p = model.params[rec["name"]]
        if tuple(rec["shape"]) != p.shape or rec["dtype"] != "f32":
            raise ValueError(f"{path}: parameter {rec['name']} has shape {rec['shape']}, expected {list(p.shape)}")
        count = int(np.prod(rec["shape"]))
        if off + 4 * count > len(raw):
            raise ValueError(f"{path}: truncated data for {rec['name']}")
        p.data = np.frombuffer(raw, dtype="<f4", count=count, offset=off).astype(np.float32).reshape(p.shape)
        off += 4 * count
    if off != len(raw):
        raise ValueError(f"{path}: {len(raw) - off} trailing bytes")
    return model, header.get("meta", {})
