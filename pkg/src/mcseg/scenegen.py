"""Procedural paired-domain indoor scenes.

A scene is a box room seen by a level pinhole camera: back wall, floor and
ceiling planes with analytic depth, plus furniture-like instances resting on
the floor or hanging on the wall.  Geometry (labels, instances, depth, HHA,
boundaries) depends only on the layout stream; the *target* domain re-renders
the same geometry with a shifted palette, colour cast, brightness ramp, blur
and sensor noise, and optionally a limited depth-sensor range.
"""
from __future__ import annotations

import colorsys
import dataclasses
import hashlib
import json
import os
import zlib
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from . import netpbm

IGNORE_INDEX = 255
STRUCTURE_NAMES = ("wall", "floor", "ceiling")
OBJECT_NAMES = ("cabinet", "bed", "picture", "table", "chair", "lamp", "door", "sofa")
OBJECT_KINDS = ("box", "bed", "wall", "table", "ellipse")
MIN_DEPTH = 0.5
MAX_DEPTH = 10.0
MAX_HEIGHT = 3.2
MANIFEST_VERSION = 1


def class_names(num_classes):
    if num_classes < 4:
        raise ValueError(f"need at least 4 classes (wall, floor, ceiling + one object), got {num_classes}")
    names = list(STRUCTURE_NAMES)
    for k in range(num_classes - 3):
        names.append(OBJECT_NAMES[k] if k < len(OBJECT_NAMES) else f"object{k}")
    return names


def object_kind(cls):
    """Shape template used for object class id ``cls`` (>= 3)."""
    return OBJECT_KINDS[(cls - 3) % len(OBJECT_KINDS)]


@dataclass
class DomainParams:
    class_frequencies: list = None
    hue_shift: float = 0.0
    saturation_scale: float = 1.0
    color_cast: tuple = (1.0, 1.0, 1.0)
    noise_sigma: float = 0.0
    blur_radius: float = 0.0
    brightness_gradient: float = 0.0
    object_count_range: tuple = (2, 5)
    max_range: float = None
    texture_sigma: float = 0.02

    def __post_init__(self):
        if self.class_frequencies is not None:
            freqs = np.asarray(self.class_frequencies, dtype=float)
            if np.any(freqs < 0) or freqs.sum() <= 0:
                raise ValueError("class_frequencies must be non-negative with a positive sum")
        lo, hi = self.object_count_range
        if not 0 <= lo <= hi:
            raise ValueError(f"bad object_count_range {self.object_count_range}")
        self.object_count_range = (int(lo), int(hi))
        self.color_cast = tuple(float(c) for c in self.color_cast)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown domain parameter(s): {sorted(unknown)}")
        return cls(**d)

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["object_count_range"] = list(self.object_count_range)
        d["color_cast"] = list(self.color_cast)
        return d


def default_source_params():
    return DomainParams()


def default_target_params():
    return DomainParams(
        hue_shift=0.02,
        saturation_scale=0.9,
        color_cast=(0.75, 1.0, 1.3),
        noise_sigma=0.02,
        blur_radius=0.5,
        brightness_gradient=0.8,
        max_range=6.0,
    )


@dataclass
class SceneCamera:
    height_above_floor: float = 1.4
    focal: float = 58.0
    cx: float = 31.5
    cy: float = 28.0
    gravity_up: tuple = (0.0, -1.0, 0.0)
    max_height: float = MAX_HEIGHT
    min_depth: float = MIN_DEPTH

    def __post_init__(self):
        up = np.asarray(self.gravity_up, dtype=float)
        norm = np.linalg.norm(up)
        if not np.isclose(norm, 1.0):
            raise ValueError(f"gravity_up must be a unit vector, got norm {norm}")


@dataclass
class Sample:
    id: str
    domain: str
    rgb: np.ndarray  # 3 x H x W, [0, 1]
    depth: np.ndarray  # H x W, metres
    hha: np.ndarray  # 3 x H x W, [0, 1]
    labels: np.ndarray  # H x W uint8
    boundaries: np.ndarray  # H x W uint8 {0, 1}
    instances: np.ndarray = field(default=None, repr=False)


# -- geometry -------------------------------------------------------------------


def encode_hha(depth, camera, max_range=None):
    """Three geometry channels in [0, 1]: disparity, height above floor, up-ness.

    Disparity is ``camera.min_depth / depth`` so it scales exactly with inverse
    depth; pixels beyond ``max_range`` read as zero disparity.  The third
    channel is ``(1 + cos a) / 2`` with ``a`` the angle between the
    depth-gradient surface normal and the up vector.
    """
    depth = np.asarray(depth, dtype=np.float64)
    if np.any(depth <= 0):
        raise ValueError("encode_hha needs strictly positive depth")
    h, w = depth.shape
    disparity = np.clip(camera.min_depth / depth, 0.0, 1.0)
    if max_range is not None:
        disparity[depth > max_range] = 0.0

    rows, cols = np.mgrid[0:h, 0:w].astype(np.float64)
    x = (cols - camera.cx) * depth / camera.focal
    y = (rows - camera.cy) * depth / camera.focal  # image y points down
    height = np.clip((camera.height_above_floor - y) / camera.max_height, 0.0, 1.0)

    pts = np.stack([x, y, depth])
    d_row = np.gradient(pts, axis=1)
    d_col = np.gradient(pts, axis=2)
    normal = np.cross(d_col, d_row, axis=0)
    facing = np.einsum("ihw,ihw->hw", normal, pts)
    normal = np.where(facing > 0, -normal, normal)
    length = np.linalg.norm(normal, axis=0)
    up = np.asarray(camera.gravity_up, dtype=np.float64)
    cos = np.einsum("i,ihw->hw", up, normal) / np.maximum(length, 1e-12)
    cos = np.where(length > 0, cos, 0.0)
    angle = np.clip((1.0 + cos) / 2.0, 0.0, 1.0)
    return np.stack([disparity, height, angle]).astype(np.float32)


def _layout(rng, params, size, num_classes):
    """Room geometry: per-pixel depth, instance id and class id."""
    h, w = size
    cam = SceneCamera(
        height_above_floor=rng.uniform(1.2, 1.6),
        focal=0.9 * w,
        cx=(w - 1) / 2.0,
        cy=rng.uniform(0.38, 0.5) * h,
    )
    ceiling_h = rng.uniform(2.6, 3.0)
    wall_z = rng.uniform(4.5, 8.0)
    f = cam.focal
    rows = np.arange(h, dtype=np.float64)[:, None] * np.ones((1, w))
    cols = np.ones((h, 1)) * np.arange(w, dtype=np.float64)[None, :]
    dr = rows - cam.cy

    depth = np.full((h, w), wall_z)
    inst = np.full((h, w), 1, dtype=np.int32)
    with np.errstate(divide="ignore"):
        z_floor = np.where(dr > 0, cam.height_above_floor * f / np.where(dr > 0, dr, 1), np.inf)
        z_ceil = np.where(dr < 0, (ceiling_h - cam.height_above_floor) * f / np.where(dr < 0, -dr, 1), np.inf)
    for iid, z in ((2, z_floor), (3, z_ceil)):
        closer = z < depth
        depth[closer] = z[closer]
        inst[closer] = iid
    inst_class = {1: 0, 2: 1, 3: 2}

    freqs = np.ones(num_classes) if params.class_frequencies is None else np.asarray(params.class_frequencies, float)
    if freqs.shape != (num_classes,):
        raise ValueError(f"class_frequencies has length {freqs.shape[0]}, expected {num_classes}")
    obj_freqs = freqs[3:]
    lo, hi = params.object_count_range
    n_obj = int(rng.integers(lo, hi + 1)) if obj_freqs.sum() > 0 else 0
    # all layout draws below happen whether or not a shape ends up visible,
    # so the stream stays aligned across parameter tweaks
    for k in range(n_obj):
        cls = 3 + int(rng.choice(len(obj_freqs), p=obj_freqs / obj_freqs.sum()))
        mask, zobj = _object_shape(rng, object_kind(cls), cam, wall_z, rows, cols, f)
        closer = mask & (zobj < depth)
        depth[closer] = zobj[closer]
        inst[closer] = 4 + k
        inst_class[4 + k] = cls
    labels = np.zeros((h, w), dtype=np.uint8)
    for iid, cls in inst_class.items():
        labels[inst == iid] = cls
    depth = np.clip(depth, MIN_DEPTH, MAX_DEPTH)
    return cam, depth, inst, labels


def _object_shape(rng, kind, cam, wall_z, rows, cols, f):
    h_cam = cam.height_above_floor
    zobj = np.full(rows.shape, np.inf)
    u = rng.uniform(size=6)
    if kind == "wall":
        width, height = 0.5 + 1.0 * u[0], 0.4 + 0.6 * u[1]
        center_y = 1.1 + 0.9 * u[2]
        z0 = wall_z - 0.03
        half_x = z0 * cam.cx / f
        x0 = (-half_x + width / 2) + u[3] * max(2 * half_x - width, 0.0)
        r_top = cam.cy + (h_cam - center_y - height / 2) * f / z0
        r_bot = cam.cy + (h_cam - center_y + height / 2) * f / z0
        c_l = cam.cx + (x0 - width / 2) * f / z0
        c_r = cam.cx + (x0 + width / 2) * f / z0
        mask = (rows >= r_top) & (rows <= r_bot) & (cols >= c_l) & (cols <= c_r)
        zobj[mask] = z0
        return mask, zobj

    dims = {
        "box": ((0.5, 1.2), (1.0, 2.0), (0.4, 0.6)),
        "bed": ((1.2, 2.0), (0.4, 0.6), (1.5, 2.2)),
        "table": ((0.8, 1.6), (0.7, 0.8), (0.6, 1.0)),
        "ellipse": ((0.4, 0.8), (0.5, 1.2), (0.4, 0.6)),
    }[kind]
    width = dims[0][0] + (dims[0][1] - dims[0][0]) * u[0]
    height = dims[1][0] + (dims[1][1] - dims[1][0]) * u[1]
    length = dims[2][0] + (dims[2][1] - dims[2][0]) * u[2]
    z0 = 1.5 + (wall_z - length - 1.6) * u[3] if wall_z - length - 1.6 > 0 else 1.5
    half_x = z0 * cam.cx / f
    x0 = (-half_x + width / 2) + u[4] * max(2 * half_x - width, 0.0)
    r_bot = cam.cy + h_cam * f / z0
    r_top = cam.cy + (h_cam - height) * f / z0
    c_l = cam.cx + (x0 - width / 2) * f / z0
    c_r = cam.cx + (x0 + width / 2) * f / z0
    in_cols = (cols >= c_l) & (cols <= c_r)

    if kind == "ellipse":
        rc, cc = (r_top + r_bot) / 2, (c_l + c_r) / 2
        ry, rx = max((r_bot - r_top) / 2, 0.5), max((c_r - c_l) / 2, 0.5)
        mask = ((rows - rc) / ry) ** 2 + ((cols - cc) / rx) ** 2 <= 1.0
        zobj[mask] = z0
        return mask, zobj

    if kind == "box":
        mask = (rows >= r_top) & (rows <= r_bot) & in_cols
        zobj[mask] = z0
        return mask, zobj

    # bed/table: a front face plus a horizontal top visible from above
    face_bottom = r_bot if kind == "bed" else cam.cy + (h_cam - height + 0.05) * f / z0
    face = (rows >= r_top) & (rows <= face_bottom) & in_cols
    zobj[face] = z0
    drop = h_cam - height  # camera height above the top surface
    if drop > 0:
        dr = rows - cam.cy
        with np.errstate(divide="ignore", invalid="ignore"):
            ztop = np.where(dr > 0, drop * f / np.where(dr > 0, dr, 1), np.inf)
        x_l = cam.cx + (x0 - width / 2) * f / ztop
        x_r = cam.cx + (x0 + width / 2) * f / ztop
        top = (ztop >= z0) & (ztop <= z0 + length) & (cols >= x_l) & (cols <= x_r) & ~face
        zobj[top] = ztop[top]
        face = face | top
    return face, zobj


def instance_boundaries(inst, depth):
    """1-px outlines: for each 4-neighbour pair with different instances mark the nearer pixel.

    Equal depths mark the pixel with the larger instance id.
    """
    out = np.zeros(inst.shape, dtype=np.uint8)
    for axis in (0, 1):
        a = inst.take(range(0, inst.shape[axis] - 1), axis=axis)
        b = inst.take(range(1, inst.shape[axis]), axis=axis)
        da = depth.take(range(0, depth.shape[axis] - 1), axis=axis)
        db = depth.take(range(1, depth.shape[axis]), axis=axis)
        diff = a != b
        mark_a = diff & ((da < db) | ((da == db) & (a > b)))
        mark_b = diff & ~mark_a
        if axis == 0:
            out[:-1][mark_a] = 1
            out[1:][mark_b] = 1
        else:
            out[:, :-1][mark_a] = 1
            out[:, 1:][mark_b] = 1
    return out


# -- appearance -----------------------------------------------------------------


def palette(num_classes, hue_shift=0.0, saturation_scale=1.0):
    """Base RGB colour per class; hues evenly spaced then rotated by ``hue_shift``."""
    colors = np.zeros((num_classes, 3))
    for k in range(num_classes):
        hue = (k / num_classes + hue_shift) % 1.0
        sat = (0.35 if k < 3 else 0.7) * saturation_scale
        val = 0.85 if k != 1 else 0.6
        colors[k] = colorsys.hsv_to_rgb(hue, min(sat, 1.0), val)
    return colors


def _render(layout_hha, labels, inst, num_classes, params, app_rng, noise_rng):
    h, w = labels.shape
    base = palette(num_classes, params.hue_shift, params.saturation_scale)
    n_inst = int(inst.max()) + 1
    jitter = app_rng.uniform(-0.08, 0.08, size=(n_inst, 3))
    texture = app_rng.normal(0.0, 1.0, size=(3, h, w))
    ramp_angle = app_rng.uniform(0, 2 * np.pi)

    inst_color = np.zeros((n_inst, 3))
    for iid in np.unique(inst):
        cls = int(labels[inst == iid][0])
        inst_color[iid] = base[cls] + jitter[iid] * base[cls]
    rgb = inst_color[inst].transpose(2, 0, 1)
    # lighting: up-facing surfaces brighter, far surfaces dimmer
    shade = 0.8 + 0.2 * layout_hha[2] + 0.15 * (layout_hha[0] - 0.3)
    rgb = rgb * shade[None]
    rgb = rgb + params.texture_sigma * texture
    rgb = rgb * np.asarray(params.color_cast)[:, None, None]
    if params.brightness_gradient:
        yy, xx = np.mgrid[0:h, 0:w]
        ramp = (np.cos(ramp_angle) * (xx / (w - 1) - 0.5) + np.sin(ramp_angle) * (yy / (h - 1) - 0.5))
        rgb = rgb * (1.0 + params.brightness_gradient * ramp)[None]
    if params.blur_radius > 0:
        rgb = np.stack([ndimage.gaussian_filter(c, params.blur_radius, mode="nearest") for c in rgb])
    if params.noise_sigma > 0:
        rgb = rgb + noise_rng.normal(0.0, params.noise_sigma, size=rgb.shape)
    return np.clip(rgb, 0.0, 1.0).astype(np.float32)


def _streams(rng):
    if isinstance(rng, np.random.Generator):
        seeds = rng.integers(0, 2**63 - 1, size=3)
        return [np.random.default_rng(int(s)) for s in seeds]
    base = np.random.SeedSequence(rng)
    return [np.random.default_rng(s) for s in base.spawn(3)]


def generate_scene(rng, params, size=(64, 64), num_classes=6, domain="source", sample_id=""):
    """Render one scene.

    ``rng`` is a ``numpy.random.Generator`` or anything ``SeedSequence``
    accepts.  Layout, appearance jitter and sensor noise use three separate
    streams, so two domains rendered from the same seed share geometry.
    """
    h, w = size
    if h < 32 or w < 32:
        raise ValueError(f"scene size must be at least 32x32, got {size}")
    if num_classes < 4:
        raise ValueError(f"need at least 4 classes, got {num_classes}")
    layout_rng, app_rng, noise_rng = _streams(rng)
    cam, depth, inst, labels = _layout(layout_rng, params, (h, w), num_classes)
    geometry = encode_hha(depth, cam)
    hha = encode_hha(depth, cam, max_range=params.max_range) if params.max_range else geometry
    boundaries = instance_boundaries(inst, depth)
    rgb = _render(geometry, labels, inst, num_classes, params, app_rng, noise_rng)
    if params.max_range:
        depth = np.minimum(depth, params.max_range)
    return Sample(
        id=sample_id,
        domain=domain,
        rgb=rgb,
        depth=depth.astype(np.float32),
        hha=hha,
        labels=labels,
        boundaries=boundaries,
        instances=inst,
    )


# -- dataset on disk ------------------------------------------------------------

SPLITS = (("source", "train"), ("target", "train"), ("target", "test"))


@dataclass
class DatasetConfig:
    seed: int = 0
    size: tuple = (64, 64)
    num_classes: int = 6
    n_source: int = 512
    n_target_train: int = 128
    n_target_test: int = 64
    source: DomainParams = field(default_factory=default_source_params)
    target: DomainParams = field(default_factory=default_target_params)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown dataset config field(s): {sorted(unknown)}")
        for dom in ("source", "target"):
            if dom in d:
                base = default_source_params() if dom == "source" else default_target_params()
                merged = base.to_dict()
                merged.update(d[dom])
                d[dom] = DomainParams.from_dict(merged)
        if "size" in d:
            d["size"] = tuple(int(v) for v in d["size"])
        cfg = cls(**d)
        for name in ("n_source", "n_target_train", "n_target_test"):
            if getattr(cfg, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        return cfg

    def to_dict(self):
        return {
            "seed": self.seed,
            "size": list(self.size),
            "num_classes": self.num_classes,
            "n_source": self.n_source,
            "n_target_train": self.n_target_train,
            "n_target_test": self.n_target_test,
            "source": self.source.to_dict(),
            "target": self.target.to_dict(),
        }


def sample_seed(seed, sample_id):
    return [int(seed), zlib.crc32(sample_id.encode("utf-8"))]


FILE_KINDS = ("rgb", "depth", "hha", "labels", "boundaries")


def write_sample(sample, directory):
    paths = {k: os.path.join(directory, f"{sample.id}_{k}.{'ppm' if k in ('rgb', 'hha') else 'pgm'}") for k in FILE_KINDS}
    netpbm.write_ppm(paths["rgb"], _to_u8(sample.rgb.transpose(1, 2, 0)))
    netpbm.write_ppm(paths["hha"], _to_u8(sample.hha.transpose(1, 2, 0)))
    depth_mm = np.clip(np.rint(sample.depth * 1000.0), 0, 65535).astype(np.uint16)
    netpbm.write_pgm(paths["depth"], depth_mm, maxval=65535)
    netpbm.write_pgm(paths["labels"], sample.labels.astype(np.uint8))
    netpbm.write_pgm(paths["boundaries"], (sample.boundaries > 0).astype(np.uint8) * 255)
    return paths


def _to_u8(x):
    return np.clip(np.rint(np.asarray(x) * 255.0), 0, 255).astype(np.uint8)


def write_dataset(config, out_dir):
    """Generate every split under ``out_dir`` and write ``manifest.json``."""
    if isinstance(config, dict):
        config = DatasetConfig.from_dict(config)
    counts = {("source", "train"): config.n_source, ("target", "train"): config.n_target_train,
              ("target", "test"): config.n_target_test}
    samples = []
    for domain, split in SPLITS:
        rel_dir = os.path.join(domain, split)
        abs_dir = os.path.join(out_dir, rel_dir)
        try:
            os.makedirs(abs_dir, exist_ok=True)
        except OSError as exc:
            raise OSError(f"cannot create {abs_dir}: {exc.strerror}") from exc
        params = config.source if domain == "source" else config.target
        prefix = "src" if domain == "source" else "tgt"
        for i in range(counts[(domain, split)]):
            sid = f"{prefix}_{split}_{i:05d}"
            sample = generate_scene(sample_seed(config.seed, sid), params, config.size, config.num_classes, domain, sid)
            try:
                paths = write_sample(sample, abs_dir)
            except OSError as exc:
                raise OSError(f"cannot write sample {sid} under {abs_dir}: {exc.strerror}") from exc
            entry = {
                "id": sid,
                "domain": domain,
                "split": split,
                "files": {k: os.path.relpath(p, out_dir).replace(os.sep, "/") for k, p in paths.items()},
            }
            if domain == "target" and split == "train":
                entry["labels_for_training"] = False
            samples.append(entry)
    manifest = {
        "version": MANIFEST_VERSION,
        "seed": config.seed,
        "K": config.num_classes,
        "class_names": class_names(config.num_classes),
        "size": list(config.size),
        "config": config.to_dict(),
        "samples": samples,
    }
    path = os.path.join(out_dir, "manifest.json")
    try:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(manifest, fh, indent=1, sort_keys=True)
            fh.write("\n")
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc.strerror}") from exc
    return manifest


def manifest_hash(out_dir):
    with open(os.path.join(out_dir, "manifest.json"), "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


class Dataset:
    """Lazy reader over a directory written by :func:`write_dataset`."""

    def __init__(self, root):
        self.root = root
        path = os.path.join(root, "manifest.json")
        try:
            with open(path, encoding="utf-8") as fh:
                self.manifest = json.load(fh)
        except FileNotFoundError:
            raise FileNotFoundError(f"no manifest.json in {root}") from None
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}: malformed manifest ({exc.msg} at line {exc.lineno} column {exc.colno})") from exc
        for key in ("K", "class_names", "samples"):
            if key not in self.manifest:
                raise ValueError(f"{path}: manifest missing field {key!r}")
        self.num_classes = int(self.manifest["K"])
        self.class_names = list(self.manifest["class_names"])

    def entries(self, split):
        """Manifest entries for ``split`` written as ``domain_split`` (e.g. ``target_test``)."""
        domain, _, part = split.partition("_")
        found = [e for e in self.manifest["samples"] if e["domain"] == domain and e["split"] == part]
        return found

    def splits(self):
        return sorted({f"{e['domain']}_{e['split']}" for e in self.manifest["samples"]})

    def entry(self, sample_id):
        for e in self.manifest["samples"]:
            if e["id"] == sample_id:
                return e
        raise KeyError(sample_id)

    def read(self, entry, kind):
        path = os.path.join(self.root, entry["files"][kind])
        raw = netpbm.read_pnm(path)
        if kind in ("rgb", "hha"):
            return raw.transpose(2, 0, 1).astype(np.float32) / 255.0
        if kind == "depth":
            return raw.astype(np.float32) / 1000.0
        if kind == "boundaries":
            return (raw > 127).astype(np.uint8)
        return raw.astype(np.uint8)

    def load(self, entry, kinds=("rgb", "hha", "labels", "boundaries")):
        return {k: self.read(entry, k) for k in kinds}


def class_distribution(dataset_dir, split):
    """Per-class pixel fraction over non-ignored pixels of ``split``."""
    ds = Dataset(dataset_dir)
    entries = ds.entries(split)
    if not entries:
        raise ValueError(f"split {split!r} is empty in {dataset_dir}")
    counts = np.zeros(ds.num_classes, dtype=np.int64)
    for e in entries:
        labels = ds.read(e, "labels")
        valid = labels[labels != IGNORE_INDEX]
        counts += np.bincount(valid, minlength=ds.num_classes)[: ds.num_classes]
    total = counts.sum()
    if total == 0:
        raise ValueError(f"split {split!r} has no labelled pixels")
    return counts / total
