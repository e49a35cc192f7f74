"""Binary PPM (P6) and PGM (P5) reading and writing.

Samples with maxval > 255 are stored as big-endian 16-bit words, as netpbm
requires.
"""
from __future__ import annotations

import os

import numpy as np


def write_pgm(path, image, maxval=255):
    image = np.asarray(image)
    if image.ndim != 2:
        raise ValueError(f"PGM needs a 2-d array, got shape {image.shape}")
    _write(path, b"P5", image, maxval)


def write_ppm(path, image, maxval=255):
    """Write an H x W x 3 array."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"PPM needs an H x W x 3 array, got shape {image.shape}")
    _write(path, b"P6", image, maxval)


def _write(path, magic, image, maxval):
    if not 0 < maxval < 65536:
        raise ValueError(f"maxval must be in [1, 65535], got {maxval}")
    if image.min(initial=0) < 0 or image.max(initial=0) > maxval:
        raise ValueError(f"pixel values outside [0, {maxval}]")
    h, w = image.shape[:2]
    dtype = ">u2" if maxval > 255 else "u1"
    header = b"%s\n%d %d\n%d\n" % (magic, w, h, maxval)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(image, dtype=dtype).tobytes())


def _tokens(buf, start, count):
    out = []
    i = start
    while len(out) < count:
        while i < len(buf) and buf[i:i + 1].isspace():
            i += 1
        if buf[i:i + 1] == b"#":
            while i < len(buf) and buf[i:i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        j = i
        while j < len(buf) and not buf[j:j + 1].isspace():
            j += 1
        if j == i:
            raise ValueError("truncated netpbm header")
        out.append(buf[i:j])
        i = j
    return out, i + 1  # exactly one whitespace byte precedes the raster


def read_pnm(path):
    """Return (H, W) for P5 or (H, W, 3) for P6 as uint8/uint16."""
    with open(path, "rb") as fh:
        buf = fh.read()
    magic = buf[:2]
    if magic not in (b"P5", b"P6"):
        raise ValueError(f"{os.fspath(path)}: not a binary PGM/PPM file (magic {magic!r})")
    (w, h, maxval), offset = _tokens(buf, 2, 3)
    w, h, maxval = int(w), int(h), int(maxval)
    channels = 3 if magic == b"P6" else 1
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    n = w * h * channels
    raster = np.frombuffer(buf, dtype=dtype, count=n, offset=offset)
    shape = (h, w, 3) if channels == 3 else (h, w)
    return raster.reshape(shape).astype(np.uint16 if maxval > 255 else np.uint8)
