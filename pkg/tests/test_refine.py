from collections import Counter, deque

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from mcseg.refine import (
    RegionMap,
    label_regions,
    refine,
    refine_segmentation,
    sobel_edges,
    threshold_boundary,
)


def bfs_components(mask):
    """Flood fill of non-boundary pixels; ids by raster-order first touch."""
    h, w = mask.shape
    ids = np.zeros((h, w), int)
    nxt = 0
    for y in range(h):
        for x in range(w):
            if mask[y, x] or ids[y, x]:
                continue
            nxt += 1
            ids[y, x] = nxt
            q = deque([(y, x)])
            while q:
                cy, cx = q.popleft()
                for dy, dx in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                    ny, nx = cy + dy, cx + dx
                    if 0 <= ny < h and 0 <= nx < w and not mask[ny, nx] and not ids[ny, nx]:
                        ids[ny, nx] = nxt
                        q.append((ny, nx))
    return ids, nxt


def vote_oracle(seg, ids, max_frac=1 / 3):
    out = seg.copy()
    for rid in range(1, ids.max() + 1):
        where = list(zip(*np.nonzero(ids == rid)))
        if not where or len(where) > max_frac * seg.size:
            continue
        counts = Counter(int(seg[p]) for p in where)
        top = max(counts.values())
        winner = min(c for c, n in counts.items() if n == top)
        for p in where:
            out[p] = winner
    return out


def test_threshold_examples():
    np.testing.assert_array_equal(threshold_boundary(np.array([0.4, 0.6]), 0.5), [False, True])
    assert threshold_boundary(np.array([0.0, 0.3]), 1e-12).tolist() == [False, True]
    binary = np.array([0.0, 1.0, 1.0, 0.0])
    for t in (0.01, 0.5, 1.0):
        np.testing.assert_array_equal(threshold_boundary(binary, t), binary.astype(bool))
    with pytest.raises(ValueError):
        threshold_boundary(binary, 0.0)


def test_label_regions_examples():
    r = label_regions(np.zeros((5, 6), bool))
    assert r.count == 1 and np.all(r.ids == 1)
    mask = np.zeros((6, 6), bool)
    mask[3] = True
    r = label_regions(mask)
    assert r.count == 2 and np.all(r.ids[3] == 0) and np.all(r.ids[:3] == 1) and np.all(r.ids[4:] == 2)


def test_diagonal_boundary_does_not_leak_with_four_connectivity():
    mask = np.eye(5, dtype=bool)
    assert label_regions(mask).count == 2


@settings(max_examples=60, deadline=None)
@given(hnp.arrays(np.bool_, (16, 16)))
def test_label_regions_matches_flood_fill(mask):
    r = label_regions(mask)
    ids, count = bfs_components(mask)
    assert r.count == count
    np.testing.assert_array_equal(r.ids, ids)


def test_vote_examples():
    seg = np.array([[2, 2], [2, 7]])
    ids = np.ones((2, 2), int)
    # area 4 of a 4-pixel image exceeds one third, so use a larger canvas
    big_seg = np.zeros((4, 4), int)
    big_seg[:2, :2] = seg
    big_ids = np.full((4, 4), 2)
    big_ids[:2, :2] = ids
    big_ids[2:, :] = 0
    out = refine_segmentation(big_seg, RegionMap(big_ids, 2))
    np.testing.assert_array_equal(out[:2, :2], 2)
    whole = np.arange(81).reshape(9, 9) % 3
    np.testing.assert_array_equal(refine_segmentation(whole, RegionMap(np.ones((9, 9), int), 1)), whole)


def test_vote_matches_counting_oracle_on_constructed_case():
    mask = np.zeros((16, 16), bool)
    mask[:, 5] = True
    mask[8, 6:] = True
    r = label_regions(mask)
    assert r.count == 3
    rng = np.random.default_rng(0)
    seg = rng.integers(0, 4, size=(16, 16))
    np.testing.assert_array_equal(refine_segmentation(seg, r), vote_oracle(seg, r.ids))


@settings(max_examples=100, deadline=None)
@given(hnp.arrays(np.bool_, (12, 12)), hnp.arrays(np.int64, (12, 12), elements=st.integers(0, 4)))
def test_refinement_properties(mask, seg):
    r = label_regions(mask)
    once = refine_segmentation(seg, r)
    np.testing.assert_array_equal(once, vote_oracle(seg, r.ids))
    np.testing.assert_array_equal(refine_segmentation(once, r), once)  # idempotent
    keep = (r.ids == 0) | (r.areas()[r.ids] > seg.size / 3)
    np.testing.assert_array_equal(once[keep], seg[keep])
    assert set(np.unique(once)) <= set(np.unique(seg))


def test_refine_with_true_boundaries_fixes_minority_noise():
    gt = np.zeros((12, 12), int)
    gt[:, 4:] = 1
    gt[6:, 4:] = 2
    bnd = np.zeros((12, 12))
    bnd[:, 3] = 1.0
    bnd[5, 4:] = 1.0
    seg = gt.copy()
    seg[1, 1], seg[8, 8], seg[2, 9] = 2, 0, 0
    out = refine(seg, bnd, 0.5)
    voted = bnd < 0.5
    np.testing.assert_array_equal(out[voted], gt[voted])


def test_sobel_examples():
    assert np.all(sobel_edges(np.full((3, 6, 6), 0.4)) == 0)
    img = np.zeros((3, 6, 6))
    img[:, :, 3:] = 1.0
    e = sobel_edges(img)
    assert e.max() == 1.0
    assert np.all(e[:, 2] == 1.0) and np.all(e[:, 3] == 1.0) and np.all(e[:, 0] == 0)


def test_sobel_matches_direct_stencil_on_ramp():
    gray = np.add.outer(np.arange(5.0), 2 * np.arange(5.0)) / 20.0
    img = np.stack([gray] * 3)
    padded = np.pad(gray, 1, mode="edge")
    mag = np.zeros((5, 5))
    for y in range(5):
        for x in range(5):
            p = padded[y:y + 3, x:x + 3]
            gx = (p[0, 2] + 2 * p[1, 2] + p[2, 2]) - (p[0, 0] + 2 * p[1, 0] + p[2, 0])
            gy = (p[2, 0] + 2 * p[2, 1] + p[2, 2]) - (p[0, 0] + 2 * p[0, 1] + p[0, 2])
            mag[y, x] = np.hypot(gx, gy)
    np.testing.assert_allclose(sobel_edges(img), mag / mag.max(), rtol=1e-12)
