import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from circlesnake.geometry import Circle
from circlesnake.heatmap import (DOWN_RATIO, EVAL_CT_SCORE, TRAIN_CT_SCORE, CenterCollisionError,
                                 decode_circles, encode_targets, extract_peaks, gaussian_radius,
                                 gaussian_sigma, roundtrip_check)


def test_constants():
    assert DOWN_RATIO == 4
    assert (TRAIN_CT_SCORE, EVAL_CT_SCORE) == (0.05, 0.2)


def test_center_cell_and_offset():
    t = encode_targets([Circle(41.0, 22.0, 6.0, 1)], 64, 64)
    assert t.indices.tolist() == [[1, 5, 10]]
    assert np.allclose(t.offset, [[0.25, 0.5]])
    assert t.heatmap[1, 5, 10] == 1.0
    assert t.radius_map[0, 5, 10] == pytest.approx(1.5)
    assert t.object_count == 1


def test_sigma_offset_value():
    c = Circle(64.0, 64.0, 40.0)
    t = encode_targets([c], 128, 128, dtype=np.float64)
    sigma = gaussian_sigma(c.r / 4)
    d = int(round(sigma))
    # one axis at integer distance d: value exp(-d^2 / (2 sigma^2)); at d = sigma it is exp(-1/2)
    assert t.heatmap[0, 16, 16 + d] == pytest.approx(math.exp(-d * d / (2 * sigma * sigma)), abs=1e-7)
    t1 = encode_targets([Circle(64.0, 64.0, 2.0)], 128, 128, dtype=np.float64)
    assert gaussian_sigma(0.5) == 1.0
    assert t1.heatmap[0, 16, 17] == pytest.approx(math.exp(-0.5), abs=1e-6)


def test_gaussian_radius_positive_and_growing():
    vals = [gaussian_radius(2 * r, 2 * r) for r in (1, 2, 4, 8)]
    assert all(v > 0 for v in vals) and vals == sorted(vals)


def test_out_of_image_rejected_with_ids():
    with pytest.raises(ValueError, match="17"):
        encode_targets([Circle(10, 10, 3), Circle(80, 10, 3)], 64, 64, ids=[3, 17])


def test_same_channel_overlap_uses_max():
    a = encode_targets([Circle(30, 30, 12)], 64, 64, dtype=np.float64).heatmap
    b = encode_targets([Circle(38, 30, 12)], 64, 64, dtype=np.float64).heatmap
    both = encode_targets([Circle(30, 30, 12), Circle(38, 30, 12)], 64, 64, dtype=np.float64).heatmap
    assert np.array_equal(both, np.maximum(a, b))
    assert both.max() == 1.0


def test_single_blob_single_peak():
    hm = encode_targets([Circle(50, 30, 10, 2)], 128, 128).heatmap
    assert extract_peaks(hm, 10) == [(2, 12, 7, 1.0)]


def test_two_blobs_top_one():
    hm = np.zeros((1, 20, 20))
    hm[0, 3, 3], hm[0, 15, 12] = 0.6, 0.9
    assert extract_peaks(hm, 1) == [(0, 12, 15, 0.9)]


def test_plateau_scan_order():
    hm = np.full((1, 5, 5), 0.3)
    assert [(x, y) for _, x, y, _ in extract_peaks(hm, 3)] == [(0, 0), (1, 0), (2, 0)]


def test_decode_direct_example():
    hm = np.zeros((1, 20, 20))
    hm[0, 12, 10] = 0.9
    rmap = np.zeros((1, 20, 20))
    rmap[0, 12, 10] = 5
    omap = np.zeros((2, 20, 20))
    omap[:, 12, 10] = (0.3, 0.4)
    (c,) = decode_circles(hm, rmap, omap, ct_score=0.5, down=1).circles
    assert (c.cx, c.cy, c.r, c.score) == (pytest.approx(10.3), pytest.approx(12.4), 5, 0.9)
    assert decode_circles(hm, rmap, omap, ct_score=0.95, down=1).circles == []


def test_collision_is_diagnosed():
    with pytest.raises(CenterCollisionError):
        roundtrip_check([Circle(10, 10, 5), Circle(11, 11, 5)], 64, 64)


def test_empty_roundtrip():
    assert roundtrip_check([], 64, 64) == []


scene = st.lists(st.tuples(st.integers(0, 3), st.floats(8, 248), st.floats(8, 248), st.floats(3, 30)),
                 max_size=8)


@given(scene, st.integers(1, 50))
def test_peaks_sorted_and_capped(items, top_n):
    gts = [Circle(x, y, r, c) for c, x, y, r in items]
    hm = encode_targets(gts, 256, 256).heatmap
    peaks = extract_peaks(hm, top_n)
    assert len(peaks) <= top_n
    scores = [p[3] for p in peaks]
    assert scores == sorted(scores, reverse=True)


@given(scene)
def test_heatmap_bounded_and_exact_at_centers(items):
    gts = [Circle(x, y, r, c) for c, x, y, r in items]
    t = encode_targets(gts, 256, 256)
    assert t.heatmap.min() >= 0 and t.heatmap.max() <= 1
    for c, y, x in t.indices:
        assert t.heatmap[c, y, x] == 1.0
    assert t.object_count == int(t.center_mask.sum())
    # zero outside 3-sigma supports
    support = np.zeros_like(t.center_mask)
    for g in gts:
        s = gaussian_sigma(g.r / 4)
        rad = int(math.ceil(3 * s))
        ix, iy = int(g.cx // 4), int(g.cy // 4)
        support[g.class_id, max(iy - rad, 0):iy + rad + 1, max(ix - rad, 0):ix + rad + 1] = True
    assert not t.heatmap[~support].any()
