"""Center-heatmap target encoding and peak decoding for circle detections."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .geometry import Circle

DOWN_RATIO = 4
TRAIN_CT_SCORE = 0.05
EVAL_CT_SCORE = 0.2


@dataclass
class DetectionTargets:
    """Dense ground-truth maps plus the per-object lists the losses gather from.

    ``heatmap`` is (C, h, w); ``radius_map`` (1, h, w) and ``offset_map``
    (2, h, w) are only meaningful where ``center_mask`` (C, h, w) is set.
    ``indices`` holds one ``(class, y, x)`` row per supervised object.
    """
    heatmap: np.ndarray
    radius_map: np.ndarray
    offset_map: np.ndarray
    center_mask: np.ndarray
    indices: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), dtype=np.intp))
    radius: np.ndarray = field(default_factory=lambda: np.zeros(0))
    offset: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))

    @property
    def object_count(self) -> int:
        return int(self.center_mask.sum())


@dataclass
class DetectionOutput:
    circles: list[Circle]

    def __len__(self) -> int:
        return len(self.circles)


class CenterCollisionError(ValueError):
    pass


def gaussian_radius(height: float, width: float, min_overlap: float = 0.7) -> float:
    """Smallest corner-shift radius keeping box IoU above ``min_overlap``."""
    a1 = 1
    b1 = height + width
    c1 = width * height * (1 - min_overlap) / (1 + min_overlap)
    r1 = (b1 + math.sqrt(b1 ** 2 - 4 * a1 * c1)) / 2
    a2 = 4
    b2 = 2 * (height + width)
    c2 = (1 - min_overlap) * width * height
    r2 = (b2 + math.sqrt(b2 ** 2 - 4 * a2 * c2)) / 2
    a3 = 4 * min_overlap
    b3 = -2 * min_overlap * (height + width)
    c3 = (min_overlap - 1) * width * height
    r3 = (b3 + math.sqrt(b3 ** 2 - 4 * a3 * c3)) / 2
    return min(r1, r2, r3)


def gaussian_sigma(radius_out: float) -> float:
    """Kernel std for an object of radius ``radius_out`` in output-grid cells."""
    d = 2 * radius_out
    return max(1.0, gaussian_radius(d, d) / 3)


def draw_gaussian(channel: np.ndarray, cx: int, cy: int, sigma: float) -> None:
    """Max-composite a 3-sigma-truncated Gaussian centred on cell (cx, cy)."""
    h, w = channel.shape
    rad = int(math.ceil(3 * sigma))
    x0, x1 = max(cx - rad, 0), min(cx + rad + 1, w)
    y0, y1 = max(cy - rad, 0), min(cy + rad + 1, h)
    if x0 >= x1 or y0 >= y1:
        return
    xs = np.arange(x0, x1) - cx
    ys = np.arange(y0, y1) - cy
    d2 = ys[:, None] ** 2 + xs[None, :] ** 2
    g = np.exp(-d2 / (2 * sigma * sigma))
    g[d2 > (3 * sigma) ** 2] = 0.0
    np.maximum(channel[y0:y1, x0:x1], g, out=channel[y0:y1, x0:x1])


def output_size(input_w: int, input_h: int, down: int = DOWN_RATIO) -> tuple[int, int]:
    return -(-input_w // down), -(-input_h // down)


def encode_targets(gts: Sequence[Circle], input_w: int, input_h: int,
                   down: int = DOWN_RATIO, num_classes: int = 4,
                   ids: Sequence | None = None, dtype=np.float32) -> DetectionTargets:
    """Render per-class center heatmaps and radius/offset regression targets."""
    ow, oh = output_size(input_w, input_h, down)
    bad = []
    for k, c in enumerate(gts):
        if not (0 <= c.cx < input_w and 0 <= c.cy < input_h) or not 0 <= c.class_id < num_classes:
            bad.append(ids[k] if ids is not None else k)
    if bad:
        raise ValueError(f"annotations outside the image or class range: {bad}")
    hm = np.zeros((num_classes, oh, ow), dtype=dtype)
    rmap = np.zeros((1, oh, ow), dtype=dtype)
    omap = np.zeros((2, oh, ow), dtype=dtype)
    mask = np.zeros((num_classes, oh, ow), dtype=bool)
    idx, rad, off = [], [], []
    for c in gts:
        px, py = c.cx / down, c.cy / down
        ix, iy = int(math.floor(px)), int(math.floor(py))
        draw_gaussian(hm[c.class_id], ix, iy, gaussian_sigma(c.r / down))
        rmap[0, iy, ix] = c.r / down
        omap[:, iy, ix] = (px - ix, py - iy)
        if mask[c.class_id, iy, ix]:
            continue
        mask[c.class_id, iy, ix] = True
        idx.append((c.class_id, iy, ix))
        rad.append(c.r / down)
        off.append((px - ix, py - iy))
    return DetectionTargets(
        heatmap=hm, radius_map=rmap, offset_map=omap, center_mask=mask,
        indices=np.asarray(idx, dtype=np.intp).reshape(-1, 3),
        radius=np.asarray(rad, dtype=dtype),
        offset=np.asarray(off, dtype=dtype).reshape(-1, 2))


def extract_peaks(heatmap: np.ndarray, top_n: int = 100) -> list[tuple[int, int, int, float]]:
    """Local 3x3 maxima as ``(class, x, y, score)``, best first.

    A cell is a peak when it equals its neighbourhood maximum, so every cell of
    a plateau qualifies (zero cells never do); equal scores keep class-major row-major scan order.
    """
    hm = np.asarray(heatmap)
    C, h, w = hm.shape
    padded = np.pad(hm, ((0, 0), (1, 1), (1, 1)), constant_values=-np.inf)
    neigh = np.max(np.stack([padded[:, dy:dy + h, dx:dx + w]
                             for dy in range(3) for dx in range(3)]), axis=0)
    flat = np.flatnonzero((hm == neigh) & (hm > 0))
    scores = hm.reshape(-1)[flat]
    order = np.argsort(-scores, kind="stable")[:max(top_n, 0)]
    out = []
    for f in flat[order]:
        c, rem = divmod(int(f), h * w)
        y, x = divmod(rem, w)
        out.append((c, x, y, float(hm[c, y, x])))
    return out


def decode_circles(heatmap, radius_map, offset_map, top_n: int = 100,
                   ct_score: float = TRAIN_CT_SCORE, down: int = DOWN_RATIO,
                   min_radius: float = 1e-3) -> DetectionOutput:
    """Turn head outputs into scored circles in input-image coordinates."""
    heatmap = np.asarray(heatmap)
    radius_map = np.asarray(radius_map)
    offset_map = np.asarray(offset_map)
    if heatmap.shape[1:] != radius_map.shape[1:] or heatmap.shape[1:] != offset_map.shape[1:]:
        raise ValueError("head maps must share spatial extent")
    circles = []
    for c, x, y, s in extract_peaks(heatmap, top_n):
        if s < ct_score:
            break
        cx = (x + float(offset_map[0, y, x])) * down
        cy = (y + float(offset_map[1, y, x])) * down
        r = max(float(radius_map[0, y, x]) * down, min_radius)
        circles.append(Circle(cx, cy, r, c, s))
    return DetectionOutput(circles)


def check_separation(gts: Sequence[Circle], down: int = DOWN_RATIO) -> None:
    """Raise if two same-class objects land on one output cell."""
    seen = {}
    for k, c in enumerate(gts):
        key = (c.class_id, int(c.cx // down), int(c.cy // down))
        if key in seen:
            raise CenterCollisionError(
                f"objects {seen[key]} and {k} of class {c.class_id} share output cell "
                f"{key[1:]}; encoding would keep only one")
        seen[key] = k


def roundtrip_check(gts: Sequence[Circle], input_w: int, input_h: int,
                    down: int = DOWN_RATIO, num_classes: int = 4, top_n: int = 100,
                    ct_score: float = 0.3) -> list[Circle]:
    """Decode freshly encoded targets, feeding the exact maps back in."""
    check_separation(gts, down)
    t = encode_targets(gts, input_w, input_h, down, num_classes, dtype=np.float64)
    return decode_circles(t.heatmap, t.radius_map, t.offset_map, top_n, ct_score, down).circles
