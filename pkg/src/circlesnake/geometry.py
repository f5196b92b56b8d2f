"""Circle and contour primitives.

Coordinates are image pixels with x to the right and y downward. Pixel
``(row, col)`` covers ``[col, col+1) x [row, row+1)`` so its center sits at
``(col + 0.5, row + 0.5)``. "Clockwise" always means clockwise on screen,
which in these coordinates is a positive shoelace sum.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

DEFAULT_VERTICES = 128


@dataclass
class Circle:
    cx: float
    cy: float
    r: float
    class_id: int = 0
    score: float = 1.0

    def __post_init__(self):
        if not self.r > 0:
            raise ValueError(f"circle radius must be positive, got {self.r}")

    @property
    def area(self) -> float:
        return math.pi * self.r * self.r


@dataclass
class Contour:
    vertices: np.ndarray
    class_id: int = 0
    score: float = field(default=1.0, compare=False)

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 2)

    def __len__(self) -> int:
        return len(self.vertices)

    @property
    def area(self) -> float:
        return abs(signed_area(self.vertices))

    def bbox(self) -> tuple[float, float, float, float]:
        return polygon_bbox(self.vertices)


def signed_area(points) -> float:
    """Shoelace sum; positive for clockwise-on-screen rings (y down)."""
    p = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    x, y = p[:, 0], p[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def is_clockwise(points) -> bool:
    return signed_area(points) > 0


def polygon_bbox(points) -> tuple[float, float, float, float]:
    """Tight box as ``(x, y, width, height)``."""
    p = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    x0, y0 = p.min(axis=0)
    x1, y1 = p.max(axis=0)
    return float(x0), float(y0), float(x1 - x0), float(y1 - y0)


def circle_from_polygon(points, class_id: int = 0) -> Circle:
    """Bounding circle proposal target: box center, radius = half the longer box side."""
    x, y, w, h = polygon_bbox(points)
    return Circle(x + w / 2, y + h / 2, max(max(w, h) / 2, 1e-3), class_id)


def sample_circle_contour(c: Circle, n: int = DEFAULT_VERTICES) -> Contour:
    """``n`` equally spaced vertices starting at the top-most point, clockwise."""
    if n < 3:
        raise ValueError(f"need at least 3 vertices, got {n}")
    theta = -math.pi / 2 + 2 * math.pi * np.arange(n) / n
    v = np.stack([c.cx + c.r * np.cos(theta), c.cy + c.r * np.sin(theta)], axis=1)
    return Contour(v, c.class_id, c.score)


def _dedupe_ring(p: np.ndarray) -> np.ndarray:
    keep = np.any(np.abs(p - np.roll(p, 1, axis=0)) > 1e-12, axis=1)
    if not keep.any():
        return p[:1]
    return p[keep]


def resample_polygon(points, n: int = DEFAULT_VERTICES, class_id: int = 0) -> Contour:
    """Resample a closed ring to ``n`` vertices equally spaced by arc length.

    The result is clockwise and starts at the top-most input vertex (smallest
    y, then smallest x), matching the start of :func:`sample_circle_contour`.
    """
    if n < 3:
        raise ValueError(f"need at least 3 vertices, got {n}")
    p = _dedupe_ring(np.asarray(points, dtype=np.float64).reshape(-1, 2))
    if len(p) < 3:
        raise ValueError("polygon needs at least 3 distinct points")
    if signed_area(p) < 0:
        p = p[::-1]
    start = int(np.lexsort((p[:, 0], p[:, 1]))[0])
    p = np.roll(p, -start, axis=0)
    closed = np.vstack([p, p[:1]])
    seg = np.hypot(*np.diff(closed, axis=0).T)
    perimeter = seg.sum()
    if perimeter <= 0:
        raise ValueError("degenerate polygon with zero perimeter")
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    t = np.arange(n) * (perimeter / n)
    x = np.interp(t, cum, closed[:, 0])
    y = np.interp(t, cum, closed[:, 1])
    return Contour(np.stack([x, y], axis=1), class_id)


def circle_iou(a: Circle, b: Circle) -> float:
    """Exact intersection-over-union of two discs."""
    d = math.hypot(a.cx - b.cx, a.cy - b.cy)
    ra, rb = a.r, b.r
    if d >= ra + rb:
        return 0.0
    if d <= abs(ra - rb):
        small, big = min(ra, rb), max(ra, rb)
        return (small * small) / (big * big)
    ca = max(-1.0, min(1.0, (d * d + ra * ra - rb * rb) / (2 * d * ra)))
    cb = max(-1.0, min(1.0, (d * d + rb * rb - ra * ra) / (2 * d * rb)))
    alpha, beta = math.acos(ca), math.acos(cb)
    inter = (ra * ra * (alpha - math.sin(2 * alpha) / 2)
             + rb * rb * (beta - math.sin(2 * beta) / 2))
    union = math.pi * (ra * ra + rb * rb) - inter
    return min(1.0, max(0.0, inter / union))


def rasterize_polygon(points, width: int, height: int, origin=(0, 0)) -> np.ndarray:
    """Even-odd pixel-center fill of a closed ring.

    Returns a ``(height, width)`` boolean array whose pixel ``(i, j)`` is the
    canvas pixel ``(origin_y + i, origin_x + j)``.
    """
    mask = np.zeros((height, width), dtype=bool)
    p = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if len(p) < 3 or width < 1 or height < 1:
        return mask
    ox, oy = origin
    x0, y0 = p[:, 0] - ox, p[:, 1] - oy
    x1, y1 = np.roll(x0, -1), np.roll(y0, -1)
    r_lo = max(int(math.floor(y0.min() - 0.5)), 0)
    r_hi = min(int(math.ceil(y0.max() - 0.5)) + 1, height)
    if r_lo >= r_hi:
        return mask
    yc = np.arange(r_lo, r_hi, dtype=np.float64)[:, None] + 0.5
    crosses = (y0[None, :] <= yc) != (y1[None, :] <= yc)
    rows, edges = np.nonzero(crosses)
    if rows.size == 0:
        return mask
    ya, yb = y0[edges], y1[edges]
    xa, xb = x0[edges], x1[edges]
    xi = xa + (yc[rows, 0] - ya) * (xb - xa) / (yb - ya)
    # first column whose center lies strictly right of the crossing
    s = np.floor(xi - 0.5).astype(np.int64) + 1
    s = np.clip(s, 0, width)
    diff = np.zeros((r_hi - r_lo, width + 1), dtype=np.int32)
    np.add.at(diff, (rows, s), 1)
    mask[r_lo:r_hi] = (np.cumsum(diff[:, :width], axis=1) & 1).astype(bool)
    return mask


def rasterize_contour(c: Contour, width: int, height: int) -> np.ndarray:
    """Binary mask of ``c`` on a ``width`` x ``height`` canvas."""
    if width < 1 or height < 1:
        raise ValueError("canvas must be at least 1x1")
    return rasterize_polygon(c.vertices, width, height)


def polygon_mask_iou(a, b) -> tuple[float, int, int, int]:
    """Rasterized IoU of two rings on their joint bounding region.

    Returns ``(iou, intersection, area_a, area_b)`` in pixel counts.
    """
    pa = np.asarray(a, dtype=np.float64).reshape(-1, 2)
    pb = np.asarray(b, dtype=np.float64).reshape(-1, 2)
    lo = np.floor(np.minimum(pa.min(axis=0), pb.min(axis=0))).astype(int) - 1
    hi = np.ceil(np.maximum(pa.max(axis=0), pb.max(axis=0))).astype(int) + 1
    w, h = int(hi[0] - lo[0]), int(hi[1] - lo[1])
    ma = rasterize_polygon(pa, w, h, origin=lo)
    mb = rasterize_polygon(pb, w, h, origin=lo)
    inter = int(np.count_nonzero(ma & mb))
    na, nb = int(ma.sum()), int(mb.sum())
    union = na + nb - inter
    return (inter / union if union else 0.0), inter, na, nb


def clip_polygon_to_rect(points, x0: float, y0: float, x1: float, y1: float) -> np.ndarray:
    """Sutherland-Hodgman clip of a ring to the axis-aligned box ``[x0,x1] x [y0,y1]``.

    Concave rings may come back with zero-width bridges; the enclosed area is
    still exact.
    """
    out = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    planes = ((0, x0, True), (0, x1, False), (1, y0, True), (1, y1, False))
    for axis, bound, keep_greater in planes:
        if len(out) == 0:
            break
        cur = out
        prev = np.roll(cur, 1, axis=0)
        inside_c = cur[:, axis] >= bound if keep_greater else cur[:, axis] <= bound
        inside_p = prev[:, axis] >= bound if keep_greater else prev[:, axis] <= bound
        res = []
        for c, p, ic, ip in zip(cur, prev, inside_c, inside_p):
            if ic != ip:
                t = (bound - p[axis]) / (c[axis] - p[axis])
                res.append(p + t * (c - p))
            if ic:
                res.append(c)
        out = np.array(res).reshape(-1, 2)
    return out
