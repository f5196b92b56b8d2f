"""Seeded synthetic histology-like scenes with four cell classes.

The stand-ins are: small round "eos" cells, "papillae" cells placed in tight
groups, tiny oval "rbc" cells, and large irregular "cluster" blobs. Each is
a star-shaped region with low-order boundary noise drawn on a textured
background.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..geometry import (Circle, Contour, circle_from_polygon, polygon_bbox, rasterize_polygon,
                        resample_polygon, signed_area)

CLASS_NAMES = ("Eos", "Papillae Eos", "RBC", "RBC Cluster")
DEFAULT_MIX = (0.35, 0.25, 0.25, 0.15)

# per class: radius range, boundary noise amplitude, aspect range, fill colour
_STYLE = {
    0: dict(r=(9.0, 13.0), noise=0.06, aspect=(1.0, 1.15), color=(235, 110, 60)),
    1: dict(r=(9.0, 12.0), noise=0.06, aspect=(1.0, 1.15), color=(140, 60, 175)),
    2: dict(r=(5.0, 7.5), noise=0.03, aspect=(1.35, 1.7), color=(205, 25, 35)),
    3: dict(r=(22.0, 32.0), noise=0.14, aspect=(1.0, 1.3), color=(110, 25, 45)),
}
_BOUNDARY_SAMPLES = 360
_MARGIN = 3.0


@dataclass
class SynthScene:
    image: np.ndarray                    # (H, W, 3) uint8
    circles: list[Circle]
    contours: list[Contour]              # resampled ground-truth rings
    polygons: list[np.ndarray]           # dense generating boundaries
    class_ids: list[int] = field(default_factory=list)

    def coco_entries(self, image_id: int, first_ann_id: int, file_name: str) -> tuple[dict, list]:
        h, w = self.image.shape[:2]
        img = {"id": image_id, "file_name": file_name, "width": w, "height": h}
        anns = []
        for k, (cid, ring) in enumerate(zip(self.class_ids, self.contours)):
            anns.append({
                "id": first_ann_id + k,
                "image_id": image_id,
                "category_id": cid + 1,
                "segmentation": [[round(float(v), 3) for v in ring.vertices.reshape(-1)]],
                "area": round(ring.area, 3),
                "bbox": [round(float(v), 3) for v in polygon_bbox(ring.vertices)],
            })
        return img, anns


def _class_counts(n: int, mix) -> list[int]:
    w = np.asarray(mix, dtype=np.float64)
    quota = n * w / w.sum()
    counts = np.floor(quota).astype(int)
    order = np.argsort(-(quota - counts), kind="stable")
    for i in order[: n - counts.sum()]:
        counts[i] += 1
    return counts.tolist()


def star_polygon(cx: float, cy: float, r: float, rng: np.random.Generator, noise: float,
                 aspect: float, n: int = _BOUNDARY_SAMPLES) -> np.ndarray:
    """Dense clockwise boundary of a rotated, harmonically perturbed ellipse."""
    theta = 2 * np.pi * np.arange(n) / n
    rot = rng.uniform(0, np.pi)
    a, b = r, r / aspect
    # ellipse radial distance at angle theta in the rotated frame
    t = theta - rot
    rad = a * b / np.sqrt((b * np.cos(t)) ** 2 + (a * np.sin(t)) ** 2)
    for k in (2, 3, 4, 5):
        amp = rng.uniform(0, noise) / (k - 1)
        rad = rad * (1 + amp * np.cos(k * theta + rng.uniform(0, 2 * np.pi)))
    pts = np.stack([cx + rad * np.cos(theta), cy + rad * np.sin(theta)], axis=1)
    return pts


def _fits(cx, cy, r, placed, size) -> bool:
    if cx - r < _MARGIN or cy - r < _MARGIN or cx + r > size - _MARGIN or cy + r > size - _MARGIN:
        return False
    return all(math.hypot(cx - x, cy - y) > r + q + _MARGIN for x, y, q in placed)


def _texture(rng: np.random.Generator, size: int) -> np.ndarray:
    base = np.array([232, 205, 222], dtype=np.float64)
    coarse = rng.normal(0, 1, (size // 16 + 1, size // 16 + 1, 3))
    coarse = np.kron(coarse, np.ones((16, 16, 1)))[:size, :size]
    fine = rng.normal(0, 1, (size, size, 3))
    return base + 6 * coarse + 4 * fine


def synth_scene(seed: int, size: int = 512, n_instances: int = 10, mix=DEFAULT_MIX,
                num_vertices: int = 128) -> SynthScene:
    """Generate one deterministic scene with exactly ``n_instances`` objects."""
    rng = np.random.default_rng(seed)
    counts = _class_counts(n_instances, mix)
    img = _texture(rng, size)
    placed: list[tuple[float, float, float]] = []
    specs: list[tuple[int, float, float, float]] = []

    def place(cls: int, near=None) -> bool:
        st = _STYLE[cls]
        for _ in range(400):
            r = rng.uniform(*st["r"])
            if near is None:
                cx, cy = rng.uniform(r, size - r, size=2)
            else:
                ang = rng.uniform(0, 2 * np.pi)
                d = near[2] + r + _MARGIN + rng.uniform(1.0, 4.0)
                cx, cy = near[0] + d * math.cos(ang), near[1] + d * math.sin(ang)
            # generous clearance covers boundary noise and aspect
            clearance = r * (1 + 2 * st["noise"])
            if _fits(cx, cy, clearance, placed, size):
                placed.append((cx, cy, clearance))
                specs.append((cls, cx, cy, r))
                return True
        return False

    for cls in (3, 0, 2):
        for _ in range(counts[cls]):
            if not place(cls):
                raise RuntimeError(f"could not place class {cls} object; lower n_instances")
    remaining = counts[1]
    while remaining:
        if not place(1):
            raise RuntimeError("could not place papillae group; lower n_instances")
        remaining -= 1
        anchor = placed[-1]
        for _ in range(min(remaining, int(rng.integers(1, 3)))):
            if place(1, near=anchor):
                remaining -= 1

    circles, contours, polys, cids = [], [], [], []
    for cls, cx, cy, r in specs:
        st = _STYLE[cls]
        poly = star_polygon(cx, cy, r, rng, st["noise"], rng.uniform(*st["aspect"]))
        if signed_area(poly) < 0:
            poly = poly[::-1]
        x, y, w, h = polygon_bbox(poly)
        x0, y0 = int(math.floor(x)), int(math.floor(y))
        mask = rasterize_polygon(poly, int(math.ceil(w)) + 2, int(math.ceil(h)) + 2, (x0, y0))
        ys, xs = np.nonzero(mask)
        ys, xs = ys + y0, xs + x0
        keep = (ys >= 0) & (ys < size) & (xs >= 0) & (xs < size)
        ys, xs = ys[keep], xs[keep]
        shade = np.asarray(st["color"], dtype=np.float64)
        img[ys, xs] = shade + rng.normal(0, 8, (len(ys), 3))
        polys.append(poly)
        circles.append(circle_from_polygon(poly, cls))
        contours.append(resample_polygon(poly, num_vertices, cls))
        cids.append(cls)
    image = np.clip(np.round(img), 0, 255).astype(np.uint8)
    return SynthScene(image, circles, contours, polys, cids)


def synth_dataset(seed: int, scenes: int, size: int = 512, n_instances: int = 10,
                  mix=DEFAULT_MIX, num_vertices: int = 128) -> list[SynthScene]:
    """``scenes`` scenes seeded ``seed, seed + 1, ...``."""
    return [synth_scene(seed + i, size, n_instances, mix, num_vertices) for i in range(scenes)]
