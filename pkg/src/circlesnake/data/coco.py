"""COCO instance-segmentation documents: strict reading, writing and results files."""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from ..geometry import polygon_bbox, signed_area

DEFAULT_CATEGORIES = [
    {"id": 1, "name": "Eos", "supercategory": "cell"},
    {"id": 2, "name": "Papillae Eos", "supercategory": "cell"},
    {"id": 3, "name": "RBC", "supercategory": "cell"},
    {"id": 4, "name": "RBC Cluster", "supercategory": "cell"},
]


class CocoFormatError(ValueError):
    """Raised with every offending annotation id when a document is invalid."""

    def __init__(self, message: str, annotation_ids=()):
        super().__init__(message)
        self.annotation_ids = list(annotation_ids)


@dataclass
class CocoDocument:
    info: dict = field(default_factory=dict)
    images: list[dict] = field(default_factory=list)
    annotations: list[dict] = field(default_factory=list)
    categories: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"info": self.info, "images": self.images,
                "annotations": self.annotations, "categories": self.categories}

    def category_index(self) -> dict[int, int]:
        """COCO category id -> contiguous 0-based class id (sorted by category id)."""
        return {c["id"]: i for i, c in enumerate(sorted(self.categories, key=lambda c: c["id"]))}

    def annotations_for(self, image_id) -> list[dict]:
        return [a for a in self.annotations if a["image_id"] == image_id]

    def polygons_for(self, image_id) -> list[tuple[int, np.ndarray]]:
        """``(class_id, ring)`` pairs for an image, using the largest polygon of each annotation."""
        idx = self.category_index()
        out = []
        for a in self.annotations_for(image_id):
            rings = [np.asarray(s, dtype=np.float64).reshape(-1, 2) for s in a["segmentation"]]
            ring = max(rings, key=lambda r: abs(signed_area(r)))
            out.append((idx[a["category_id"]], ring))
        return out


def annotation_from_ring(ann_id: int, image_id: int, category_id: int, ring) -> dict:
    ring = np.asarray(ring, dtype=np.float64).reshape(-1, 2)
    return {
        "id": ann_id,
        "image_id": image_id,
        "category_id": category_id,
        "segmentation": [[round(float(v), 3) for v in ring.reshape(-1)]],
        "area": round(abs(signed_area(ring)), 3),
        "bbox": [round(float(v), 3) for v in polygon_bbox(ring)],
    }


def validate(doc: CocoDocument) -> None:
    """Reject documents with dangling ids, malformed polygons or inconsistent box/area."""
    image_ids = {im["id"] for im in doc.images}
    cat_ids = {c["id"] for c in doc.categories}
    problems: dict = {}
    for a in doc.annotations:
        aid = a.get("id")
        reasons = []
        if a.get("image_id") not in image_ids:
            reasons.append(f"unknown image_id {a.get('image_id')}")
        if a.get("category_id") not in cat_ids:
            reasons.append(f"unknown category_id {a.get('category_id')}")
        seg = a.get("segmentation")
        rings = []
        if not isinstance(seg, list) or not seg:
            reasons.append("missing polygon segmentation")
        else:
            for poly in seg:
                if not isinstance(poly, list) or len(poly) % 2 or len(poly) < 6 or \
                        not all(isinstance(v, (int, float)) for v in poly):
                    reasons.append("malformed polygon (odd coordinate count or < 3 points)")
                    break
                rings.append(np.asarray(poly, dtype=np.float64).reshape(-1, 2))
        if rings and len(rings) == len(seg):
            pts = np.concatenate(rings)
            bbox = polygon_bbox(pts)
            given = a.get("bbox")
            if given is None or len(given) != 4 or \
                    max(abs(float(g) - b) for g, b in zip(given, bbox)) > 1.0:
                reasons.append(f"bbox {given} does not match polygon extent {bbox}")
            area = sum(abs(signed_area(r)) for r in rings)
            given_area = a.get("area")
            if given_area is None or abs(float(given_area) - area) > 0.01 * max(area, 1e-9):
                reasons.append(f"area {given_area} does not match polygon area {area:.3f}")
        if reasons:
            problems[aid] = reasons
    ids = [a.get("id") for a in doc.annotations]
    dupes = sorted({i for i in ids if ids.count(i) > 1}, key=str)
    for d in dupes:
        problems.setdefault(d, []).append("duplicate annotation id")
    if problems:
        detail = "; ".join(f"annotation {k}: {', '.join(v)}" for k, v in problems.items())
        raise CocoFormatError(f"invalid COCO document: {detail}", list(problems))


def read_coco(text: str) -> CocoDocument:
    data = json.loads(text)
    if not isinstance(data, dict):
        raise CocoFormatError("COCO document must be a JSON object")
    doc = CocoDocument(
        info=dict(data.get("info") or {}),
        images=list(data.get("images") or []),
        annotations=list(data.get("annotations") or []),
        categories=list(data.get("categories") or []),
    )
    validate(doc)
    return doc


def write_coco(doc: CocoDocument, indent: int | None = 2) -> str:
    return json.dumps(doc.to_dict(), indent=indent)


def results_entries(image_id: int, predictions, category_ids=None) -> list[dict]:
    """COCO results records for one image's :class:`InstancePrediction` list.

    Each record carries the polygon, the score and the detected circle.
    """
    out = []
    for p in predictions:
        cls = p.circle.class_id
        cat = category_ids[cls] if category_ids else cls + 1
        ring = p.contour.vertices
        out.append({
            "image_id": image_id,
            "category_id": cat,
            "segmentation": [[round(float(v), 3) for v in ring.reshape(-1)]],
            "bbox": [round(float(v), 3) for v in polygon_bbox(ring)],
            "score": round(float(p.score), 6),
            "circle": [round(float(p.circle.cx), 3), round(float(p.circle.cy), 3),
                       round(float(p.circle.r), 3)],
        })
    return out


def read_results(text: str) -> list[dict]:
    """Parse a results file, checking every record carries a usable polygon and score."""
    data = json.loads(text)
    if not isinstance(data, list):
        raise CocoFormatError("results document must be a JSON list")
    bad = []
    for k, r in enumerate(data):
        seg = r.get("segmentation")
        ok = (isinstance(seg, list) and seg and all(isinstance(p, list) and len(p) % 2 == 0
                                                   and len(p) >= 6 for p in seg)
              and isinstance(r.get("score"), (int, float)) and "image_id" in r
              and "category_id" in r)
        if not ok:
            bad.append(k)
    if bad:
        raise CocoFormatError(f"malformed result records at positions {bad}", bad)
    return data
