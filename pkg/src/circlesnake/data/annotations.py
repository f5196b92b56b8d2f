"""Slide-level annotation JSON as exported from an annotation tool.

Two layouts are accepted: a plain list of ``{"class": name, "points": [[x, y], ...]}``
records, or GeoJSON features whose ``properties.classification.name`` holds
the class and whose geometry is a Polygon or MultiPolygon.
"""
from __future__ import annotations

import json
from typing import Sequence

import numpy as np


class AnnotationFormatError(ValueError):
    pass


def _class_index(name: str, class_names: Sequence[str]) -> int:
    lookup = {n.lower(): i for i, n in enumerate(class_names)}
    # tolerate the spelling variants seen in exports
    lookup.setdefault("papillas eos", lookup.get("papillae eos", -1))
    key = name.strip().lower()
    if key not in lookup or lookup[key] < 0:
        raise AnnotationFormatError(f"unknown class {name!r}")
    return lookup[key]


def parse_annotations(text: str, class_names: Sequence[str], source: str = "<string>"
                      ) -> list[tuple[int, np.ndarray]]:
    """Return ``(class_id, ring)`` pairs; rings are (M, 2) float arrays in slide pixels."""
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise AnnotationFormatError(f"{source}: invalid JSON ({exc})") from exc
    if isinstance(data, dict) and data.get("type") == "FeatureCollection":
        data = data.get("features", [])
    if not isinstance(data, list):
        raise AnnotationFormatError(f"{source}: expected a list of annotations")
    out, errors = [], []
    for k, rec in enumerate(data):
        try:
            if "geometry" in rec:
                props = rec.get("properties") or {}
                cls = (props.get("classification") or {}).get("name") or props.get("class")
                geom = rec["geometry"]
                if geom.get("type") == "Polygon":
                    rings = [geom["coordinates"][0]]
                elif geom.get("type") == "MultiPolygon":
                    rings = [p[0] for p in geom["coordinates"]]
                else:
                    raise AnnotationFormatError(f"unsupported geometry {geom.get('type')}")
            else:
                cls = rec.get("class") or rec.get("name")
                rings = [rec["points"]]
            if cls is None:
                raise AnnotationFormatError("missing class name")
            cid = _class_index(cls, class_names)
            for ring in rings:
                arr = np.asarray(ring, dtype=np.float64).reshape(-1, 2)
                if len(arr) > 1 and np.allclose(arr[0], arr[-1]):
                    arr = arr[:-1]
                if len(arr) < 3:
                    raise AnnotationFormatError("polygon with fewer than 3 points")
                out.append((cid, arr))
        except (KeyError, TypeError, ValueError) as exc:
            errors.append(f"record {k}: {exc}")
    if errors:
        raise AnnotationFormatError(f"{source}: " + "; ".join(errors))
    return out


def dump_annotations(polygons, class_names: Sequence[str]) -> str:
    """Inverse of :func:`parse_annotations` in the plain-list layout."""
    return json.dumps([{"class": class_names[c], "points": np.asarray(p).round(3).tolist()}
                       for c, p in polygons])
