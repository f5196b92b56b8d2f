"""Loading registered COCO datasets into training samples and evaluation ground truth."""
from __future__ import annotations

import os

import numpy as np
from PIL import Image

from ..geometry import Contour, circle_from_polygon, resample_polygon
from ..model import InstancePrediction, ModelConfig, Sample
from .coco import CocoDocument, read_coco


def load_image(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"))


def save_png(path, array: np.ndarray) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    Image.fromarray(np.asarray(array)).save(path, format="PNG")


def read_coco_file(path) -> CocoDocument:
    with open(path) as fh:
        return read_coco(fh.read())


def ground_truth(doc: CocoDocument, image_id, num_vertices: int = 128) -> list[InstancePrediction]:
    """Ground-truth instances of one image in the same shape as predictions."""
    out = []
    for cls, ring in doc.polygons_for(image_id):
        circle = circle_from_polygon(ring, cls)
        out.append(InstancePrediction(circle, resample_polygon(ring, num_vertices, cls), 1.0))
    return out


def gt_as_exact_polygons(doc: CocoDocument, image_id) -> list[InstancePrediction]:
    """Like :func:`ground_truth` but keeping the stored polygon vertices unchanged."""
    out = []
    for cls, ring in doc.polygons_for(image_id):
        out.append(InstancePrediction(circle_from_polygon(ring, cls), Contour(ring, cls), 1.0))
    return out


def load_samples(doc: CocoDocument, data_root: str, cfg: ModelConfig) -> list[Sample]:
    samples = []
    for im in sorted(doc.images, key=lambda i: i["id"]):
        image = load_image(os.path.join(data_root, im["file_name"]))
        samples.append(Sample.from_polygons(image, doc.polygons_for(im["id"]), cfg, im["id"]))
    return samples
