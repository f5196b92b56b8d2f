"""Shared builders for the test suite."""
import json
import pathlib

import numpy as np

from circlesnake.data.coco import CocoDocument, annotation_from_ring

DATA = pathlib.Path(__file__).parent / "data"


def appendix_text() -> str:
    return (DATA / "appendix_coco.json").read_text()


def random_document(seed: int) -> CocoDocument:
    """A valid document with random images, categories and star-shaped polygons."""
    r = np.random.default_rng(seed)
    n_img, n_cat = int(r.integers(0, 5)), int(r.integers(1, 5))
    cats = [{"id": int(i), "name": f"c{i}", "supercategory": "cell"}
            for i in r.choice(np.arange(1, 50), n_cat, replace=False)]
    images = [{"id": i + 1, "file_name": f"im{i}.png", "width": 512, "height": 512}
              for i in range(n_img)]
    anns = []
    for k in range(int(r.integers(0, 12)) if images else 0):
        m = int(r.integers(3, 20))
        ang = np.sort(r.uniform(0, 2 * np.pi, m))
        rad = r.uniform(3, 30, m)
        c = r.uniform(40, 470, 2)
        ring = c + np.stack([rad * np.cos(ang), rad * np.sin(ang)], 1)
        anns.append(annotation_from_ring(k + 1, int(r.choice([im["id"] for im in images])),
                                         int(r.choice([c["id"] for c in cats])), ring))
    return CocoDocument({"seed": seed}, images, anns, cats)


def canonical(doc: CocoDocument) -> str:
    return json.dumps(doc.to_dict(), sort_keys=True)
