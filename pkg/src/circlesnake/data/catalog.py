"""Slide-level train/val/test splitting, per-split class counts and dataset registration."""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

SPLITS = ("train", "val", "test")
DEFAULT_RATIOS = (7, 1, 2)


@dataclass
class DatasetCatalog:
    assignment: dict[str, str]                         # wsi id -> split
    counts: dict[str, dict[str, int]] = field(default_factory=dict)   # split -> class -> n

    def members(self, split: str) -> list[str]:
        return [w for w, s in self.assignment.items() if s == split]

    def sizes(self) -> dict[str, int]:
        return {s: len(self.members(s)) for s in SPLITS}

    def to_json(self) -> str:
        return json.dumps({"assignment": self.assignment, "counts": self.counts},
                          indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "DatasetCatalog":
        d = json.loads(text)
        return cls(dict(d["assignment"]), dict(d.get("counts", {})))


def apportion(n: int, ratios: Sequence[float]) -> list[int]:
    """Largest-remainder apportionment of ``n`` items; ties go to the earlier split."""
    r = np.asarray(ratios, dtype=np.float64)
    quota = n * r / r.sum()
    counts = np.floor(quota + 1e-9).astype(int)
    order = np.argsort(-(quota - counts), kind="stable")
    for i in order[: n - int(counts.sum())]:
        counts[i] += 1
    return counts.tolist()


def split_catalog(wsi_ids: Sequence[str], ratios: Sequence[float] = DEFAULT_RATIOS,
                  seed: int = 0, strict: bool = True) -> DatasetCatalog:
    """Assign whole slides to splits after a seeded shuffle.

    With ``strict`` set, fewer slides than splits is an error; otherwise some
    splits may come out empty.
    """
    if len(ratios) != len(SPLITS) or any(r <= 0 for r in ratios):
        raise ValueError(f"need {len(SPLITS)} positive ratios, got {ratios}")
    ids = list(dict.fromkeys(wsi_ids))
    if not ids:
        raise ValueError("no slides to split")
    if strict and len(ids) < len(SPLITS):
        raise ValueError(f"{len(ids)} slides cannot fill {len(SPLITS)} splits")
    rng = np.random.default_rng(seed)
    order = [ids[i] for i in rng.permutation(len(ids))]
    sizes = apportion(len(ids), ratios)
    assignment, start = {}, 0
    for split, k in zip(SPLITS, sizes):
        for w in order[start:start + k]:
            assignment[w] = split
        start += k
    return DatasetCatalog({w: assignment[w] for w in ids})


def catalog_stats(catalog: DatasetCatalog, class_names: Sequence[str],
                  annotations_by_wsi: Mapping[str, Sequence[int]]) -> dict[str, dict[str, int]]:
    """Per-split per-class annotation counts with ``Total`` row and column.

    ``annotations_by_wsi`` maps slide id to the class ids of its annotations.
    """
    missing = set(annotations_by_wsi) - set(catalog.assignment)
    if missing:
        raise ValueError(f"slides not in catalog: {sorted(missing)}")
    table = {s: {n: 0 for n in class_names} for s in SPLITS}
    for wsi, classes in annotations_by_wsi.items():
        split = catalog.assignment[wsi]
        for c in classes:
            table[split][class_names[c]] += 1
    for s in SPLITS:
        table[s]["Total"] = sum(table[s][n] for n in class_names)
    table["Total"] = {n: sum(table[s][n] for s in SPLITS) for n in list(class_names) + ["Total"]}
    check_stats(table, class_names)
    catalog.counts = table
    return table


def check_stats(table: Mapping[str, Mapping[str, int]], class_names: Sequence[str]) -> None:
    """Row and column totals must agree with their parts."""
    for s in SPLITS:
        if table[s]["Total"] != sum(table[s][n] for n in class_names):
            raise ValueError(f"row total mismatch for split {s}")
    for n in list(class_names) + ["Total"]:
        if table["Total"][n] != sum(table[s][n] for s in SPLITS):
            raise ValueError(f"column total mismatch for {n}")


def format_stats(table: Mapping[str, Mapping[str, int]], class_names: Sequence[str]) -> str:
    cols = list(SPLITS) + ["Total"]
    lines = [f"{'Class':<14}" + "".join(f"{c.capitalize():>8}" for c in cols)]
    for n in list(class_names) + ["Total"]:
        lines.append(f"{n:<14}" + "".join(f"{table[c][n]:>8}" for c in cols))
    return "\n".join(lines) + "\n"


# -- registration --------------------------------------------------------------

@dataclass
class DatasetEntry:
    data_root: str
    ann_file: str
    split: str
    id: str = "coco"


def write_registry(path, entries: Mapping[str, DatasetEntry]) -> None:
    data = {name: vars(e) for name, e in entries.items()}
    with open(path, "w") as fh:
        json.dump(data, fh, indent=2, sort_keys=True)


def read_registry(path, data_root_override: str | None = None) -> dict[str, DatasetEntry]:
    """Load dataset registrations; relative paths resolve against the file's directory.

    ``data_root_override`` (or the ``CIRCLESNAKE_DATA_ROOT`` environment
    variable) replaces the directory relative roots are resolved against.
    """
    with open(path) as fh:
        data = json.load(fh)
    base = data_root_override or os.environ.get("CIRCLESNAKE_DATA_ROOT") or \
        os.path.dirname(os.path.abspath(path))
    out = {}
    for name, e in data.items():
        missing = {"data_root", "ann_file", "split"} - set(e)
        if missing:
            raise ValueError(f"dataset {name!r} missing keys {sorted(missing)}")
        root = e["data_root"] if os.path.isabs(e["data_root"]) else os.path.join(base, e["data_root"])
        ann = e["ann_file"] if os.path.isabs(e["ann_file"]) else os.path.join(base, e["ann_file"])
        out[name] = DatasetEntry(root, ann, e["split"], e.get("id", "coco"))
    return out
