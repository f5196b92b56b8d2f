"""``circlesnake --type {train|evaluate|infer|prepare|synth} --cfg_file CFG [key value ...]``"""
from __future__ import annotations

import argparse
import glob
import json
import logging
import os
import re
import sys
from typing import Sequence

import numpy as np

from .config import ConfigError, RunConfig, dump_config, load_config
from .data.annotations import AnnotationFormatError, parse_annotations
from .data.catalog import (SPLITS, DatasetCatalog, DatasetEntry, catalog_stats, format_stats,
                           read_registry, split_catalog, write_registry)
from .data.coco import (DEFAULT_CATEGORIES, CocoDocument, CocoFormatError, annotation_from_ring,
                        results_entries, write_coco)
from .data.dataset import gt_as_exact_polygons, load_image, load_samples, read_coco_file, save_png
from .data.synth import CLASS_NAMES, synth_dataset
from .data.tiling import annotations_to_patches, class_masks, cut_tile, patch_name, tile_grid
from .evaluation import evaluate
from .model import CircleSnake
from .optim import CheckpointError
from .training import fit, validation_loss

log = logging.getLogger("circlesnake")

CLASS_COLORS = ((230, 40, 40), (40, 200, 60), (40, 90, 230), (240, 200, 30))
_IMAGE_EXT = (".png", ".jpg", ".jpeg", ".tif", ".tiff", ".bmp")


class CommandError(RuntimeError):
    pass


# -- shared helpers ----------------------------------------------------------------

def _write_text(path: str, text: str) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w") as fh:
        fh.write(text)


def _dataset(cfg: RunConfig, name: str) -> DatasetEntry:
    path = cfg.path(cfg.dataset_catalog)
    if not os.path.exists(path):
        raise CommandError(f"dataset registry not found: {path}")
    reg = read_registry(path)
    if name in reg:
        return reg[name]
    # eos*/eoe* spellings both appear in published run settings
    alt = re.sub(r"^eo[se]", lambda m: "eoe" if m.group(0) == "eos" else "eos", name)
    if alt in reg:
        log.warning("dataset %r not registered, using %r", name, alt)
        return reg[alt]
    raise CommandError(f"dataset {name!r} not registered in {path} (known: {sorted(reg)})")


def _load_split(cfg: RunConfig, name: str):
    entry = _dataset(cfg, name)
    try:
        doc = read_coco_file(entry.ann_file)
    except (OSError, CocoFormatError, ValueError) as exc:
        raise CommandError(f"{entry.ann_file}: {exc}") from exc
    return entry, doc


def _epochs_available(model_dir: str) -> list[int]:
    found = []
    for p in glob.glob(os.path.join(model_dir, "*.npz")):
        stem = os.path.splitext(os.path.basename(p))[0]
        if stem.isdigit():
            found.append(int(stem))
    return sorted(found)


def _checkpoint_for(cfg: RunConfig, epoch: int) -> str:
    model_dir = cfg.path(cfg.model_dir)
    available = _epochs_available(model_dir)
    if epoch < 0:
        if not available:
            raise CommandError(f"no checkpoints in {model_dir}")
        epoch = available[-1]
    if epoch not in available:
        raise CommandError(f"no checkpoint for epoch {epoch} in {model_dir}; "
                           f"available epochs: {available or 'none'}")
    return os.path.join(model_dir, f"{epoch}.npz")


def _predict_doc(model: CircleSnake, entry: DatasetEntry, doc: CocoDocument, ct_score: float):
    preds, gts, images = [], [], []
    for im in sorted(doc.images, key=lambda i: i["id"]):
        image = load_image(os.path.join(entry.data_root, im["file_name"]))
        _, p = model.predict(image, ct_score=ct_score)
        preds.append(p)
        gts.append(gt_as_exact_polygons(doc, im["id"]))
        images.append((im, image))
    return preds, gts, images


def render_overlay(image: np.ndarray, predictions, width: int = 2) -> np.ndarray:
    """Draw predicted contours over ``image`` in per-class colors; same size as input."""
    from PIL import Image, ImageDraw
    canvas = Image.fromarray(np.asarray(image, dtype=np.uint8)).convert("RGB")
    draw = ImageDraw.Draw(canvas)
    for p in predictions:
        color = CLASS_COLORS[p.circle.class_id % len(CLASS_COLORS)]
        pts = [tuple(map(float, v)) for v in p.contour.vertices]
        draw.line(pts + pts[:1], fill=color, width=width)
    return np.asarray(canvas)


# -- commands ----------------------------------------------------------------------

def cmd_train(cfg: RunConfig) -> int:
    if cfg.pretrain:
        log.warning("pretrain %r ignored: backbones are trained from scratch", cfg.pretrain)
    if cfg.network != "small_hourglass":
        log.warning("network %r not available, using the built-in small_hourglass backbone",
                    cfg.network)
    if cfg.rotate_reproduce:
        log.warning("rotate_reproduce is not supported and is ignored")
    mcfg = cfg.model_config()
    entry, doc = _load_split(cfg, cfg.train.dataset)
    samples = load_samples(doc, entry.data_root, mcfg)
    if not samples:
        raise CommandError(f"dataset {cfg.train.dataset!r} has no images")
    validate = None
    try:
        ventry, vdoc = _load_split(cfg, cfg.val_dataset)
    except CommandError as exc:
        log.warning("validation disabled: %s", exc)
    else:
        vsamples = load_samples(vdoc, ventry.data_root, mcfg) if vdoc.images else []

        def validate(model):
            if not vsamples:
                return {}
            preds, gts, _ = _predict_doc(model, ventry, vdoc, max(cfg.ct_score, 0.2))
            rep = evaluate(preds, gts, cfg.eval_mode, mcfg.num_classes)
            return {"ap50": rep.ap50 or 0.0, "loss": validation_loss(model, vsamples)}

    model_dir = cfg.path(cfg.model_dir)
    os.makedirs(model_dir, exist_ok=True)
    rng = np.random.default_rng(mcfg.seed)
    start, state, model = 0, None, None
    if cfg.resume and _epochs_available(model_dir):
        path = os.path.join(model_dir, f"{_epochs_available(model_dir)[-1]}.npz")
        try:
            model, state, meta = CircleSnake.load(path)
        except CheckpointError as exc:
            raise CommandError(f"cannot resume from {path}: {exc}") from exc
        start = int(meta.get("epoch", -1)) + 1
        rng = np.random.default_rng([mcfg.seed, start])
        log.info("resuming from %s at epoch %d", path, start)
    model = model or CircleSnake(mcfg)
    _write_text(os.path.join(model_dir, "config.yaml"), dump_config(cfg))
    with open(os.path.join(model_dir, "train.log"), "a" if start else "w") as fh:
        res = fit(model, samples, state=state, log=fh, checkpoint_dir=model_dir,
                  save_ep=cfg.save_ep, eval_ep=cfg.eval_ep, validate=validate,
                  select_by=cfg.select_by, start_epoch=start, rng=rng)
    last = res.history[-1] if res.history else None
    print(f"trained {len(res.history)} steps; checkpoints in {model_dir}"
          + (f"; final loss {last.total:.4f}" if last else ""))
    return 0


def cmd_evaluate(cfg: RunConfig) -> int:
    path = _checkpoint_for(cfg, cfg.test.epoch)
    try:
        model, _, meta = CircleSnake.load(path)
    except CheckpointError as exc:
        raise CommandError(f"{path}: {exc}") from exc
    entry, doc = _load_split(cfg, cfg.test.dataset)
    preds, gts, images = _predict_doc(model, entry, doc, cfg.ct_score)
    names = {i: n for i, n in enumerate(c["name"] for c in sorted(doc.categories or DEFAULT_CATEGORIES,
                                                                  key=lambda c: c["id"]))}
    rep = evaluate(preds, gts, cfg.eval_mode, model.cfg.num_classes, names,
                   cfg.per_class_metric, compute_dice=cfg.dice)
    epoch = meta.get("epoch", os.path.splitext(os.path.basename(path))[0])
    out = cfg.path(cfg.result_dir)
    stem = os.path.join(out, f"eval_epoch{epoch}_{cfg.eval_mode}")
    _write_text(stem + ".txt", rep.to_table())
    _write_text(stem + ".kv", rep.to_keyvalue())
    results = []
    for (im, image), p in zip(images, preds):
        results.extend(results_entries(im["id"], p))
        if cfg.save_images:
            base = os.path.splitext(im["file_name"])[0]
            save_png(os.path.join(out, "images", f"{base}_overlay.png"), render_overlay(image, p))
    _write_text(stem + "_results.json", json.dumps(results))
    print(rep.to_table(), end="")
    return 0


def _image_paths(specs: Sequence[str]) -> list[str]:
    paths = []
    for s in specs:
        if os.path.isdir(s):
            paths.extend(sorted(p for p in glob.glob(os.path.join(s, "*"))
                                if p.lower().endswith(_IMAGE_EXT)))
        else:
            paths.append(s)
    return paths


def cmd_infer(cfg: RunConfig, checkpoint: str | None, images: Sequence[str], out: str) -> int:
    path = checkpoint or _checkpoint_for(cfg, cfg.test.epoch)
    try:
        model, _, _ = CircleSnake.load(path)
    except (OSError, CheckpointError) as exc:
        raise CommandError(f"{path}: {exc}") from exc
    paths = _image_paths(images)
    if not paths:
        raise CommandError("no input images")
    ok = 0
    for k, p in enumerate(paths):
        try:
            image = load_image(p)
        except (OSError, ValueError) as exc:
            log.warning("skipping unreadable image %s: %s", p, exc)
            continue
        _, preds = model.predict(image, ct_score=cfg.ct_score)
        stem = os.path.splitext(os.path.basename(p))[0]
        _write_text(os.path.join(out, f"{stem}.json"), json.dumps(results_entries(k, preds)))
        if cfg.save_images:
            save_png(os.path.join(out, f"{stem}_overlay.png"), render_overlay(image, preds))
        ok += 1
    if ok == 0:
        raise CommandError("every input image failed to load")
    print(f"wrote predictions for {ok}/{len(paths)} images to {out}")
    return 0


def cmd_prepare(cfg: RunConfig, annotations: str, images: str, out: str) -> int:
    class_names = list(CLASS_NAMES)
    errors, slides = [], {}
    ann_files = sorted(glob.glob(os.path.join(annotations, "*.json")))
    if not os.path.isdir(annotations):
        raise CommandError(f"annotation directory not found: {annotations}")
    for f in ann_files:
        wsi = os.path.splitext(os.path.basename(f))[0]
        try:
            with open(f) as fh:
                polys = parse_annotations(fh.read(), class_names, f)
        except (OSError, AnnotationFormatError) as exc:
            errors.append(str(exc))
            continue
        img_path = next((os.path.join(images, wsi + e) for e in _IMAGE_EXT
                         if os.path.exists(os.path.join(images, wsi + e))), None)
        if img_path is None:
            errors.append(f"{f}: no image named {wsi}.* in {images}")
            continue
        slides[wsi] = (img_path, polys)
    if errors:
        raise CommandError("\n".join(errors))

    patch_dir, mask_dir = os.path.join(out, "patches"), os.path.join(out, "masks")
    os.makedirs(patch_dir, exist_ok=True)
    os.makedirs(mask_dir, exist_ok=True)
    if slides:
        catalog = split_catalog(sorted(slides), cfg.split_ratios, cfg.seed, strict=False)
    else:
        catalog = DatasetCatalog({})
    docs = {s: CocoDocument({"description": f"{s} split"}, [], [], list(DEFAULT_CATEGORIES))
            for s in SPLITS}
    next_img = {s: 1 for s in SPLITS}
    next_ann = {s: 1 for s in SPLITS}
    ts, ov = cfg.tile_size, cfg.tile_overlap
    for wsi in sorted(slides):
        img_path, polys = slides[wsi]
        try:
            image = load_image(img_path)
        except (OSError, ValueError) as exc:
            raise CommandError(f"{img_path}: {exc}") from exc
        h, w = image.shape[:2]
        grid = tile_grid(w, h, ts, ov)
        split = catalog.assignment[wsi]
        doc = docs[split]
        for tile in annotations_to_patches(polys, grid, cfg.min_retained_fraction):
            name = patch_name(wsi, tile.origin)
            save_png(os.path.join(patch_dir, name), cut_tile(image, tile.origin, ts))
            masks = class_masks(tile, ts, len(class_names))
            for c in range(len(class_names)):
                save_png(os.path.join(mask_dir, f"{name[:-4]}_c{c + 1}.png"),
                         masks[c].astype(np.uint8) * 255)
            iid = next_img[split]
            next_img[split] += 1
            doc.images.append({"id": iid, "file_name": name, "width": ts, "height": ts})
            for cls, ring in tile.polygons:
                doc.annotations.append(annotation_from_ring(next_ann[split], iid, cls + 1, ring))
                next_ann[split] += 1
    registry = {}
    for s in SPLITS:
        _write_text(os.path.join(out, f"{s}.json"), write_coco(docs[s]))
        registry[f"eoe{s.capitalize()}"] = DatasetEntry("patches", f"{s}.json", s)
    write_registry(os.path.join(out, "datasets.json"), registry)
    table = catalog_stats(catalog, class_names, {w: [c for c, _ in slides[w][1]] for w in slides})
    _write_text(os.path.join(out, "catalog.json"), catalog.to_json())
    stats = format_stats(table, class_names)
    _write_text(os.path.join(out, "stats.txt"), stats)
    print(stats, end="")
    return 0


def cmd_synth(cfg: RunConfig, seed: int, scenes: int, out: str, instances: int) -> int:
    """Write seeded synthetic scenes as a registered, ready-to-train dataset."""
    if scenes < 1:
        raise CommandError("--scenes must be >= 1")
    img_dir = os.path.join(out, "images")
    doc = CocoDocument({"description": f"synthetic scenes, seed {seed}"}, [], [],
                       list(DEFAULT_CATEGORIES))
    ann_id = 1
    for k, scene in enumerate(synth_dataset(seed, scenes, n_instances=instances,
                                            num_vertices=cfg.num_vertices)):
        name = f"scene_{k:04d}.png"
        save_png(os.path.join(img_dir, name), scene.image)
        img, anns = scene.coco_entries(k + 1, ann_id, name)
        doc.images.append(img)
        doc.annotations.extend(anns)
        ann_id += len(anns)
    _write_text(os.path.join(out, "synth.json"), write_coco(doc))
    # the same scenes serve as train, val and test: an overfitting set
    write_registry(os.path.join(out, "datasets.json"),
                   {f"eoe{s.capitalize()}": DatasetEntry("images", "synth.json", s) for s in SPLITS})
    run = RunConfig(seed=seed, config_dir=out)
    run.dataset_catalog = "datasets.json"
    _write_text(os.path.join(out, "config.yaml"), dump_config(run))
    print(f"wrote {scenes} scenes ({ann_id - 1} instances) to {out}")
    return 0


# -- entry point -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="circlesnake", description=__doc__)
    p.add_argument("--type", default="train",
                   choices=("train", "evaluate", "infer", "prepare", "synth"))
    p.add_argument("--cfg_file", help="YAML run configuration")
    p.add_argument("--annotations", help="prepare: directory of per-slide annotation JSON")
    p.add_argument("--images", action="append", default=[],
                   help="prepare: slide image directory; infer: image file or directory (repeatable)")
    p.add_argument("--out", help="output directory")
    p.add_argument("--checkpoint", help="infer: checkpoint path (default: latest in model_dir)")
    p.add_argument("--seed", type=int, default=0, help="synth: base seed")
    p.add_argument("--scenes", type=int, default=20, help="synth: number of scenes")
    p.add_argument("--instances", type=int, default=8, help="synth: instances per scene")
    p.add_argument("opts", nargs=argparse.REMAINDER, help="trailing 'key value' overrides")
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s: %(message)s")
    try:
        cfg = load_config(args.cfg_file, args.opts)
        if args.type == "train":
            return cmd_train(cfg)
        if args.type == "evaluate":
            return cmd_evaluate(cfg)
        if args.type == "infer":
            if not args.images or not args.out:
                raise CommandError("infer needs --images and --out")
            return cmd_infer(cfg, args.checkpoint, args.images, args.out)
        if args.type == "prepare":
            if not (args.annotations and args.images and args.out):
                raise CommandError("prepare needs --annotations, --images and --out")
            return cmd_prepare(cfg, args.annotations, args.images[0], args.out)
        if not args.out:
            raise CommandError("synth needs --out")
        return cmd_synth(cfg, args.seed, args.scenes, args.out, args.instances)
    except (CommandError, ConfigError, OSError) as exc:
        log.error("%s", exc)
        return 2
    except (ValueError, FloatingPointError) as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
