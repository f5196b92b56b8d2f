"""COCO-style average precision for circle and contour instance predictions."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .geometry import circle_iou, polygon_mask_iou

IOU_THRESHOLDS = np.round(np.linspace(0.5, 0.95, 10), 2)
RECALL_GRID = np.linspace(0.0, 1.0, 101)
AREA_RANGES = {"all": (0.0, float("inf")), "small": (0.0, 32.0 ** 2), "medium": (32.0 ** 2, 96.0 ** 2)}


@dataclass
class MatchResult:
    matches: list[tuple[int, int, float]]     # (pred index, gt index, iou)
    unmatched_preds: list[int]
    unmatched_gts: list[int]


def match_detections(preds: Sequence, gts: Sequence, iou_fn: Callable, threshold: float,
                     class_of: Callable = lambda o: o.class_id) -> MatchResult:
    """Greedy matching of score-sorted predictions to same-class ground truth.

    Each prediction, in order, claims the unmatched ground truth of its class
    with the highest IoU not below ``threshold``.
    """
    taken = [False] * len(gts)
    matches, unmatched = [], []
    for i, p in enumerate(preds):
        best, best_j = threshold, -1
        for j, g in enumerate(gts):
            if taken[j] or class_of(g) != class_of(p):
                continue
            iou = iou_fn(p, g)
            if iou >= best:
                best, best_j = iou, j
        if best_j < 0:
            unmatched.append(i)
        else:
            taken[best_j] = True
            matches.append((i, best_j, best))
    return MatchResult(matches, unmatched, [j for j, t in enumerate(taken) if not t])


def average_precision(scored: Sequence[tuple[float, bool]], gt_count: int) -> float | None:
    """101-point interpolated AP from ``(score, is_true_positive)`` pairs.

    Returns None when there is no ground truth (not applicable).
    """
    if gt_count <= 0:
        return None
    if not scored:
        return 0.0
    scores = np.array([s for s, _ in scored], dtype=np.float64)
    tp = np.array([t for _, t in scored], dtype=bool)
    order = np.argsort(-scores, kind="mergesort")
    tp = tp[order]
    tpc = np.cumsum(tp)
    fpc = np.cumsum(~tp)
    return _interpolated(tpc, fpc, gt_count)


def _interpolated(tpc: np.ndarray, fpc: np.ndarray, gt_count: int) -> float:
    recall = tpc / gt_count
    precision = tpc / np.maximum(tpc + fpc, np.finfo(np.float64).eps)
    precision = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_GRID, side="left")
    q = np.zeros(len(RECALL_GRID))
    valid = idx < len(precision)
    q[valid] = precision[idx[valid]]
    return float(q.mean())


@dataclass
class EvalReport:
    mode: str
    ap: float | None
    ap50: float | None
    ap75: float | None
    ap_s: float | None
    ap_m: float | None
    per_class: dict[int, float | None]
    per_threshold: dict[float, float | None]
    diagnostics: dict[float, dict[str, int]]
    class_names: dict[int, str] = field(default_factory=dict)
    per_class_metric: str = "ap"
    dice: float | None = None

    def metrics(self) -> dict[str, float | None]:
        out = {"AP": self.ap, "AP50": self.ap50, "AP75": self.ap75,
               "AP_S": self.ap_s, "AP_M": self.ap_m}
        for c, v in sorted(self.per_class.items()):
            out[f"AP_{self.class_names.get(c, c)}"] = v
        if self.dice is not None:
            out["Dice"] = self.dice
        return out

    def to_keyvalue(self) -> str:
        """Machine-readable ``key=value`` lines; -1 marks not-applicable metrics."""
        lines = [f"mode={self.mode}", f"per_class_metric={self.per_class_metric}"]
        for k, v in self.metrics().items():
            lines.append(f"{k.replace(' ', '_')}={-1 if v is None else round(v, 6)}")
        for t, d in sorted(self.diagnostics.items()):
            lines.append(f"match@{t:.2f}=TP:{d['tp']},FP:{d['fp']},FN:{d['fn']}")
        return "\n".join(lines) + "\n"

    def to_table(self) -> str:
        def fmt(v):
            return "  n/a" if v is None else f"{v:.3f}"
        head = ["AP", "AP50", "AP75", "AP_S", "AP_M"]
        vals = [self.ap, self.ap50, self.ap75, self.ap_s, self.ap_m]
        label = "AP" if self.per_class_metric == "ap" else "AP50"
        lines = [f"Evaluation ({self.mode}); per-class columns report {label}",
                 "  ".join(f"{h:>6}" for h in head),
                 "  ".join(f"{fmt(v):>6}" for v in vals), ""]
        names = [str(self.class_names.get(c, c)) for c in sorted(self.per_class)]
        if names:
            lines.append("  ".join(f"{n:>14}" for n in names))
            lines.append("  ".join(f"{fmt(self.per_class[c]):>14}" for c in sorted(self.per_class)))
        if self.dice is not None:
            lines.append(f"mean Dice (matched @0.50): {self.dice:.3f}")
        return "\n".join(lines) + "\n"


def _area(obj, mode: str) -> float:
    return obj.circle.area if mode == "circle" else obj.contour.area


def _iou_matrix(preds, gts, mode: str) -> np.ndarray:
    m = np.zeros((len(preds), len(gts)))
    if not preds or not gts:
        return m
    if mode == "circle":
        for i, p in enumerate(preds):
            for j, g in enumerate(gts):
                m[i, j] = circle_iou(p.circle, g.circle)
        return m
    pb = [np.r_[p.contour.vertices.min(0), p.contour.vertices.max(0)] for p in preds]
    gb = [np.r_[g.contour.vertices.min(0), g.contour.vertices.max(0)] for g in gts]
    for i, p in enumerate(preds):
        for j, g in enumerate(gts):
            a, b = pb[i], gb[j]
            if a[0] > b[2] or b[0] > a[2] or a[1] > b[3] or b[1] > a[3]:
                continue
            m[i, j] = polygon_mask_iou(p.contour.vertices, g.contour.vertices)[0]
    return m


def _class_of(obj) -> int:
    return obj.circle.class_id


def _match_image_class(ious, pred_area, gt_area, area_rng, threshold):
    """COCO matching for one image/class: returns per-pred (tp, ignored) and non-ignored gt count."""
    n_p, n_g = ious.shape
    gt_ig = (gt_area < area_rng[0]) | (gt_area > area_rng[1])
    gorder = np.argsort(gt_ig, kind="stable")
    gt_taken = np.zeros(n_g, dtype=bool)
    tp = np.zeros(n_p, dtype=bool)
    ign = np.zeros(n_p, dtype=bool)
    matched = np.full(n_p, -1)
    for d in range(n_p):
        best, m = min(threshold, 1 - 1e-10), -1
        for g in gorder:
            if gt_taken[g]:
                continue
            if m > -1 and not gt_ig[m] and gt_ig[g]:
                break
            if ious[d, g] < best:
                continue
            best, m = ious[d, g], g
        if m < 0:
            continue
        gt_taken[m] = True
        matched[d] = m
        ign[d] = gt_ig[m]
        tp[d] = not gt_ig[m]
    out_of_range = (pred_area < area_rng[0]) | (pred_area > area_rng[1])
    ign |= (matched < 0) & out_of_range
    return tp, ign, int((~gt_ig).sum()), matched


def evaluate(preds_per_image: Sequence[Sequence], gts_per_image: Sequence[Sequence],
             mode: str = "segm", num_classes: int = 4, class_names: dict | None = None,
             per_class_metric: str = "ap", max_dets: int = 100,
             compute_dice: bool = False) -> EvalReport:
    """AP family over a set of images.

    Predictions and ground truths are objects with ``circle``, ``contour`` and
    ``score`` attributes (e.g. :class:`InstancePrediction`). ``mode`` selects
    circle IoU or rasterized contour-mask IoU.
    """
    if mode not in ("segm", "circle"):
        raise ValueError(f"unknown mode {mode!r}")
    if len(preds_per_image) != len(gts_per_image):
        raise ValueError("predictions and ground truth cover different image counts")
    for group in list(preds_per_image) + list(gts_per_image):
        for o in group:
            if not 0 <= _class_of(o) < num_classes:
                raise ValueError(f"class id {_class_of(o)} outside [0, {num_classes})")

    # per image/class: sorted preds, iou matrix, areas
    blocks = []
    for preds, gts in zip(preds_per_image, gts_per_image):
        preds = sorted(preds, key=lambda o: -o.score)[:max_dets]
        for c in range(num_classes):
            pc = [p for p in preds if _class_of(p) == c]
            gc = [g for g in gts if _class_of(g) == c]
            if not pc and not gc:
                continue
            blocks.append((c, np.array([p.score for p in pc]), _iou_matrix(pc, gc, mode),
                           np.array([_area(p, mode) for p in pc]),
                           np.array([_area(g, mode) for g in gc])))

    table: dict[tuple[str, float, int], float | None] = {}
    diagnostics: dict[float, dict[str, int]] = {}
    dice_vals: list[float] = []
    for area_name, rng in AREA_RANGES.items():
        for t in IOU_THRESHOLDS:
            t = float(t)
            per_class = {c: ([], [], 0) for c in range(num_classes)}
            for c, scores, ious, parea, garea in blocks:
                tp, ign, npig, matched = _match_image_class(ious, parea, garea, rng, t)
                s, f, n = per_class[c]
                keep = ~ign
                s.extend(scores[keep].tolist())
                f.extend(tp[keep].tolist())
                per_class[c] = (s, f, n + npig)
                if area_name == "all":
                    d = diagnostics.setdefault(t, {"tp": 0, "fp": 0, "fn": 0})
                    d["tp"] += int(tp.sum())
                    d["fp"] += int((~tp & keep).sum())
                    d["fn"] += npig - int(tp.sum())
                    if compute_dice and t == 0.5:
                        for di, gi in enumerate(matched):
                            if gi >= 0:
                                iou = ious[di, gi]
                                dice_vals.append(2 * iou / (1 + iou))
            for c, (s, f, n) in per_class.items():
                table[(area_name, t, c)] = average_precision(list(zip(s, f)), n)

    def mean_of(vals):
        vals = [v for v in vals if v is not None]
        return float(np.mean(vals)) if vals else None

    ts = [float(t) for t in IOU_THRESHOLDS]
    cs = range(num_classes)
    ap = mean_of(table[("all", t, c)] for t in ts for c in cs)
    ap50 = mean_of(table[("all", 0.5, c)] for c in cs)
    ap75 = mean_of(table[("all", 0.75, c)] for c in cs)
    ap_s = mean_of(table[("small", t, c)] for t in ts for c in cs)
    ap_m = mean_of(table[("medium", t, c)] for t in ts for c in cs)
    if per_class_metric == "ap50":
        per_cls = {c: table[("all", 0.5, c)] for c in cs}
    elif per_class_metric == "ap":
        per_cls = {c: mean_of(table[("all", t, c)] for t in ts) for c in cs}
    else:
        raise ValueError("per_class_metric must be 'ap' or 'ap50'")
    per_thr = {t: mean_of(table[("all", t, c)] for c in cs) for t in ts}
    return EvalReport(mode, ap, ap50, ap75, ap_s, ap_m, per_cls, per_thr, diagnostics,
                      dict(class_names or {}), per_class_metric,
                      float(np.mean(dice_vals)) if compute_dice and dice_vals else
                      (0.0 if compute_dice else None))
