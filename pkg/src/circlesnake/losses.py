"""Training objectives for the circle detector and the contour deformation."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .heatmap import DetectionTargets
from .tensor import Tensor


@dataclass
class LossWeights:
    lambda_radius: float = 0.1
    lambda_off: float = 1.0
    alpha: float = 2.0
    beta: float = 4.0

    def __post_init__(self):
        for name in ("lambda_radius", "lambda_off", "alpha", "beta"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")


@dataclass
class LossBreakdown:
    l_focal: float
    l_radius: float
    l_offset: float
    l_det: float
    l_iter: float = 0.0

    @property
    def total(self) -> float:
        return self.l_det + self.l_iter

    def recompute_det(self, w: LossWeights) -> float:
        return self.l_focal + w.lambda_radius * self.l_radius + w.lambda_off * self.l_offset

    def log_line(self, step: int, lr: float) -> str:
        return (f"step={step} l_focal={self.l_focal:.8g} l_radius={self.l_radius:.8g} "
                f"l_offset={self.l_offset:.8g} l_det={self.l_det:.8g} "
                f"l_iter={self.l_iter:.8g} lr={lr:.8g}")


def _as_batch(targets) -> list[DetectionTargets]:
    return [targets] if isinstance(targets, DetectionTargets) else list(targets)


def _batched(pred: Tensor, n_targets: int) -> Tensor:
    if pred.ndim == 3:
        if n_targets != 1:
            raise ValueError("unbatched prediction needs exactly one target set")
        return T.reshape(pred, (1,) + pred.shape)
    return pred


def _object_count(batch: Sequence[DetectionTargets]) -> int:
    return max(1, sum(len(t.indices) for t in batch))


def focal_loss(pred: Tensor, targets, alpha: float = 2.0, beta: float = 4.0) -> Tensor:
    """Penalty-reduced pixel-wise focal loss summed over classes, divided by object count.

    ``pred`` is (C, h, w) or (B, C, h, w) with values strictly inside (0, 1).
    """
    batch = _as_batch(targets)
    p = _batched(pred, len(batch))
    y = np.stack([t.heatmap for t in batch]).astype(p.dtype, copy=False)
    if y.shape != p.shape:
        raise ValueError(f"prediction {p.shape} vs target {y.shape}")
    x = p.data
    if np.any(x <= 0) or np.any(x >= 1):
        raise ValueError("focal loss needs predictions strictly inside (0, 1)")
    n = _object_count(batch)
    pos = y == 1
    neg_w = np.where(pos, 0, (1 - y) ** beta)
    log_p, log_q = np.log(x), np.log1p(-x)
    q = 1 - x
    pos_term = np.where(pos, q ** alpha * log_p, 0)
    neg_term = neg_w * x ** alpha * log_q
    value = -(pos_term.sum() + neg_term.sum()) / n

    def backward(g):
        d_pos = np.where(pos, -alpha * q ** (alpha - 1) * log_p + q ** alpha / x, 0)
        d_neg = neg_w * (alpha * x ** (alpha - 1) * log_q - x ** alpha / q)
        return (-(g / n) * (d_pos + d_neg)).astype(x.dtype, copy=False),

    out = T.record(np.asarray(value, dtype=x.dtype), (p,), backward)
    return out


def _gather_indices(batch: Sequence[DetectionTargets]):
    b = np.concatenate([np.full(len(t.indices), i, dtype=np.intp) for i, t in enumerate(batch)]) \
        if batch else np.zeros(0, dtype=np.intp)
    idx = np.concatenate([t.indices for t in batch]) if batch else np.zeros((0, 3), np.intp)
    return b, idx[:, 1], idx[:, 2]


def radius_loss(pred_radius: Tensor, targets) -> Tensor:
    """Mean absolute radius error at ground-truth center cells (output-grid units)."""
    batch = _as_batch(targets)
    p = _batched(pred_radius, len(batch))
    b, ys, xs = _gather_indices(batch)
    if len(b) == 0:
        return T.scale(T.sum(p), 0.0)
    picked = T.gather(p, (b, np.zeros_like(b), ys, xs))
    target = np.concatenate([t.radius for t in batch]).astype(p.dtype)
    return T.scale(T.sum(T.abs(T.sub(picked, target))), 1.0 / _object_count(batch))


def offset_loss(pred_offset: Tensor, targets) -> Tensor:
    """Mean L1 of the sub-cell center offset at ground-truth center cells."""
    batch = _as_batch(targets)
    p = _batched(pred_offset, len(batch))
    b, ys, xs = _gather_indices(batch)
    if len(b) == 0:
        return T.scale(T.sum(p), 0.0)
    bb = np.repeat(b, 2)
    ch = np.tile([0, 1], len(b))
    picked = T.gather(p, (bb, ch, np.repeat(ys, 2), np.repeat(xs, 2)))
    target = np.concatenate([t.offset for t in batch]).reshape(-1).astype(p.dtype)
    return T.scale(T.sum(T.abs(T.sub(picked, target))), 1.0 / _object_count(batch))


def detection_loss(l_focal: Tensor, l_radius: Tensor, l_offset: Tensor,
                   w: LossWeights | None = None) -> tuple[Tensor, LossBreakdown]:
    """Weighted detection objective plus a float breakdown for logging."""
    w = w or LossWeights()
    total = T.add(T.add(l_focal, T.scale(l_radius, w.lambda_radius)),
                  T.scale(l_offset, w.lambda_off))
    parts = LossBreakdown(float(l_focal.data), float(l_radius.data), float(l_offset.data),
                          float(total.data))
    return total, parts


def iter_loss(deformed, gt) -> Tensor:
    """Per-vertex L1 distance to the ground-truth ring, averaged over vertices and instances.

    ``deformed`` is a (K, N, 2) or (N, 2) Tensor (or a Contour); ``gt`` has the
    same vertex layout.
    """
    d = deformed if isinstance(deformed, Tensor) else Tensor(np.asarray(
        getattr(deformed, "vertices", deformed)))
    g = np.asarray(getattr(gt, "vertices", gt), dtype=d.dtype)
    if d.shape != g.shape:
        raise ValueError(f"vertex layout mismatch: {d.shape} vs {g.shape}")
    n_vertices = d.shape[-2]
    n_inst = int(np.prod(d.shape[:-2])) if d.ndim > 2 else 1
    return T.scale(T.sum(T.abs(T.sub(d, g))), 1.0 / (n_vertices * max(n_inst, 1)))
