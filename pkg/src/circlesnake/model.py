"""End-to-end multi-label circle detector with contour deformation."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .geometry import Circle, Contour, resample_polygon, sample_circle_contour
from .heatmap import DetectionTargets, decode_circles, encode_targets
from .losses import LossBreakdown, LossWeights, detection_loss, focal_loss, iter_loss, \
    offset_loss, radius_loss
from .nn import Conv2d, ConvBnRelu, Module
from .optim import AdamState, adam_step, load_checkpoint, save_checkpoint
from .snake import SnakeNetwork, deform
from .tensor import Tensor

NETWORK_STRIDE = 16
PIXEL_MEAN = 0.5
PIXEL_STD = 0.25


@dataclass
class ModelConfig:
    num_classes: int = 4
    heads: dict = field(default_factory=lambda: {"ct_hm": 4, "radius": 1, "reg": 2})
    num_vertices: int = 128
    deform_iters: int = 3
    down_ratio: int = 4
    backbone_widths: tuple = (32, 64, 128)
    head_conv: int = 32
    snake_width: int = 128
    ct_score: float = 0.05
    top_n: int = 100
    lambda_radius: float = 0.1
    lambda_off: float = 1.0
    focal_alpha: float = 2.0
    focal_beta: float = 4.0
    lambda_iter: float = 1.0
    proposal_jitter: float = 0.1
    lr: float = 2.5e-4
    weight_decay: float = 0.0
    milestones: tuple = (60, 80, 100, 150)
    gamma: float = 0.5
    epochs: int = 200
    batch_size: int = 1
    seed: int = 0

    def __post_init__(self):
        self.backbone_widths = tuple(self.backbone_widths)
        self.milestones = tuple(self.milestones)
        if self.heads.get("ct_hm") != self.num_classes:
            raise ValueError("heads['ct_hm'] must equal the class count")
        if self.heads.get("radius") != 1 or self.heads.get("reg") != 2:
            raise ValueError("radius head must have width 1 and reg head width 2")

    def loss_weights(self) -> LossWeights:
        return LossWeights(self.lambda_radius, self.lambda_off, self.focal_alpha, self.focal_beta)


@dataclass
class InstancePrediction:
    circle: Circle
    contour: Contour
    score: float


@dataclass
class Sample:
    """One training image with its precomputed supervision."""
    image: np.ndarray                  # (H, W, 3) uint8
    circles: list[Circle]
    contours: np.ndarray               # (K, N, 2)
    targets: DetectionTargets
    image_id: int = 0

    @classmethod
    def from_polygons(cls, image: np.ndarray, polygons: Sequence[tuple[int, np.ndarray]],
                      cfg: ModelConfig, image_id: int = 0) -> "Sample":
        from .geometry import circle_from_polygon
        circles, rings = [], []
        for class_id, poly in polygons:
            circles.append(circle_from_polygon(poly, class_id))
            rings.append(resample_polygon(poly, cfg.num_vertices, class_id).vertices)
        h, w = image.shape[:2]
        ph, pw = _padded(h), _padded(w)
        targets = encode_targets(circles, pw, ph, cfg.down_ratio, cfg.num_classes)
        contours = np.asarray(rings).reshape(-1, cfg.num_vertices, 2)
        return cls(image, circles, contours, targets, image_id)


def _padded(n: int) -> int:
    return -(-n // NETWORK_STRIDE) * NETWORK_STRIDE


def preprocess(images: Sequence[np.ndarray], dtype=np.float32) -> np.ndarray:
    """uint8 (H, W, 3) images to a normalized (B, 3, H', W') batch padded to the network stride."""
    h = max(im.shape[0] for im in images)
    w = max(im.shape[1] for im in images)
    batch = np.zeros((len(images), 3, _padded(h), _padded(w)), dtype=dtype)
    batch[...] = -PIXEL_MEAN / PIXEL_STD
    for i, im in enumerate(images):
        if im.ndim != 3 or im.shape[2] != 3:
            raise ValueError(f"image must be (H, W, 3), got {im.shape}")
        x = (im.astype(dtype) / 255 - PIXEL_MEAN) / PIXEL_STD
        batch[i, :, :im.shape[0], :im.shape[1]] = x.transpose(2, 0, 1)
    return batch


class Backbone(Module):
    """Small encoder-decoder producing stride-4 features.

    A two-conv stem reaches stride 4; three down blocks work at strides 4, 8
    and 16; two up blocks return to stride 4 with additive skips.
    """

    def __init__(self, widths=(32, 64, 128), rng=None, dtype=np.float32):
        w1, w2, w3 = widths
        rng = rng or np.random.default_rng(0)
        self.stem = [ConvBnRelu(3, max(w1 // 2, 4), 2, rng, dtype),
                     ConvBnRelu(max(w1 // 2, 4), w1, 2, rng, dtype)]
        self.down = [ConvBnRelu(w1, w1, 1, rng, dtype), ConvBnRelu(w1, w2, 1, rng, dtype),
                     ConvBnRelu(w2, w3, 1, rng, dtype)]
        self.lateral = [Conv2d(w3, w2, 1, 1, rng, dtype=dtype), Conv2d(w2, w1, 1, 1, rng, dtype=dtype)]
        self.up = [ConvBnRelu(w2, w2, 1, rng, dtype), ConvBnRelu(w1, w1, 1, rng, dtype)]
        self.out_channels = w1

    def __call__(self, x: Tensor) -> Tensor:
        for layer in self.stem:
            x = layer(x)
        s1 = self.down[0](x)
        s2 = self.down[1](T.max_pool2d(s1))
        s3 = self.down[2](T.max_pool2d(s2))
        u = self.up[0](T.add(self.lateral[0](T.upsample2x(s3)), s2))
        return self.up[1](T.add(self.lateral[1](T.upsample2x(u)), s1))


class Head(Module):
    def __init__(self, cin: int, mid: int, cout: int, rng, bias_init: float = 0.0,
                 dtype=np.float32):
        self.conv = Conv2d(cin, mid, 3, 1, rng, dtype=dtype)
        self.out = Conv2d(mid, cout, 1, 1, rng, dtype=dtype)
        self.out.bias.data[...] = bias_init

    def __call__(self, x: Tensor) -> Tensor:
        return self.out(T.relu(self.conv(x)))


class CircleSnake(Module):
    def __init__(self, cfg: ModelConfig | None = None, dtype=np.float32):
        self.cfg = cfg = cfg or ModelConfig()
        rng = np.random.default_rng(cfg.seed)
        self.backbone = Backbone(cfg.backbone_widths, rng, dtype)
        c = self.backbone.out_channels
        self.hm_head = Head(c, cfg.head_conv, cfg.heads["ct_hm"], rng,
                            bias_init=-math.log((1 - 0.1) / 0.1), dtype=dtype)
        self.radius_head = Head(c, cfg.head_conv, cfg.heads["radius"], rng, dtype=dtype)
        self.reg_head = Head(c, cfg.head_conv, cfg.heads["reg"], rng, dtype=dtype)
        self.snake = SnakeNetwork(c + 2, cfg.snake_width, seed=cfg.seed + 1, dtype=dtype)
        self.dtype = dtype

    def heads(self, batch: np.ndarray):
        """Backbone plus heads on a preprocessed batch.

        Returns ``(heatmap, radius, offset, features)`` Tensors at stride R.
        """
        if batch.ndim != 4 or batch.shape[1] != 3:
            raise ValueError(f"expected a (B, 3, H, W) batch, got {batch.shape}")
        feats = self.backbone(Tensor(batch.astype(self.dtype, copy=False)))
        hm = T.clamped_sigmoid(self.hm_head(feats))
        return hm, self.radius_head(feats), self.reg_head(feats), feats

    def predict(self, image: np.ndarray, ct_score: float | None = None,
                top_n: int | None = None, deform_iters: int | None = None
                ) -> tuple[tuple[np.ndarray, ...], list[InstancePrediction]]:
        """Detect and segment instances in one uint8 (H, W, 3) image."""
        if image.ndim != 3 or image.shape[2] != 3:
            raise ValueError(f"image must have 3 channels, got shape {image.shape}")
        cfg = self.cfg
        was_training = self.training
        self.eval()
        try:
            hm, rad, off, feats = self.heads(preprocess([image], self.dtype))
            det = decode_circles(hm.data[0], rad.data[0], off.data[0],
                                 cfg.top_n if top_n is None else top_n,
                                 cfg.ct_score if ct_score is None else ct_score,
                                 cfg.down_ratio, min_radius=1.0)
            iters = cfg.deform_iters if deform_iters is None else deform_iters
            preds = []
            if det.circles:
                init = np.stack([sample_circle_contour(c, cfg.num_vertices).vertices
                                 for c in det.circles])
                final = init
                if iters > 0:
                    final = deform(init, feats, self.snake, iters, cfg.down_ratio)[-1].data
                for c, ring in zip(det.circles, final):
                    preds.append(InstancePrediction(
                        c, Contour(np.asarray(ring, dtype=np.float64), c.class_id, c.score),
                        c.score))
        finally:
            self.train(was_training)
        maps = (hm.data[0], rad.data[0], off.data[0])
        return maps, preds

    def jittered_proposals(self, circles: Sequence[Circle], rng: np.random.Generator) -> np.ndarray:
        cfg = self.cfg
        j = cfg.proposal_jitter
        rings = []
        for c in circles:
            dx, dy, dr = rng.uniform(-j, j, size=3)
            jc = Circle(c.cx + dx * c.r, c.cy + dy * c.r, c.r * (1 + dr), c.class_id)
            rings.append(sample_circle_contour(jc, cfg.num_vertices).vertices)
        return np.asarray(rings).reshape(-1, cfg.num_vertices, 2)

    def loss(self, samples: Sequence[Sample], rng: np.random.Generator
             ) -> tuple[Tensor, LossBreakdown]:
        cfg = self.cfg
        batch = preprocess([s.image for s in samples], self.dtype)
        hm, rad, off, feats = self.heads(batch)
        targets = [s.targets for s in samples]
        w = cfg.loss_weights()
        l_det, parts = detection_loss(
            focal_loss(hm, targets, w.alpha, w.beta), radius_loss(rad, targets),
            offset_loss(off, targets), w)
        total = l_det
        rings = [self.jittered_proposals(s.circles, rng) for s in samples]
        bidx = np.concatenate([np.full(len(r), i, dtype=np.intp) for i, r in enumerate(rings)])
        if len(bidx) and cfg.deform_iters > 0:
            init = np.concatenate(rings)
            gt = np.concatenate([s.contours for s in samples])
            stages = deform(init, feats, self.snake, cfg.deform_iters, cfg.down_ratio, bidx)
            l_iter = iter_loss(stages[0], gt)
            for st in stages[1:]:
                l_iter = T.add(l_iter, iter_loss(st, gt))
            parts.l_iter = float(l_iter.data)
            total = T.add(total, T.scale(l_iter, cfg.lambda_iter))
        return total, parts

    # -- persistence ----------------------------------------------------------

    def save(self, path, state: AdamState | None = None, extra: dict | None = None) -> None:
        meta = {"config": _config_to_json(self.cfg)}
        meta.update(extra or {})
        save_checkpoint(path, {k: v.data for k, v in self.parameters().items()}, state,
                        self.buffers(), meta)

    @classmethod
    def load(cls, path) -> tuple["CircleSnake", AdamState | None, dict]:
        ck = load_checkpoint(path)
        cfg = ModelConfig(**_config_from_json(ck.meta["config"]))
        model = cls(cfg)
        model.load_arrays(ck.params, ck.buffers)
        return model, ck.state, ck.meta


def _config_to_json(cfg: ModelConfig) -> dict:
    d = asdict(cfg)
    for k, v in d.items():
        if isinstance(v, tuple):
            d[k] = list(v)
    return d


def _config_from_json(d: dict) -> dict:
    return dict(d)


def train_step(model: CircleSnake, samples: Sequence[Sample], state: AdamState,
               rng: np.random.Generator, step: int = 0) -> LossBreakdown:
    """Forward, backward and one Adam update on ``samples``."""
    if not samples:
        raise ValueError("empty batch")
    model.train()
    total, parts = model.loss(samples, rng)
    if not np.isfinite(total.data):
        raise FloatingPointError(f"non-finite loss at step {step}: {parts}")
    params = model.parameters()
    model.zero_grad()
    total.backward()
    for p in params.values():
        if p.grad is None:
            p.grad = np.zeros_like(p.data)
    adam_step(params, state)
    model.zero_grad()
    return parts
