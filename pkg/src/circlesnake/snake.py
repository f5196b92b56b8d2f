"""Contour deformation network built from circular convolutions.

A contour of N vertices is treated as a periodic 1-D signal. Each vertex
carries the backbone features sampled under it plus its normalized
coordinates; a stack of residual circular-convolution blocks, a global fusion
feature and a small 1x1 head regress one 2-D offset per vertex.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import BatchNorm, CircConv, Module
from .tensor import Tensor

BACKBONE_DEPTH = 8
KERNEL_SIZE = 9
DEFAULT_ITERATIONS = 3


@dataclass
class VertexFeatures:
    values: Tensor       # (K, D + 2, N)
    coords: np.ndarray   # (K, N, 2) normalized coordinates appended last

    @property
    def num_vertices(self) -> int:
        return self.values.shape[-1]


def normalize_contour(vertices: np.ndarray) -> np.ndarray:
    """Center each ring on its vertex mean and scale by half its longer box side."""
    v = np.asarray(vertices, dtype=np.float64)
    center = v.mean(axis=-2, keepdims=True)
    extent = (v.max(axis=-2) - v.min(axis=-2)).max(axis=-1) / 2
    extent = np.maximum(extent, 1.0)[..., None, None]
    return (v - center) / extent


def build_vertex_features(feature_map: Tensor, contours, down: int = 4,
                          batch_index=None) -> VertexFeatures:
    """Stack sampled features and normalized coordinates per vertex.

    ``feature_map`` is (D, h, w) or (B, D, h, w); ``contours`` is (K, N, 2) or
    (N, 2) in input-image pixels. Returns values of shape (K, D + 2, N).
    """
    v = np.asarray(contours, dtype=np.float64)
    if v.ndim == 2:
        v = v[None]
    K, N, _ = v.shape
    D = feature_map.shape[-3]
    if feature_map.ndim == 4:
        bi = np.zeros(K, dtype=np.intp) if batch_index is None else np.asarray(batch_index)
        sampled = T.bilinear_sample(feature_map, v.reshape(-1, 2) / down, np.repeat(bi, N))
    else:
        sampled = T.bilinear_sample(feature_map, v.reshape(-1, 2) / down)
    sampled = T.transpose(T.reshape(sampled, (D, K, N)), (1, 0, 2))
    coords = normalize_contour(v)
    coord_t = Tensor(coords.transpose(0, 2, 1).astype(feature_map.dtype))
    return VertexFeatures(T.concat([sampled, coord_t], axis=1), coords)


class SnakeBlock(Module):
    """Circular conv, batch norm, ReLU, with a residual skip."""

    def __init__(self, cin: int, cout: int, rng, dtype=np.float32):
        self.conv = CircConv(cin, cout, KERNEL_SIZE, rng, dtype)
        self.bn = BatchNorm(cout, dtype=dtype)
        self.proj = CircConv(cin, cout, 1, rng, dtype) if cin != cout else None

    def __call__(self, x: Tensor) -> Tensor:
        y = T.relu(self.bn(self.conv(x)))
        skip = self.proj(x) if self.proj is not None else x
        return T.add(y, skip)


class SnakeNetwork(Module):
    def __init__(self, in_channels: int, width: int = 128, fusion_width: int | None = None,
                 head_widths: tuple[int, int] | None = None, seed: int = 0,
                 dtype=np.float32):
        rng = np.random.default_rng(seed)
        fusion_width = fusion_width or 2 * width
        h1, h2 = head_widths or (2 * width, max(width // 2, 8))
        self.in_channels = in_channels
        self.blocks = [SnakeBlock(in_channels if i == 0 else width, width, rng, dtype)
                       for i in range(BACKBONE_DEPTH)]
        self.fusion = CircConv(width * BACKBONE_DEPTH, fusion_width, 1, rng, dtype)
        cat = fusion_width + width * BACKBONE_DEPTH
        self.head = [CircConv(cat, h1, 1, rng, dtype), CircConv(h1, h2, 1, rng, dtype),
                     CircConv(h2, 2, 1, rng, dtype)]
        # untrained network leaves contours where they are
        self.head[-1].weight.data[...] = 0
        self.head[-1].bias.data[...] = 0

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-2] != self.in_channels:
            raise ValueError(f"expected {self.in_channels} vertex channels, got {x.shape[-2]}")
        states = []
        for block in self.blocks:
            x = block(x)
            states.append(x)
        cat = T.concat(states, axis=1)
        fused = T.max_over(self.fusion(cat), axis=-1)
        fused = T.broadcast_to(fused, fused.shape[:-1] + (cat.shape[-1],))
        h = T.concat([fused, cat], axis=1)
        h = T.relu(self.head[0](h))
        h = T.relu(self.head[1](h))
        return self.head[2](h)


def gcn_forward(vf: VertexFeatures | Tensor, net: SnakeNetwork) -> Tensor:
    """Per-vertex offsets of shape (K, 2, N)."""
    values = vf.values if isinstance(vf, VertexFeatures) else vf
    if values.ndim == 2:
        values = T.reshape(values, (1,) + values.shape)
    return net(values)


def deform(initial, feature_map: Tensor, net: SnakeNetwork,
           iterations: int = DEFAULT_ITERATIONS, down: int = 4,
           batch_index=None) -> list[Tensor]:
    """Run ``iterations`` deformation steps from ``initial`` (K, N, 2).

    Returns one (K, N, 2) Tensor per iteration; the last is the final contour.
    Each step starts from the detached previous contour.
    """
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    current = np.asarray(initial, dtype=np.float64)
    if current.ndim == 2:
        current = current[None]
    out = []
    for it in range(iterations):
        vf = build_vertex_features(feature_map, current, down, batch_index)
        offsets = gcn_forward(vf, net)
        if not np.all(np.isfinite(offsets.data)):
            raise FloatingPointError(f"non-finite offsets at deformation iteration {it}")
        moved = T.add(Tensor(current.astype(offsets.dtype)), T.transpose(offsets, (0, 2, 1)))
        out.append(moved)
        current = moved.data.astype(np.float64)
    return out
