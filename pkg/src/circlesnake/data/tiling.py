"""Overlapping tile grids over large images and per-tile annotation clipping."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..geometry import clip_polygon_to_rect, rasterize_polygon, signed_area

TILE_SIZE = 512
TILE_OVERLAP = 256
MIN_RETAINED_FRACTION = 0.3


@dataclass(frozen=True)
class TileGrid:
    width: int
    height: int
    tile_size: int
    overlap: int
    origins: tuple[tuple[int, int], ...]

    @property
    def stride(self) -> int:
        return self.tile_size - self.overlap

    def __len__(self) -> int:
        return len(self.origins)


def _axis_origins(dim: int, tile: int, stride: int) -> list[int]:
    if dim <= tile:
        return [0]
    origins = list(range(0, dim - tile + 1, stride))
    if origins[-1] != dim - tile:
        origins.append(dim - tile)
    return origins


def tile_grid(width: int, height: int, tile_size: int = TILE_SIZE,
              overlap: int = TILE_OVERLAP) -> TileGrid:
    """Row-major tile origins; the last tile on each axis is clamped to the edge.

    Images smaller than ``tile_size`` get a single origin and are zero-padded
    when the tile is cut.
    """
    if not 0 <= overlap < tile_size:
        raise ValueError(f"need 0 <= overlap < tile_size, got overlap={overlap}, "
                         f"tile_size={tile_size}")
    if width < 1 or height < 1:
        raise ValueError("image must be non-empty")
    stride = tile_size - overlap
    xs = _axis_origins(width, tile_size, stride)
    ys = _axis_origins(height, tile_size, stride)
    return TileGrid(width, height, tile_size, overlap, tuple((x, y) for y in ys for x in xs))


def cut_tile(image: np.ndarray, origin: tuple[int, int], tile_size: int) -> np.ndarray:
    """Copy a tile, zero-padding bottom/right where it runs past the image."""
    x, y = origin
    tile = np.zeros((tile_size, tile_size) + image.shape[2:], dtype=image.dtype)
    part = image[y:y + tile_size, x:x + tile_size]
    tile[:part.shape[0], :part.shape[1]] = part
    return tile


def patch_name(wsi_id: str, origin: tuple[int, int]) -> str:
    return f"{wsi_id}_x{origin[0]}_y{origin[1]}.png"


@dataclass
class TileAnnotations:
    origin: tuple[int, int]
    polygons: list[tuple[int, np.ndarray]]     # (class_id, tile-local ring)
    source_index: list[int]


def annotations_to_patches(annotations, grid: TileGrid,
                           min_fraction: float = MIN_RETAINED_FRACTION) -> list[TileAnnotations]:
    """Translate and clip slide-level rings into every tile they touch.

    ``annotations`` is a sequence of ``(class_id, ring)`` in slide pixels. A
    clipped piece is kept when at least ``min_fraction`` of the original area
    survives in that tile.
    """
    prepared = []
    for cls, ring in annotations:
        ring = np.asarray(ring, dtype=np.float64).reshape(-1, 2)
        prepared.append((cls, ring, ring.min(axis=0), ring.max(axis=0), abs(signed_area(ring))))
    out = []
    ts = grid.tile_size
    for ox, oy in grid.origins:
        polys, src = [], []
        for k, (cls, ring, lo, hi, area) in enumerate(prepared):
            if hi[0] <= ox or lo[0] >= ox + ts or hi[1] <= oy or lo[1] >= oy + ts:
                continue
            clipped = clip_polygon_to_rect(ring, ox, oy, ox + ts, oy + ts)
            if len(clipped) < 3:
                continue
            kept = abs(signed_area(clipped))
            if area <= 0 or kept < min_fraction * area:
                continue
            polys.append((cls, clipped - (ox, oy)))
            src.append(k)
        out.append(TileAnnotations((ox, oy), polys, src))
    return out


def class_masks(tile: TileAnnotations, tile_size: int, num_classes: int) -> np.ndarray:
    """(num_classes, tile_size, tile_size) boolean masks, one channel per class."""
    masks = np.zeros((num_classes, tile_size, tile_size), dtype=bool)
    for cls, ring in tile.polygons:
        masks[cls] |= rasterize_polygon(ring, tile_size, tile_size)
    return masks
