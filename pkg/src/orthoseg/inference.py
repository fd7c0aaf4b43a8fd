"""Sliding-window inference over huge orthoimages with seamless blending.

Tiles are predicted at full resolution and recombined with a separable
raised-cosine weight, so per-pixel probabilities are a weighted average of
every overlapping tile: position-independent models are reproduced exactly
(no tiling artifacts). Accumulation streams in row bands, so memory stays
O(tile rows), never O(full probability volume).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import OperationCancelled
from .raster import LabelRaster, OrthoMap, read_window
from .regions import Provenance, Region, vectorize

__all__ = [
    "InferenceConfig",
    "InferenceResult",
    "InferenceError",
    "window_weight",
    "run_inference",
    "raster_to_regions",
    "commit_regions",
    "preview",
]


class InferenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class InferenceConfig:
    tile_size: int = 1024
    stride: int = 512
    weight_floor: float = 1e-6
    min_region_px: float = 4.0
    grid_offset: tuple[int, int] = (0, 0)  # shifts the tile grid; coverage kept

    def __post_init__(self):
        if not (0 < self.stride <= self.tile_size):
            raise ValueError("stride must be in (0, tile_size]")
        if self.weight_floor <= 0:
            raise ValueError("weight_floor must be > 0")


@dataclass
class InferenceResult:
    labels: LabelRaster
    regions: list[Region]
    stats: dict = field(default_factory=dict)


def window_weight(tile_size: int, floor: float = 1e-6) -> np.ndarray:
    """Separable raised-cosine blending weight, maximal at the tile center."""
    if tile_size < 2:
        raise ValueError("tile_size must be >= 2")
    h = window_profile(tile_size, floor)
    return np.outer(h, h).astype(np.float32)


def window_profile(tile_size: int, floor: float = 1e-6) -> np.ndarray:
    i = np.arange(tile_size, dtype=np.float64)
    h = 0.5 - 0.5 * np.cos(2.0 * np.pi * (i + 0.5) / tile_size)
    return np.maximum(floor, h).astype(np.float32)


def _axis_origins(start: int, extent: int, tile: int, stride: int,
                  offset: int) -> list[int]:
    last = start + extent - tile
    if last < start:
        raise InferenceError("area smaller than one tile")
    xs = set()
    if offset > 0:
        xs.add(start)  # keep the leading edge covered
    x = start + (offset % stride)
    while x <= last:
        xs.add(x)
        x += stride
    xs.add(last)
    return sorted(xs)


def run_inference(omap: OrthoMap, model, area: tuple[int, int, int, int] | None = None,
                  config: InferenceConfig | None = None,
                  progress=None, should_cancel=None,
                  vectorize_regions: bool = True) -> InferenceResult:
    """Blend tile predictions over `area` and argmax into a label raster.

    `model` provides .classes (ascending catalog indices, no 0) and
    .predict(rgb_tile) -> (h, w, K) probabilities. Ties in the blended
    probabilities resolve to the lowest class index.
    """
    config = config or InferenceConfig()
    ax, ay, aw, ah = area if area is not None else (0, 0, omap.width, omap.height)
    if aw <= 0 or ah <= 0 or ax < 0 or ay < 0 \
            or ax + aw > omap.width or ay + ah > omap.height:
        raise InferenceError(f"area {area} outside map bounds")

    classes = np.asarray(model.classes, dtype=np.uint16)
    if len(classes) == 0 or 0 in model.classes:
        raise InferenceError("model must predict non-zero catalog classes")
    k = len(classes)

    tile_w = min(config.tile_size, aw)
    tile_h = min(config.tile_size, ah)
    stride_x = min(config.stride, tile_w)
    stride_y = min(config.stride, tile_h)
    xs = _axis_origins(ax, aw, tile_w, stride_x, config.grid_offset[0])
    ys = _axis_origins(ay, ah, tile_h, stride_y, config.grid_offset[1])
    wx = window_profile(tile_w, config.weight_floor).astype(np.float32)
    wy = window_profile(tile_h, config.weight_floor).astype(np.float32)
    weight = np.outer(wy, wx)[..., None]  # (th, tw, 1)

    out = np.zeros((ah, aw), dtype=np.uint16)
    total_tiles = len(xs) * len(ys)
    done_tiles = 0

    buf_y0 = ys[0]
    acc = np.zeros((tile_h, aw, k), dtype=np.float32)
    wsum = np.zeros((tile_h, aw, 1), dtype=np.float32)
    peak_rows = tile_h

    def flush(upto: int):
        nonlocal buf_y0, acc, wsum
        rows = upto - buf_y0
        if rows <= 0:
            return
        seg_w = wsum[:rows]
        if not np.all(seg_w > 0.0):
            raise InferenceError("coverage gap: pixel with zero blend weight")
        probs = acc[:rows] / seg_w
        out[buf_y0 - ay:upto - ay] = classes[np.argmax(probs, axis=-1)]
        acc = np.concatenate([acc[rows:], np.zeros((rows, aw, k), np.float32)])
        wsum = np.concatenate([wsum[rows:], np.zeros((rows, aw, 1), np.float32)])
        buf_y0 = upto

    for iy, y in enumerate(ys):
        flush(y)
        for x in xs:
            if should_cancel and should_cancel():
                raise OperationCancelled(
                    f"inference cancelled after {done_tiles}/{total_tiles} tiles")
            win = read_window(omap, (x, y), tile_w, tile_h)
            probs = np.asarray(model.predict(win.pixels), dtype=np.float32)
            if probs.shape != (tile_h, tile_w, k):
                raise InferenceError(
                    f"model returned {probs.shape}, wanted {(tile_h, tile_w, k)}")
            ys0 = y - buf_y0
            xs0 = x - ax
            acc[ys0:ys0 + tile_h, xs0:xs0 + tile_w] += weight * probs
            wsum[ys0:ys0 + tile_h, xs0:xs0 + tile_w] += weight
            done_tiles += 1
            if progress:
                progress(done_tiles / total_tiles)
    flush(ay + ah)

    raster = LabelRaster(origin=(ax, ay), labels=out)
    regions = raster_to_regions(raster, config.min_region_px) \
        if vectorize_regions else []
    stats = {"tiles": total_tiles, "peak_active_rows": int(peak_rows),
             "grid": {"xs": xs, "ys": ys}}
    return InferenceResult(labels=raster, regions=regions, stats=stats)


def raster_to_regions(raster: LabelRaster, min_region_px: float = 4.0) -> list[Region]:
    """Vectorize each class plane; speckles below min_region_px are dropped."""
    regions = []
    for cls in np.unique(raster.labels):
        if cls == 0:
            continue
        mask = raster.labels == cls
        regions.extend(vectorize(mask, window_origin=raster.origin,
                                 class_index=int(cls),
                                 provenance=Provenance.AUTOMATIC,
                                 min_region_px=min_region_px))
    return regions


def commit_regions(project, map_id: str, regions: list[Region]):
    """Append regions to the project as one undoable transaction."""
    from .project import TxOp
    return project.apply_transaction(
        [TxOp.create(map_id, r) for r in regions])


def preview(omap: OrthoMap, model, area: tuple[int, int, int, int],
            config: InferenceConfig | None = None, progress=None,
            should_cancel=None) -> LabelRaster:
    """Inference restricted to an area, no regions committed."""
    result = run_inference(omap, model, area=area, config=config,
                           progress=progress, should_cancel=should_cancel,
                           vectorize_regions=False)
    return result.labels
