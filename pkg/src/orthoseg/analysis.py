"""Coverage statistics and multi-temporal change detection.

Change detection assumes co-registered surveys (same pixel grid and pixel
size); candidate region pairs of the same class with raster IoU >= tau are
matched greedily, highest IoU first. Matching is deliberately greedy, not
optimal assignment: deterministic and near-optimal for spatially separated
regions. Records serialize to CSV and JSON (docs/csv-schemas.md).
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataset import render_labels
from .raster import ClassCatalog, OrthoMap
from .regions import Region, rasterize

__all__ = [
    "CoverageReport",
    "CoverageRow",
    "ChangeRecord",
    "AnalysisError",
    "coverage",
    "detect_changes",
    "export_csv",
    "changes_to_json",
    "changes_to_csv",
]

DEFAULT_TAU_IOU = 0.25
DEFAULT_GROW_THRESH = 0.05

COVERAGE_HEADER = ("class_index", "class_name", "region_count",
                   "area_px", "area_mm2", "coverage_percent")
CHANGES_HEADER = ("status", "class_index", "class_name", "region_a", "region_b",
                  "iou", "area_ratio")


class AnalysisError(RuntimeError):
    pass


@dataclass(frozen=True)
class CoverageRow:
    class_index: int
    class_name: str
    region_count: int
    area_px: float
    area_mm2: float
    coverage_percent: float


@dataclass
class CoverageReport:
    area: tuple[int, int, int, int]
    pixel_size_mm: float
    rows: list[CoverageRow] = field(default_factory=list)

    def to_json(self) -> dict:
        return {"area": list(self.area), "pixel_size_mm": self.pixel_size_mm,
                "rows": [row.__dict__ for row in self.rows]}


@dataclass(frozen=True)
class ChangeRecord:
    status: str  # same | grown | shrunk | new | gone | reclassified
    class_index: int
    region_a: int | None
    region_b: int | None
    iou: float
    area_ratio: float | None  # B/A when both exist

    def to_json(self) -> dict:
        return dict(self.__dict__)


# ---------------------------------------------------------------------------
# coverage


def coverage(regions: list[Region], catalog: ClassCatalog,
             area: tuple[int, int, int, int], pixel_size_mm: float,
             band_rows: int = 1024) -> CoverageReport:
    """Per-class region counts and rasterized areas over a working area.

    Overlaps resolve like dataset label rendering (later region id wins), so
    totals never double-count. Rasterization runs in row bands to bound
    memory on large areas.
    """
    ax, ay, aw, ah = area
    if aw <= 0 or ah <= 0:
        raise AnalysisError("empty working area")
    counts = np.zeros(len(catalog), dtype=np.int64)
    pixels = np.zeros(len(catalog), dtype=np.int64)
    for r in regions:
        if _intersects(r, area) and rasterize(r, area).any():
            counts[r.class_index] += 1
    for y in range(ay, ay + ah, band_rows):
        h = min(band_rows, ay + ah - y)
        labels = render_labels(regions, (ax, y, aw, h))
        pixels += np.bincount(labels.ravel(), minlength=len(catalog))

    total = aw * ah
    rows = []
    for c in range(1, len(catalog)):
        if counts[c] == 0 and pixels[c] == 0:
            continue
        rows.append(CoverageRow(
            class_index=c,
            class_name=catalog.name(c),
            region_count=int(counts[c]),
            area_px=float(pixels[c]),
            area_mm2=float(pixels[c]) * pixel_size_mm ** 2,
            coverage_percent=100.0 * float(pixels[c]) / total,
        ))
    return CoverageReport(area=tuple(area), pixel_size_mm=pixel_size_mm,
                          rows=rows)


def _intersects(region: Region, area) -> bool:
    ax, ay, aw, ah = area
    bx, by, bw, bh = region.bbox()
    return not (bx >= ax + aw or by >= ay + ah or bx + bw <= ax or by + bh <= ay)


# ---------------------------------------------------------------------------
# change detection


def detect_changes(regions_a: list[Region], regions_b: list[Region],
                   map_a: OrthoMap | None = None, map_b: OrthoMap | None = None,
                   tau_iou: float = DEFAULT_TAU_IOU,
                   grow_thresh: float = DEFAULT_GROW_THRESH) -> list[ChangeRecord]:
    """Match regions across two co-registered surveys and classify changes."""
    if map_a is not None and map_b is not None:
        if map_a.pixel_size_mm != map_b.pixel_size_mm:
            raise AnalysisError(
                f"pixel size mismatch: {map_a.pixel_size_mm} vs "
                f"{map_b.pixel_size_mm} mm/px")

    masks_a = {r.id: _region_raster(r) for r in regions_a}
    masks_b = {r.id: _region_raster(r) for r in regions_b}

    def candidates(same_class: bool):
        pairs = []
        for ra in regions_a:
            for rb in regions_b:
                if (ra.class_index == rb.class_index) != same_class:
                    continue
                iou, ratio = _pair_iou(masks_a[ra.id], masks_b[rb.id])
                if iou >= tau_iou:
                    pairs.append((iou, ra, rb, ratio))
        pairs.sort(key=lambda t: (-t[0], t[1].id, t[2].id))
        return pairs

    records: list[ChangeRecord] = []
    matched_a: set[int] = set()
    matched_b: set[int] = set()
    for iou, ra, rb, ratio in candidates(same_class=True):
        if ra.id in matched_a or rb.id in matched_b:
            continue
        matched_a.add(ra.id)
        matched_b.add(rb.id)
        if ratio > 1.0 + grow_thresh:
            status = "grown"
        elif ratio < 1.0 - grow_thresh:
            status = "shrunk"
        else:
            status = "same"
        records.append(ChangeRecord(status=status, class_index=ra.class_index,
                                    region_a=ra.id, region_b=rb.id,
                                    iou=iou, area_ratio=ratio))

    for ra in regions_a:
        if ra.id not in matched_a:
            records.append(ChangeRecord(status="gone", class_index=ra.class_index,
                                        region_a=ra.id, region_b=None,
                                        iou=0.0, area_ratio=None))
    for rb in regions_b:
        if rb.id not in matched_b:
            records.append(ChangeRecord(status="new", class_index=rb.class_index,
                                        region_a=None, region_b=rb.id,
                                        iou=0.0, area_ratio=None))

    # cross-class overlaps among unmatched regions: likely reclassifications
    for iou, ra, rb, ratio in candidates(same_class=False):
        if ra.id in matched_a or rb.id in matched_b:
            continue
        records.append(ChangeRecord(status="reclassified",
                                    class_index=rb.class_index,
                                    region_a=ra.id, region_b=rb.id,
                                    iou=iou, area_ratio=ratio))
    return records


def _region_raster(region: Region) -> tuple[tuple[int, int], np.ndarray]:
    bx, by, bw, bh = region.bbox()
    x0 = int(np.floor(bx)) - 1
    y0 = int(np.floor(by)) - 1
    w = int(np.ceil(bx + bw)) - x0 + 2
    h = int(np.ceil(by + bh)) - y0 + 2
    return (x0, y0), rasterize(region, (x0, y0, w, h))


def _pair_iou(a, b) -> tuple[float, float]:
    (ax, ay), ma = a
    (bx, by), mb = b
    x0 = min(ax, bx)
    y0 = min(ay, by)
    x1 = max(ax + ma.shape[1], bx + mb.shape[1])
    y1 = max(ay + ma.shape[0], by + mb.shape[0])
    big_a = np.zeros((y1 - y0, x1 - x0), dtype=bool)
    big_b = np.zeros_like(big_a)
    big_a[ay - y0:ay - y0 + ma.shape[0], ax - x0:ax - x0 + ma.shape[1]] = ma
    big_b[by - y0:by - y0 + mb.shape[0], bx - x0:bx - x0 + mb.shape[1]] = mb
    inter = int((big_a & big_b).sum())
    union = int((big_a | big_b).sum())
    na, nb = int(ma.sum()), int(mb.sum())
    iou = inter / union if union else 0.0
    ratio = nb / na if na else float("inf")
    return iou, ratio


# ---------------------------------------------------------------------------
# tabular export


def export_csv(report: CoverageReport, path) -> Path:
    """Coverage table; fixed header, 3-decimal numbers, deterministic order."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(COVERAGE_HEADER)
    for row in sorted(report.rows, key=lambda r: r.class_index):
        writer.writerow([
            row.class_index, row.class_name, row.region_count,
            f"{row.area_px:.3f}", f"{row.area_mm2:.3f}",
            f"{row.coverage_percent:.3f}",
        ])
    out = Path(path)
    out.write_text(buf.getvalue(), encoding="utf-8")
    return out


def changes_to_csv(records: list[ChangeRecord], catalog: ClassCatalog, path) -> Path:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CHANGES_HEADER)
    order = {"same": 0, "grown": 1, "shrunk": 2, "gone": 3, "new": 4,
             "reclassified": 5}
    for rec in sorted(records, key=lambda r: (order[r.status],
                                              r.region_a if r.region_a is not None else -1,
                                              r.region_b if r.region_b is not None else -1)):
        writer.writerow([
            rec.status, rec.class_index, catalog.name(rec.class_index),
            "" if rec.region_a is None else rec.region_a,
            "" if rec.region_b is None else rec.region_b,
            f"{rec.iou:.3f}",
            "" if rec.area_ratio is None else f"{rec.area_ratio:.3f}",
        ])
    out = Path(path)
    out.write_text(buf.getvalue(), encoding="utf-8")
    return out


def changes_to_json(records: list[ChangeRecord], path=None):
    data = [rec.to_json() for rec in records]
    if path is None:
        return data
    out = Path(path)
    out.write_text(json.dumps(data, sort_keys=True, indent=1) + "\n")
    return out
