"""Vector region model: polygons with holes, mask conversion, statistics, booleans.

Regions are stored as an outer ring (signed area > 0 under the shoelace
formula, y axis pointing down) plus hole rings (signed area < 0), all in
sub-pixel image coordinates. Pixel (i, j) covers the unit square
[i, i+1] x [j, j+1]; its center sits at (i+0.5, j+0.5). Contours produced by
`vectorize` run along the integer pixel-boundary grid, which is what makes
rasterize(vectorize(m)) == m an exact identity.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage
from shapely.geometry import MultiPolygon, Polygon
from shapely.ops import unary_union

__all__ = [
    "COORD_SNAP",
    "Provenance",
    "Region",
    "RegionStats",
    "GeometryError",
    "rasterize",
    "vectorize",
    "trace_contours",
    "compute_stats",
    "merge",
    "subtract",
    "ring_area",
    "region_area",
    "region_from_shapely",
    "region_to_shapely",
    "validate_region",
]

# Coordinates are snapped to this grid before any boolean operation; keeps
# GEOS away from near-degenerate float constructions.
COORD_SNAP = 1.0 / 1024.0

FOUR_CONNECTED = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)


class Provenance:
    """Allowed provenance tags for a region."""

    MANUAL = "manual"
    ASSISTED_CLICK = "assisted-click"
    REFINED = "refined"
    AUTOMATIC = "automatic"
    IMPORTED = "imported"
    EDITED = "edited"

    ALL = (MANUAL, ASSISTED_CLICK, REFINED, AUTOMATIC, IMPORTED, EDITED)


class GeometryError(ValueError):
    """Raised for degenerate or invariant-violating geometry."""


@dataclass(frozen=True)
class RegionStats:
    area_px: float
    area_mm2: float
    perimeter_px: float
    perimeter_mm: float
    centroid: tuple[float, float]
    bbox: tuple[float, float, float, float]  # x, y, w, h


@dataclass
class Region:
    """A labeled area: outer ring + holes, class id, provenance, cached stats.

    id < 0 means "not yet registered with a project"; the project assigns
    final ids when a region is committed.
    """

    id: int
    class_index: int
    outer: np.ndarray  # (n, 2) float64, closed implicitly, signed area > 0
    holes: list[np.ndarray] = field(default_factory=list)
    provenance: str = Provenance.MANUAL
    cached_stats: RegionStats | None = None

    def __post_init__(self):
        self.outer = np.asarray(self.outer, dtype=np.float64)
        self.holes = [np.asarray(h, dtype=np.float64) for h in self.holes]

    def bbox(self) -> tuple[float, float, float, float]:
        xs, ys = self.outer[:, 0], self.outer[:, 1]
        return (float(xs.min()), float(ys.min()),
                float(xs.max() - xs.min()), float(ys.max() - ys.min()))

    def with_geometry(self, outer, holes) -> "Region":
        return replace(self, outer=np.asarray(outer, float),
                       holes=[np.asarray(h, float) for h in holes],
                       cached_stats=None)


def ring_area(ring: np.ndarray) -> float:
    """Signed shoelace area of a closed ring given without the repeated vertex."""
    x, y = ring[:, 0], ring[:, 1]
    return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


def ring_perimeter(ring: np.ndarray) -> float:
    d = np.roll(ring, -1, axis=0) - ring
    return float(np.sum(np.hypot(d[:, 0], d[:, 1])))


def region_area(region: Region) -> float:
    """Net area in px^2: outer minus holes."""
    return ring_area(region.outer) + sum(ring_area(h) for h in region.holes)


def validate_region(region: Region) -> None:
    """Check the Region invariants; raises GeometryError on violation."""
    if len(region.outer) < 3:
        raise GeometryError("outer ring needs at least 3 vertices")
    if ring_area(region.outer) <= 0:
        raise GeometryError("outer ring must have positive signed area")
    for h in region.holes:
        if ring_area(h) >= 0:
            raise GeometryError("hole rings must have negative signed area")
    poly = region_to_shapely(region)
    if not poly.is_valid:
        raise GeometryError("region rings are not simple/properly nested")


# ---------------------------------------------------------------------------
# rasterization

def rasterize(region: Region, window: tuple[int, int, int, int]) -> np.ndarray:
    """Binary mask of the region over `window` = (x, y, w, h) in map pixels.

    A pixel is set iff its center is inside the outer ring and outside all
    holes (even-odd rule). Returns a (h, w) bool array.
    """
    ox, oy, w, h = window
    mask = np.zeros((h, w), dtype=bool)
    bx, by, bw, bh = region.bbox()
    if bx >= ox + w or by >= oy + h or bx + bw <= ox or by + bh <= oy:
        return mask
    rings = [region.outer] + list(region.holes)
    # Parity fill: each edge toggles parity for all pixel centers to its right
    # on every scanline it crosses (half-open in y, so shared vertices count
    # once and local extrema count zero times).
    toggle = np.zeros((h, w + 1), dtype=np.int32)
    for ring in rings:
        x1 = ring[:, 0]
        y1 = ring[:, 1]
        x2 = np.roll(x1, -1)
        y2 = np.roll(y1, -1)
        keep = y1 != y2
        if not keep.any():
            continue
        ex1, ey1, ex2, ey2 = x1[keep], y1[keep], x2[keep], y2[keep]
        ylo = np.minimum(ey1, ey2)
        yhi = np.maximum(ey1, ey2)
        # scanline centers oy + j + 0.5 in [ylo, yhi)
        jlo = np.ceil(ylo - oy - 0.5).astype(np.int64)
        jhi = np.ceil(yhi - oy - 0.5).astype(np.int64)
        np.clip(jlo, 0, h, out=jlo)
        np.clip(jhi, 0, h, out=jhi)
        counts = jhi - jlo
        sel = counts > 0
        if not sel.any():
            continue
        counts = counts[sel]
        starts = jlo[sel]
        rows = np.repeat(starts, counts) + _ragged_arange(counts)
        edge_of = np.repeat(np.flatnonzero(sel), counts)
        yc = oy + rows + 0.5
        t = (yc - ey1[edge_of]) / (ey2[edge_of] - ey1[edge_of])
        cx = ex1[edge_of] + t * (ex2[edge_of] - ex1[edge_of])
        # first pixel index whose center (ox + i + 0.5) is >= crossing
        ix = np.ceil(cx - ox - 0.5).astype(np.int64)
        np.clip(ix, 0, w, out=ix)
        np.add.at(toggle, (rows, ix), 1)
    return (np.cumsum(toggle[:, :w], axis=1) % 2).astype(bool)


def _ragged_arange(counts: np.ndarray) -> np.ndarray:
    """[0..c0-1, 0..c1-1, ...] for an array of counts."""
    total = int(counts.sum())
    out = np.ones(total, dtype=np.int64)
    out[0] = 0
    ends = np.cumsum(counts)[:-1]
    out[ends] -= counts[:-1]
    return np.cumsum(out)


# ---------------------------------------------------------------------------
# contour tracing (mask -> rings)

# directions: 0 = +x, 1 = +y, 2 = -x, 3 = -y
_STEP = ((1, 0), (0, 1), (-1, 0), (0, -1))


def trace_contours(mask: np.ndarray) -> list[tuple[np.ndarray, list[np.ndarray], int]]:
    """Trace pixel-boundary contours of a binary mask into simple rings.

    Returns (outer_ring, hole_rings, pixel_count) tuples, one per region
    piece, rings on the integer corner grid (local coordinates). Outer rings
    have positive shoelace area, holes negative. Foreground connects
    4-ways; loops that revisit a corner (a checkerboard pinch inside one
    component) are split there, so every ring is simple and pieces touch at
    most in single vertices.
    """
    mask = np.ascontiguousarray(mask, dtype=bool)
    h, w = mask.shape
    if not mask.any():
        return []
    labels, _ = ndimage.label(mask, structure=FOUR_CONNECTED)

    padded = np.zeros((h + 2, w + 2), dtype=bool)
    padded[1:-1, 1:-1] = mask
    core = padded[1:-1, 1:-1]
    # Directed boundary edges keyed by (start vertex, direction); each edge
    # belongs to exactly one foreground pixel and keeps it on its inner side.
    top = core & ~padded[:-2, 1:-1]
    right = core & ~padded[1:-1, 2:]
    bottom = core & ~padded[2:, 1:-1]
    left = core & ~padded[1:-1, :-2]

    edges: set[tuple[int, int, int]] = set()
    for arr, d in ((top, 0), (right, 1), (bottom, 2), (left, 3)):
        ys, xs = np.nonzero(arr)
        if d == 0:
            vx, vy = xs, ys
        elif d == 1:
            vx, vy = xs + 1, ys
        elif d == 2:
            vx, vy = xs + 1, ys + 1
        else:
            vx, vy = xs, ys + 1
        for sx, sy in zip(vx.tolist(), vy.tolist()):
            edges.add((sx, sy, d))

    # Right-turn priority keeps each walk hugging one pixel's corner at
    # 4-valent crossings: diagonal foreground separates (4-connectivity)
    # and loops never leave their component.
    pri = {0: (1, 0, 3), 1: (2, 1, 0), 2: (3, 2, 1), 3: (0, 3, 2)}
    rings: list[list[tuple[int, int]]] = []
    visited: set[tuple[int, int, int]] = set()
    for start_key in sorted(edges):
        if start_key in visited:
            continue
        ring_pts: list[tuple[int, int]] = []
        key = start_key
        while True:
            visited.add(key)
            kx, ky, kd = key
            step = _STEP[kd]
            ex, ey = kx + step[0], ky + step[1]
            nxt = None
            for nd in pri[kd]:
                cand = (ex, ey, nd)
                if cand in edges:
                    nxt = cand
                    break
            if nxt is None:  # cannot happen on a consistent boundary set
                raise RuntimeError("broken contour chain")
            if nd != kd:  # direction change -> corner vertex
                ring_pts.append((ex, ey))
            key = nxt
            if key == start_key:
                break
        rings.extend(_split_at_repeats(ring_pts))

    # Group simple rings into (outer, holes) pieces. A ring's interior
    # representative is the pixel south-east of its top-left-most corner:
    # a foreground pixel for outers, the enclosed background for holes.
    positives: dict[int, list] = {}  # component -> [(area, ring, rep_pixel)]
    negatives: list[tuple[float, np.ndarray, tuple[int, int], int]] = []
    for pts in rings:
        ring = np.asarray(pts, dtype=np.float64)
        area = ring_area(ring)
        vx, vy = min(pts, key=lambda p: (p[1], p[0]))
        if area > 0:
            comp = int(labels[vy, vx])
            positives.setdefault(comp, []).append((area, ring, (vx, vy)))
        else:
            comp = int(labels[vy - 1, vx])  # foreground just above the hole
            negatives.append((area, ring, (vx, vy), comp))

    pieces: list[dict] = []
    piece_of: dict[int, list[int]] = {}
    for comp in sorted(positives):
        for area, ring, rep in sorted(positives[comp], key=lambda t: -t[0]):
            piece_of.setdefault(comp, []).append(len(pieces))
            pieces.append({"outer": ring, "holes": [], "area": area})
    for area, ring, (vx, vy), comp in negatives:
        candidates = piece_of[comp]
        target = None
        if len(candidates) == 1:
            target = candidates[0]
        else:
            px, py = vx + 0.5, vy + 0.5
            best_area = None
            for idx in candidates:
                if _point_in_ring(px, py, pieces[idx]["outer"]) and \
                        (best_area is None or pieces[idx]["area"] < best_area):
                    best_area = pieces[idx]["area"]
                    target = idx
        pieces[target]["holes"].append(ring)
        pieces[target]["area"] += area

    return [(p["outer"], p["holes"], int(round(p["area"]))) for p in pieces]


def _split_at_repeats(pts: list[tuple[int, int]]) -> list[list[tuple[int, int]]]:
    """Split a closed vertex cycle at repeated vertices into simple cycles."""
    out: list[list[tuple[int, int]]] = []
    pos: dict[tuple[int, int], int] = {}
    cur: list[tuple[int, int]] = []
    for p in pts:
        if p in pos:
            i = pos[p]
            sub = cur[i:]
            for q in sub[1:]:
                pos.pop(q, None)
            out.append(sub)
            del cur[i + 1:]
        else:
            pos[p] = len(cur)
            cur.append(p)
    if len(cur) >= 3:
        out.append(cur)
    return [s for s in out if len(s) >= 3]


def _point_in_ring(px: float, py: float, ring: np.ndarray) -> bool:
    inside = False
    n = len(ring)
    for i in range(n):
        x1, y1 = ring[i]
        x2, y2 = ring[(i + 1) % n]
        if (y1 <= py) != (y2 <= py):
            cx = x1 + (py - y1) * (x2 - x1) / (y2 - y1)
            if px >= cx:
                inside = not inside
    return inside


def vectorize(mask: np.ndarray,
              window_origin: tuple[float, float] = (0.0, 0.0),
              class_index: int = 1,
              provenance: str = Provenance.MANUAL,
              min_region_px: float = 0.0) -> list[Region]:
    """Regions for the 4-connected foreground of `mask`.

    Contours follow pixel boundaries so rasterize(vectorize(m)) == m exactly
    and region areas equal pixel counts. A component pinched at checkerboard
    corners yields one region per pinch-free piece (rings must stay simple).
    Pieces smaller than `min_region_px` pixels are dropped (default keeps
    everything).
    """
    ox, oy = window_origin
    regions = []
    for outer, holes, n_px in trace_contours(mask):
        if n_px < min_region_px:
            continue
        outer = outer + (ox, oy)
        holes = [h + (ox, oy) for h in holes]
        regions.append(Region(id=-1, class_index=class_index, outer=outer,
                              holes=holes, provenance=provenance))
    return regions


# ---------------------------------------------------------------------------
# statistics

def compute_stats(region: Region, pixel_size_mm: float) -> RegionStats:
    """Area, perimeter, centroid and bbox; mm quantities scaled by pixel size."""
    area = region_area(region)
    if abs(area) < 1e-9:
        raise GeometryError("degenerate polygon (area < 1e-9 px^2)")
    perim = ring_perimeter(region.outer) + sum(ring_perimeter(h) for h in region.holes)
    # area-weighted centroid over outer + holes (holes contribute negatively)
    cx = cy = 0.0
    for ring in [region.outer] + list(region.holes):
        x, y = ring[:, 0], ring[:, 1]
        xn, yn = np.roll(x, -1), np.roll(y, -1)
        cross = x * yn - xn * y
        cx += float(np.sum((x + xn) * cross)) / 6.0
        cy += float(np.sum((y + yn) * cross)) / 6.0
    centroid = (cx / area, cy / area)
    return RegionStats(
        area_px=area,
        area_mm2=area * pixel_size_mm ** 2,
        perimeter_px=perim,
        perimeter_mm=perim * pixel_size_mm,
        centroid=centroid,
        bbox=region.bbox(),
    )


# ---------------------------------------------------------------------------
# shapely bridge and booleans

def snap_coords(coords: np.ndarray) -> np.ndarray:
    return np.round(np.asarray(coords, dtype=np.float64) / COORD_SNAP) * COORD_SNAP


def region_to_shapely(region: Region, snap: bool = False) -> Polygon:
    outer = snap_coords(region.outer) if snap else region.outer
    holes = [snap_coords(h) if snap else h for h in region.holes]
    return Polygon(outer, holes)


def region_from_shapely(poly: Polygon, class_index: int, provenance: str,
                        region_id: int = -1) -> Region:
    """Build a Region from a shapely polygon, normalizing ring orientation."""
    outer = np.asarray(poly.exterior.coords)[:-1]
    if ring_area(outer) < 0:
        outer = outer[::-1]
    holes = []
    for interior in poly.interiors:
        hole = np.asarray(interior.coords)[:-1]
        if ring_area(hole) > 0:
            hole = hole[::-1]
        holes.append(hole)
    return Region(id=region_id, class_index=class_index, outer=outer,
                  holes=holes, provenance=provenance)


def _polys_of(geom) -> list[Polygon]:
    if geom.is_empty:
        return []
    if isinstance(geom, Polygon):
        return [geom]
    if isinstance(geom, MultiPolygon):
        return list(geom.geoms)
    return [g for g in getattr(geom, "geoms", []) if isinstance(g, Polygon)]


def _emit(polys, class_index, provenance) -> list[Region]:
    regions = []
    for p in sorted(polys, key=lambda g: (g.bounds[0], g.bounds[1])):
        if p.area <= 0:
            continue
        regions.append(region_from_shapely(p, class_index, provenance))
    return regions


def merge(regions: list[Region]) -> list[Region]:
    """Union of same-class regions (even-odd on valid inputs).

    Disjoint inputs come back unchanged as multiple regions.
    """
    if not regions:
        return []
    classes = {r.class_index for r in regions}
    if len(classes) > 1:
        raise GeometryError("merge requires regions of the same class")
    polys = [region_to_shapely(r, snap=True).buffer(0) for r in regions]
    merged = unary_union(polys)
    out = _polys_of(merged)
    if len(out) == len(regions):
        return list(regions)  # nothing actually merged
    return _emit(out, regions[0].class_index, Provenance.EDITED)


def subtract(a: Region, b: Region) -> list[Region]:
    """a minus b; an empty result is an empty list, not an error."""
    pa = region_to_shapely(a, snap=True).buffer(0)
    pb = region_to_shapely(b, snap=True).buffer(0)
    diff = pa.difference(pb)
    return _emit(_polys_of(diff), a.class_index, Provenance.EDITED)
