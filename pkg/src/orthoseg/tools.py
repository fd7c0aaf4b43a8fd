"""Manual/geometric editing tools: freehand drawing, cut, and border editing."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from shapely.geometry import LineString, MultiPoint, Point, Polygon
from shapely.ops import polygonize, split, substring, unary_union

from .regions import (GeometryError, Provenance, Region, region_from_shapely,
                      region_to_shapely, snap_coords)

__all__ = ["Sketch", "ToolError", "freehand_close", "cut", "edit_border"]

RESAMPLE_STEP = 2.0  # px; sketches are densified before intersection tests


class ToolError(RuntimeError):
    pass


@dataclass
class Sketch:
    """An open polyline drawn by the user, in sub-pixel image coordinates."""

    points: np.ndarray  # (n, 2) float64

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 2:
            raise ValueError("a sketch needs at least 2 points")
        steps = np.diff(pts, axis=0)
        if np.any(np.hypot(steps[:, 0], steps[:, 1]) == 0):
            raise ValueError("consecutive sketch points must be distinct")
        self.points = pts

    @property
    def length(self) -> float:
        d = np.diff(self.points, axis=0)
        return float(np.sum(np.hypot(d[:, 0], d[:, 1])))

    def resampled(self, max_step: float = RESAMPLE_STEP) -> np.ndarray:
        out = [self.points[0]]
        for p in self.points[1:]:
            prev = out[-1]
            dist = float(np.hypot(*(p - prev)))
            if dist > max_step:
                k = int(np.ceil(dist / max_step))
                for i in range(1, k):
                    out.append(prev + (p - prev) * (i / k))
            out.append(p)
        return np.asarray(out)


def freehand_close(sketch: Sketch, class_index: int) -> Region:
    """Close the sketch into a region; self-intersections keep the largest loop."""
    if len(sketch.points) < 3:
        raise ToolError("freehand needs at least 3 points")
    coords = snap_coords(sketch.points)
    ring = LineString(np.vstack([coords, coords[:1]]))
    if ring.is_simple:
        poly = Polygon(coords)
    else:
        faces = [f for f in polygonize(unary_union(ring))]
        if not faces:
            raise ToolError("degenerate sketch: no enclosed area")
        poly = max(faces, key=lambda f: f.area)
    if poly.area < 1.0:
        raise ToolError(f"degenerate sketch: area {poly.area:.3g} px^2 < 1")
    return region_from_shapely(poly, class_index, Provenance.MANUAL)


def cut(region: Region, sketch: Sketch) -> list[Region]:
    """Split a region along a sketched curve; parts inherit the class."""
    poly = region_to_shapely(region, snap=True).buffer(0)
    line = LineString(snap_coords(sketch.resampled()))
    try:
        pieces = split(poly, line)
    except Exception as exc:
        raise ToolError(f"no cut: {exc}") from exc
    parts = [g for g in pieces.geoms if isinstance(g, Polygon) and g.area > 1e-9]
    if len(parts) < 2:
        raise ToolError("no cut: sketch does not divide the region")
    parts.sort(key=lambda g: (g.bounds[0], g.bounds[1]))
    return [region_from_shapely(p, region.class_index, Provenance.EDITED)
            for p in parts]


def edit_border(region: Region, sketch: Sketch) -> Region:
    """Reshape the outer boundary by sketching across it.

    Every maximal sub-curve between two consecutive crossings of the outer
    ring replaces the shorter of the two boundary arcs between the crossing
    points: inner sub-curves trim a lobe off, outer sub-curves graft one on.
    Sub-curves processed in sketch order; sub-curves that do not cross the
    boundary twice (or that dip into holes) are ignored.
    """
    poly = region_to_shapely(region, snap=True).buffer(0)
    if isinstance(poly, Polygon) is False or poly.is_empty:
        raise GeometryError("region geometry is invalid")
    line = LineString(snap_coords(sketch.resampled()))

    total_crossings = _crossing_params(line, poly)
    if len(total_crossings) < 2:
        raise ToolError("no border contact")

    applied = 0
    pos = 0.0
    guard = 0
    while True:
        guard += 1
        if guard > 1000:
            raise ToolError("invalid edit: did not converge")
        rest = substring(line, pos, line.length)
        if rest.length <= 1e-9 or not isinstance(rest, LineString):
            break
        params = _crossing_params(rest, poly)
        if len(params) < 2:
            break
        d1, d2 = params[0], params[1]
        piece = substring(rest, d1, d2)
        if piece.length <= 1e-9:
            pos += d2
            continue
        mid = piece.interpolate(0.5, normalized=True)
        crosses_hole = any(piece.crosses(LineString(i.coords))
                           for i in poly.interiors)
        inward = poly.contains(mid) and not crosses_hole
        outward = not poly.contains(mid) and not poly.boundary.contains(mid) \
            and piece.intersection(poly).length <= 1e-6
        if inward or outward:
            new_poly = _apply_lobe(poly, piece, remove=inward)
            if new_poly is not None:
                poly = new_poly
                applied += 1
                # geometry changed: re-anchor on the remaining sketch
                pos += d2
                continue
        pos += d2

    if applied == 0:
        raise ToolError("no border contact")
    out = region_from_shapely(poly, region.class_index, Provenance.EDITED,
                              region_id=region.id)
    return out


def _crossing_params(line: LineString, poly: Polygon) -> list[float]:
    """Sorted distances along `line` where it crosses the outer ring."""
    ring = LineString(poly.exterior.coords)
    inter = line.intersection(ring)
    pts: list[Point] = []
    if inter.is_empty:
        return []
    if isinstance(inter, Point):
        pts = [inter]
    elif isinstance(inter, MultiPoint):
        pts = list(inter.geoms)
    else:  # collinear overlaps and mixtures: take segment endpoints too
        for g in getattr(inter, "geoms", [inter]):
            if isinstance(g, Point):
                pts.append(g)
            elif isinstance(g, LineString):
                pts.append(Point(g.coords[0]))
                pts.append(Point(g.coords[-1]))
    params = sorted(line.project(p) for p in pts)
    # drop coincident hits (tangencies produce duplicates)
    out: list[float] = []
    for p in params:
        if not out or p - out[-1] > 1e-9:
            out.append(p)
    return out


def _apply_lobe(poly: Polygon, piece: LineString, remove: bool) -> Polygon | None:
    """Union or subtract the lobe enclosed by `piece` and the shorter arc."""
    ring = LineString(poly.exterior.coords)
    length = ring.length
    p_start = Point(piece.coords[0])
    p_end = Point(piece.coords[-1])
    d1 = ring.project(p_start)
    d2 = ring.project(p_end)
    lo, hi = (d1, d2) if d1 <= d2 else (d2, d1)
    arc_in = substring(ring, lo, hi)
    arc_out_coords = list(substring(ring, hi, length).coords) + \
        list(substring(ring, 0, lo).coords)
    len_in = hi - lo
    len_out = length - len_in

    def build(arc_coords, arc_from_lo: bool):
        pc = list(piece.coords)
        ac = list(arc_coords)
        # orient the arc to run end -> start of the piece
        starts_at_piece_end = Point(ac[0]).distance(p_end) <= Point(ac[0]).distance(p_start)
        if not starts_at_piece_end:
            ac = ac[::-1]
        ring_coords = pc + ac
        lobe = Polygon(ring_coords)
        if not lobe.is_valid or lobe.area <= 1e-9:
            lobe = lobe.buffer(0)
            if lobe.is_empty or not isinstance(lobe, Polygon):
                return None
        return lobe

    if abs(len_in - len_out) <= 1e-9:
        candidates = [build(list(arc_in.coords), True), build(arc_out_coords, False)]
        results = []
        for lobe in candidates:
            if lobe is None:
                continue
            res = poly.difference(lobe) if remove else poly.union(lobe)
            if isinstance(res, Polygon) and not res.is_empty:
                results.append(res)
        if not results:
            raise ToolError("invalid edit: replacement is not a simple region")
        return min(results, key=lambda r: abs(r.area - poly.area))

    arc_coords = list(arc_in.coords) if len_in < len_out else arc_out_coords
    lobe = build(arc_coords, len_in < len_out)
    if lobe is None:
        raise ToolError("invalid edit: replacement would self-intersect")
    res = poly.difference(lobe) if remove else poly.union(lobe)
    if res.is_empty:
        raise ToolError("invalid edit: region vanished")
    if not isinstance(res, Polygon):
        polys = [g for g in res.geoms if isinstance(g, Polygon) and g.area > 1e-9]
        if len(polys) != 1:
            raise ToolError("invalid edit: replacement is not a simple region")
        res = polys[0]
    return res
