"""Click-driven interactive segmentation.

Two click contracts: extreme points (object's left/right/top/bottom-most) and
positive/negative seed points. The builtin backend runs a seeded band
graph-cut; external backends speak a small JSON-over-HTTP protocol
(documented in docs/backend-protocol.md). The engine validates every
returned mask against the click contracts no matter which backend produced
it.
"""

from __future__ import annotations

import base64
import io
from dataclasses import dataclass, field

import httpx
import numpy as np
from PIL import Image
from scipy import ndimage

from .graphcut import (RefineParams, band_distance, build_seeded_network,
                       cut_labels, max_flow)
from .raster import RasterWindow

__all__ = [
    "EXTREME_MARGIN_PX",
    "EXTREME_EPS_PX",
    "PRIOR_BAND_PX",
    "SEED_RADIUS_PX",
    "PROTOCOL_VERSION",
    "ExtremeClicks",
    "ClickSet",
    "BuiltinBackend",
    "ExternalBackend",
    "BackendError",
    "ContractViolation",
    "segment_extreme",
    "segment_clicks",
]

EXTREME_MARGIN_PX = 10  # extreme-click masks may not escape bbox + this
EXTREME_EPS_PX = 5.0  # each extreme click must sit this close to the boundary
PRIOR_BAND_PX = 64  # posneg editing keeps the boundary this close to the prior
SEED_RADIUS_PX = 3
PROTOCOL_VERSION = 1


class BackendError(RuntimeError):
    pass


class ContractViolation(RuntimeError):
    """A backend returned a mask that breaks the click contracts."""


@dataclass
class ExtremeClicks:
    """Four clicks at the target's leftmost/rightmost/topmost/bottommost points."""

    points: np.ndarray  # (4, 2) float64

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.shape != (4, 2):
            raise ValueError("extreme clicks are exactly 4 (x, y) points")
        if len({tuple(p) for p in pts.tolist()}) != 4:
            raise ValueError("extreme clicks must be distinct")
        x0, y0 = pts.min(axis=0)
        x1, y1 = pts.max(axis=0)
        if (x1 - x0) * (y1 - y0) < 9.0:
            raise ValueError("extreme-click bounding box must cover >= 9 px^2")
        self.points = pts

    def bbox(self) -> tuple[float, float, float, float]:
        x0, y0 = self.points.min(axis=0)
        x1, y1 = self.points.max(axis=0)
        return float(x0), float(y0), float(x1), float(y1)


@dataclass
class ClickSet:
    """Positive (inside) and negative (outside) seed points."""

    positives: np.ndarray  # (n, 2), n >= 1
    negatives: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    prior_mask: np.ndarray | None = None  # window-sized bool, editing semantics

    def __post_init__(self):
        pos = np.asarray(self.positives, dtype=np.float64).reshape(-1, 2)
        neg = np.asarray(self.negatives, dtype=np.float64).reshape(-1, 2)
        if len(pos) == 0:
            raise ValueError("at least one positive click required")
        if {tuple(p) for p in pos.tolist()} & {tuple(p) for p in neg.tolist()}:
            raise ValueError("positive and negative clicks overlap")
        self.positives = pos
        self.negatives = neg
        if self.prior_mask is not None:
            self.prior_mask = np.asarray(self.prior_mask, dtype=bool)


# ---------------------------------------------------------------------------
# helpers


def _to_local(points: np.ndarray, window: RasterWindow) -> np.ndarray:
    return np.asarray(points, float) - np.asarray(window.origin, float)


def _points_in_window(points: np.ndarray, window: RasterWindow) -> bool:
    local = _to_local(points, window)
    return bool(np.all((local[:, 0] >= 0) & (local[:, 0] <= window.width)
                       & (local[:, 1] >= 0) & (local[:, 1] <= window.height)))


def _pixel_of(pt: np.ndarray, shape: tuple[int, int]) -> tuple[int, int]:
    x = min(max(int(np.floor(pt[0])), 0), shape[1] - 1)
    y = min(max(int(np.floor(pt[1])), 0), shape[0] - 1)
    return y, x


def _disk_mask(shape: tuple[int, int], centers: np.ndarray,
               radius: float) -> np.ndarray:
    out = np.zeros(shape, dtype=bool)
    r = int(np.ceil(radius))
    for cx, cy in np.asarray(centers, float):
        y0, x0 = _pixel_of((cx, cy), shape)
        ys = slice(max(0, y0 - r), min(shape[0], y0 + r + 1))
        xs = slice(max(0, x0 - r), min(shape[1], x0 + r + 1))
        yy, xx = np.mgrid[ys, xs]
        out[ys, xs] |= (yy - y0) ** 2 + (xx - x0) ** 2 <= radius ** 2
    return out


def _boundary_distance_map(mask: np.ndarray) -> np.ndarray:
    from .graphcut import boundary_pixels
    b = boundary_pixels(mask)
    if not b.any():
        return np.full(mask.shape, np.inf)
    return ndimage.distance_transform_edt(~b)


def _click_distance_map(shape, points: np.ndarray) -> np.ndarray:
    seed = np.ones(shape, dtype=bool)
    for pt in points:
        seed[_pixel_of(pt, shape)] = False
    return ndimage.distance_transform_edt(seed)


def _bbox_pixels(shape, x0, y0, x1, y1) -> np.ndarray:
    """Pixels whose centers fall inside the closed box [x0,x1] x [y0,y1]."""
    out = np.zeros(shape, dtype=bool)
    ix0 = max(0, int(np.ceil(x0 - 0.5)))
    ix1 = min(shape[1] - 1, int(np.floor(x1 - 0.5)))
    iy0 = max(0, int(np.ceil(y0 - 0.5)))
    iy1 = min(shape[0] - 1, int(np.floor(y1 - 0.5)))
    if ix1 >= ix0 and iy1 >= iy0:
        out[iy0:iy1 + 1, ix0:ix1 + 1] = True
    return out


def _keep_components_touching(mask: np.ndarray, anchor: np.ndarray) -> np.ndarray:
    labels, n = ndimage.label(mask, structure=np.array(
        [[0, 1, 0], [1, 1, 1], [0, 1, 0]], bool))
    if n <= 1:
        return mask
    keep = np.unique(labels[anchor & mask])
    keep = keep[keep > 0]
    return np.isin(labels, keep)


# ---------------------------------------------------------------------------
# builtin classical backend


class BuiltinBackend:
    """Seeded band graph-cut; deterministic, no learned weights."""

    kind = "builtin-classical"

    # Spatial prior when negative clicks exist: a pixel strictly closer to a
    # negative than to any positive pays this extra cost for a foreground
    # assignment (and vice versa). Color histograms alone cannot separate
    # same-colored touching objects; this term can.
    voronoi_bias = 8.0

    def __init__(self, params: RefineParams | None = None):
        self.params = params or RefineParams(band_width=PRIOR_BAND_PX)

    # -- extreme clicks

    def segment_extreme(self, window: RasterWindow,
                        clicks: ExtremeClicks) -> np.ndarray:
        shape = (window.height, window.width)
        local = _to_local(clicks.points, window)
        x0, y0 = local.min(axis=0)
        x1, y1 = local.max(axis=0)
        bw, bh = x1 - x0, y1 - y0
        mx = max(EXTREME_MARGIN_PX + 2, int(round(0.25 * bw)))
        my = max(EXTREME_MARGIN_PX + 2, int(round(0.25 * bh)))
        cx0 = max(0, int(np.floor(x0 - mx)))
        cy0 = max(0, int(np.floor(y0 - my)))
        cx1 = min(window.width, int(np.ceil(x1 + mx)))
        cy1 = min(window.height, int(np.ceil(y1 + my)))

        allowed = _bbox_pixels(shape, x0 - EXTREME_MARGIN_PX, y0 - EXTREME_MARGIN_PX,
                               x1 + EXTREME_MARGIN_PX, y1 + EXTREME_MARGIN_PX)
        fallback = _bbox_pixels(shape, x0, y0, x1, y1)
        if not fallback.any():
            fallback[_pixel_of(local.mean(axis=0), shape)] = True

        crop = np.zeros(shape, dtype=bool)
        crop[cy0:cy1, cx0:cx1] = True
        centroid = local.mean(axis=0)
        hard_fg = _disk_mask(shape, [centroid], SEED_RADIUS_PX) & allowed & crop
        hard_bg = crop & ~allowed
        if not hard_fg.any() or not hard_bg.any():
            return fallback

        sub = (slice(cy0, cy1), slice(cx0, cx1))
        crop_px = window.pixels[sub]
        if int(crop_px.max()) == int(crop_px.min()):
            return fallback  # no contrast at all: the clicked box is the answer
        mask = self._solve(window.pixels[sub], hard_fg[sub], hard_bg[sub])
        full = np.zeros(shape, dtype=bool)
        full[sub] = mask
        full &= allowed
        full = _keep_components_touching(full, _disk_mask(shape, [centroid],
                                                          SEED_RADIUS_PX))
        if not full.any():
            return fallback
        # every click must end up near the produced boundary, else the scene
        # has no usable contrast: fall back to the clicked box itself
        dist = _boundary_distance_map(full)
        for pt in local:
            py, px = _pixel_of(pt, shape)
            if dist[py, px] > EXTREME_EPS_PX:
                return fallback
        return full

    # -- positive/negative clicks

    def segment_clicks(self, window: RasterWindow,
                       clicks: ClickSet) -> np.ndarray:
        shape = (window.height, window.width)
        pos = _to_local(clicks.positives, window)
        neg = _to_local(clicks.negatives, window)
        pos_seed = _disk_mask(shape, pos, SEED_RADIUS_PX)
        neg_seed = _disk_mask(shape, neg, SEED_RADIUS_PX) & ~pos_seed

        hard_fg = pos_seed.copy()
        hard_bg = neg_seed.copy()
        border = np.zeros(shape, dtype=bool)
        border[:2, :] = border[-2:, :] = True
        border[:, :2] = border[:, -2:] = True

        anchor = pos_seed.copy()
        if clicks.prior_mask is not None:
            prior = clicks.prior_mask
            if prior.shape != shape:
                raise ValueError("prior mask must match window dimensions")
            dist = band_distance(prior)
            frozen = dist > PRIOR_BAND_PX - 1
            hard_fg |= prior & frozen & ~neg_seed
            hard_bg |= ~prior & frozen & ~pos_seed
            anchor |= prior & frozen
        else:
            hard_bg |= border & ~pos_seed
        hard_bg &= ~hard_fg

        if not hard_bg.any():
            hard_bg = border & ~hard_fg
        if int(window.pixels.max()) == int(window.pixels.min()):
            return pos_seed | (hard_fg & ~neg_seed)  # no contrast: seeds only

        bias_fg = bias_bg = None
        if len(neg):
            dpos = _click_distance_map(shape, pos)
            dneg = _click_distance_map(shape, neg)
            bias_fg = np.where(dneg < dpos, self.voronoi_bias, 0.0)
            bias_bg = np.where(dpos < dneg, self.voronoi_bias, 0.0)

        mask = self._solve(window.pixels, hard_fg, hard_bg, bias_fg, bias_bg)
        mask = _keep_components_touching(mask, anchor)
        mask |= pos_seed  # structural guarantee, already true by construction
        mask &= ~neg_seed
        return mask

    def _solve(self, image, hard_fg, hard_bg, bias_fg=None, bias_bg=None) -> np.ndarray:
        build = build_seeded_network(image, hard_fg, hard_bg, self.params)
        if bias_fg is not None:
            free = build.free_mask
            # foreground cost rides on the sink link, background on the source
            build.network.add_terminal_bulk(build.node_index[free],
                                            bias_bg[free], bias_fg[free])
        _, side = max_flow(build.network)
        return cut_labels(build, side)


# ---------------------------------------------------------------------------
# external protocol backend


def encode_png_b64(arr: np.ndarray) -> str:
    if arr.dtype == bool:
        arr = arr.astype(np.uint8) * 255
    buf = io.BytesIO()
    Image.fromarray(arr, "RGB" if arr.ndim == 3 else "L").save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def decode_mask_b64(data: str, shape: tuple[int, int]) -> np.ndarray:
    try:
        raw = base64.b64decode(data)
        with Image.open(io.BytesIO(raw)) as im:
            arr = np.asarray(im.convert("L"))
    except Exception as exc:
        raise BackendError(f"malformed mask png: {exc}") from exc
    if arr.shape != shape:
        raise BackendError(
            f"backend mask is {arr.shape[1]}x{arr.shape[0]}, "
            f"window is {shape[1]}x{shape[0]}")
    return arr > 127


class ExternalBackend:
    """Client for the HTTP segmentation-backend protocol (see docs)."""

    kind = "external"

    def __init__(self, endpoint: str, timeout: float = 30.0, transport=None):
        self.endpoint = endpoint.rstrip("/")
        self._client = httpx.Client(base_url=self.endpoint, timeout=timeout,
                                    transport=transport)
        self._greeted = False

    def close(self):
        self._client.close()

    def handshake(self) -> dict:
        try:
            resp = self._client.post("/hello", json={"op": "hello"})
            data = resp.json()
        except httpx.TimeoutException as exc:
            raise BackendError(f"handshake timeout: {exc}") from exc
        except Exception as exc:
            raise BackendError(f"handshake failed: {exc}") from exc
        if not data.get("ok") or data.get("protocol") != PROTOCOL_VERSION:
            raise BackendError(f"protocol mismatch: {data!r}")
        self._greeted = True
        return data

    def _segment(self, payload: dict, shape: tuple[int, int]) -> np.ndarray:
        if not self._greeted:
            self.handshake()
        try:
            resp = self._client.post("/segment", json=payload)
        except httpx.TimeoutException as exc:
            raise BackendError(f"backend timeout: {exc}") from exc
        except Exception as exc:
            raise BackendError(f"backend unreachable: {exc}") from exc
        try:
            data = resp.json()
        except Exception as exc:
            raise BackendError(f"malformed backend response: {exc}") from exc
        if not data.get("ok"):
            err = data.get("error", {})
            raise BackendError(f"backend error: {err.get('message', data)}")
        return decode_mask_b64(data["mask_png"], shape)

    def segment_extreme(self, window: RasterWindow,
                        clicks: ExtremeClicks) -> np.ndarray:
        payload = {
            "tool": "extreme",
            "window_origin": list(window.origin),
            "image_png": encode_png_b64(window.pixels),
            "clicks": {"extreme": _to_local(clicks.points, window).tolist()},
        }
        return self._segment(payload, (window.height, window.width))

    def segment_clicks(self, window: RasterWindow,
                       clicks: ClickSet) -> np.ndarray:
        body = {
            "positives": _to_local(clicks.positives, window).tolist(),
            "negatives": _to_local(clicks.negatives, window).tolist(),
        }
        if clicks.prior_mask is not None:
            body["prior_mask_png"] = encode_png_b64(clicks.prior_mask)
        payload = {
            "tool": "posneg",
            "window_origin": list(window.origin),
            "image_png": encode_png_b64(window.pixels),
            "clicks": body,
        }
        return self._segment(payload, (window.height, window.width))


# ---------------------------------------------------------------------------
# engine entry points: dispatch + contract validation


def segment_extreme(window: RasterWindow, clicks: ExtremeClicks,
                    backend) -> np.ndarray:
    if not _points_in_window(clicks.points, window):
        raise ValueError("extreme clicks must lie inside the window")
    mask = backend.segment_extreme(window, clicks)
    if mask.shape != (window.height, window.width):
        raise ContractViolation("backend mask does not match window size")
    if not mask.any():
        raise ContractViolation("backend returned an empty mask")
    local = _to_local(clicks.points, window)
    x0, y0 = local.min(axis=0)
    x1, y1 = local.max(axis=0)
    allowed = _bbox_pixels(mask.shape, x0 - EXTREME_MARGIN_PX, y0 - EXTREME_MARGIN_PX,
                           x1 + EXTREME_MARGIN_PX, y1 + EXTREME_MARGIN_PX)
    if (mask & ~allowed).any():
        raise ContractViolation(
            f"mask escapes the click box dilated by {EXTREME_MARGIN_PX} px")
    dist = _boundary_distance_map(mask)
    for pt in local:
        py, px = _pixel_of(pt, mask.shape)
        if dist[py, px] > EXTREME_EPS_PX:
            raise ContractViolation(
                f"click {pt.tolist()} is {dist[py, px]:.1f} px from the mask "
                f"boundary (> {EXTREME_EPS_PX})")
    return mask


def segment_clicks(window: RasterWindow, clicks: ClickSet,
                   backend) -> np.ndarray:
    pts = np.vstack([clicks.positives, clicks.negatives]) \
        if len(clicks.negatives) else clicks.positives
    if not _points_in_window(pts, window):
        raise ValueError("clicks must lie inside the window")
    mask = backend.segment_clicks(window, clicks)
    if mask.shape != (window.height, window.width):
        raise ContractViolation("backend mask does not match window size")
    for pt in _to_local(clicks.positives, window):
        if not mask[_pixel_of(pt, mask.shape)]:
            raise ContractViolation(
                f"positive click {pt.tolist()} excluded from the mask")
    for pt in _to_local(clicks.negatives, window):
        if mask[_pixel_of(pt, mask.shape)]:
            raise ContractViolation(
                f"negative click {pt.tolist()} included in the mask")
    if clicks.prior_mask is not None:
        changed = mask ^ clicks.prior_mask
        seeds = _disk_mask(mask.shape, _to_local(
            np.vstack([clicks.positives, clicks.negatives])
            if len(clicks.negatives) else clicks.positives, window),
            SEED_RADIUS_PX)
        dist = band_distance(clicks.prior_mask)
        if (changed & ~seeds & (dist > PRIOR_BAND_PX)).any():
            raise ContractViolation(
                f"mask strays more than {PRIOR_BAND_PX} px from the prior boundary")
    return mask
