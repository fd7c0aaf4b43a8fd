"""Raster storage: orthoimage tile pyramids, windows, and color-coded label maps.

Huge orthoimages never become fully resident: on first open the source is
read in row bands and cut into a sidecar pyramid of 256x256 PNG tiles
(`<file name>.pyr/L{level}/{x}_{y}.png`), and all window reads assemble from
those tiles. PPM (P6) sources stream in constant memory; PNG/TIFF/BMP decode
whole (PNG has no random access) and are therefore bounded by available RAM.
"""

from __future__ import annotations

import datetime as _dt
import json
import os
import re
import threading
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

__all__ = [
    "TILE_SIZE",
    "MAX_DIMENSION",
    "OrthoMap",
    "RasterWindow",
    "LabelRaster",
    "ClassCatalog",
    "RasterError",
    "LabelImportError",
    "open_orthomap",
    "read_window",
    "import_labelmap",
    "export_labelmap",
]

TILE_SIZE = 256
MAX_DIMENSION = 2 ** 20

Image.MAX_IMAGE_PIXELS = None  # we manage memory ourselves


class RasterError(RuntimeError):
    pass


class LabelImportError(RasterError):
    pass


# ---------------------------------------------------------------------------
# class catalog


class ClassCatalog:
    """Ordered classes with unique names and unique RGB codes.

    Entry 0 is always ("unlabeled", (0, 0, 0)) and cannot be changed.
    """

    def __init__(self, entries: list[tuple[str, tuple[int, int, int]]] | None = None):
        self._names: list[str] = ["unlabeled"]
        self._colors: list[tuple[int, int, int]] = [(0, 0, 0)]
        for name, color in entries or []:
            self.add_class(name, color)

    def add_class(self, name: str, color) -> int:
        color = tuple(int(c) for c in color)
        if len(color) != 3 or any(not (0 <= c <= 255) for c in color):
            raise ValueError(f"bad RGB triple {color!r}")
        if name in self._names:
            raise ValueError(f"duplicate class name {name!r}")
        if color in self._colors:
            raise ValueError(f"duplicate class color {color!r}")
        self._names.append(name)
        self._colors.append(color)
        return len(self._names) - 1

    def __len__(self) -> int:
        return len(self._names)

    def __eq__(self, other) -> bool:
        return (isinstance(other, ClassCatalog)
                and self._names == other._names
                and self._colors == other._colors)

    def name(self, index: int) -> str:
        return self._names[index]

    def color(self, index: int) -> tuple[int, int, int]:
        return self._colors[index]

    def index_of(self, name: str) -> int:
        return self._names.index(name)

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(self._names)

    @property
    def colors(self) -> tuple[tuple[int, int, int], ...]:
        return tuple(self._colors)

    def color_lut(self) -> np.ndarray:
        return np.asarray(self._colors, dtype=np.uint8)

    def to_json(self) -> list:
        return [{"name": n, "color": list(c)}
                for n, c in zip(self._names[1:], self._colors[1:])]

    @classmethod
    def from_json(cls, data) -> "ClassCatalog":
        return cls([(e["name"], tuple(e["color"])) for e in data])


# ---------------------------------------------------------------------------
# value types


@dataclass(frozen=True)
class RasterWindow:
    """An RGB8 view of a map region. Immutable value, safe to share."""

    origin: tuple[int, int]
    pixels: np.ndarray  # (h, w, 3) uint8, row-major

    def __post_init__(self):
        px = np.ascontiguousarray(self.pixels, dtype=np.uint8)
        if px.ndim != 3 or px.shape[2] != 3:
            raise ValueError("pixels must be (h, w, 3) RGB8")
        object.__setattr__(self, "pixels", px)
        px.setflags(write=False)

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]


@dataclass(frozen=True)
class LabelRaster:
    """Dense per-pixel class indices for a rectangular window; 0 = unlabeled."""

    origin: tuple[int, int]
    labels: np.ndarray  # (h, w) uint16
    unmatched: tuple = ()  # lenient-import report: ((r, g, b), count), ...

    def __post_init__(self):
        lb = np.ascontiguousarray(self.labels, dtype=np.uint16)
        if lb.ndim != 2:
            raise ValueError("labels must be a 2D index map")
        object.__setattr__(self, "labels", lb)
        lb.setflags(write=False)

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    def __eq__(self, other) -> bool:
        return (isinstance(other, LabelRaster)
                and self.origin == other.origin
                and self.labels.shape == other.labels.shape
                and bool(np.array_equal(self.labels, other.labels)))


# ---------------------------------------------------------------------------
# row readers: uniform band access over heterogeneous sources


class _PpmRowReader:
    """Streams P6 rows straight off the file; constant memory."""

    def __init__(self, path: Path):
        self.path = path
        with open(path, "rb") as f:
            magic = f.read(2)
            if magic != b"P6":
                raise RasterError(f"{path}: not a binary PPM")
            fields = []
            while len(fields) < 3:
                line = f.readline()
                if not line:
                    raise RasterError(f"{path}: truncated PPM header")
                line = line.split(b"#", 1)[0]
                fields.extend(line.split())
            self.width, self.height, maxval = (int(x) for x in fields)
            if maxval != 255:
                raise RasterError(f"{path}: only 8-bit PPM supported")
            self.data_offset = f.tell()

    def read_rows(self, y0: int, n: int) -> np.ndarray:
        stride = self.width * 3
        with open(self.path, "rb") as f:
            f.seek(self.data_offset + y0 * stride)
            buf = f.read(n * stride)
        if len(buf) != n * stride:
            raise RasterError(f"{self.path}: truncated PPM data")
        return np.frombuffer(buf, dtype=np.uint8).reshape(n, self.width, 3)


class _ArrayRowReader:
    def __init__(self, arr: np.ndarray):
        self.arr = arr
        self.height, self.width = arr.shape[:2]

    def read_rows(self, y0: int, n: int) -> np.ndarray:
        return self.arr[y0:y0 + n]


def _open_row_reader(path: Path):
    if path.suffix.lower() in (".ppm", ".pnm"):
        return _PpmRowReader(path)
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"))
    except Exception as exc:
        raise RasterError(f"cannot decode {path}: {exc}") from exc
    return _ArrayRowReader(arr)


# ---------------------------------------------------------------------------
# pyramid construction


def _level_count(width: int, height: int) -> int:
    levels = 1
    w, h = width, height
    while max(w, h) > TILE_SIZE:
        w = -(-w // 2)
        h = -(-h // 2)
        levels += 1
    return levels


def _level_dims(width: int, height: int, level: int) -> tuple[int, int]:
    return -(-width // (1 << level)), -(-height // (1 << level))


def _box_downsample(arr: np.ndarray) -> np.ndarray:
    """Exact 2x2 box average with round-half-up, ceil semantics at odd edges."""
    h, w = arr.shape[:2]
    oh, ow = -(-h // 2), -(-w // 2)
    acc = np.zeros((oh, ow, 3), dtype=np.uint32)
    cnt = np.zeros((oh, ow, 1), dtype=np.uint32)
    for dy in (0, 1):
        for dx in (0, 1):
            part = arr[dy::2, dx::2]
            acc[:part.shape[0], :part.shape[1]] += part
            cnt[:part.shape[0], :part.shape[1]] += 1
    return ((acc + cnt // 2) // cnt).astype(np.uint8)


def _tile_path(pyr_dir: Path, level: int, tx: int, ty: int) -> Path:
    return pyr_dir / f"L{level}" / f"{tx}_{ty}.png"


def _save_tile(path: Path, arr: np.ndarray) -> None:
    Image.fromarray(arr, "RGB").save(path, format="PNG", compress_level=1)


def _build_pyramid(reader, pyr_dir: Path, width: int, height: int) -> int:
    levels = _level_count(width, height)
    for lv in range(levels):
        (pyr_dir / f"L{lv}").mkdir(parents=True, exist_ok=True)
    # level 0 streams source rows band by band; level L reads level L-1 tiles
    _write_level_from_bands(reader.read_rows, pyr_dir, 0, width, height)
    for lv in range(1, levels):
        pw, ph = _level_dims(width, height, lv - 1)
        lw, lh = _level_dims(width, height, lv)
        prev = _PyramidLevelReader(pyr_dir, lv - 1, pw, ph)

        def read_downsampled(y0, n, r=prev):
            return _box_downsample(r.read_rows(2 * y0, min(2 * n, r.height - 2 * y0)))

        _write_level_from_bands(read_downsampled, pyr_dir, lv, lw, lh)
    return levels


def _write_level_from_bands(read_rows, pyr_dir: Path, level: int,
                            width: int, height: int) -> None:
    for ty in range(-(-height // TILE_SIZE)):
        y0 = ty * TILE_SIZE
        band = read_rows(y0, min(TILE_SIZE, height - y0))
        for tx in range(-(-width // TILE_SIZE)):
            x0 = tx * TILE_SIZE
            tile = band[:, x0:x0 + min(TILE_SIZE, width - x0)]
            _save_tile(_tile_path(pyr_dir, level, tx, ty), tile)


def _load_tile(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im)


class _PyramidLevelReader:
    def __init__(self, pyr_dir: Path, level: int, width: int, height: int):
        self.pyr_dir = pyr_dir
        self.level = level
        self.width = width
        self.height = height

    def read_rows(self, y0: int, n: int) -> np.ndarray:
        out = np.empty((n, self.width, 3), dtype=np.uint8)
        ty0 = y0 // TILE_SIZE
        ty1 = (y0 + n - 1) // TILE_SIZE
        for ty in range(ty0, ty1 + 1):
            tile_y = ty * TILE_SIZE
            for tx in range(-(-self.width // TILE_SIZE)):
                arr = _load_tile(_tile_path(self.pyr_dir, self.level, tx, ty))
                ys = max(y0, tile_y)
                ye = min(y0 + n, tile_y + arr.shape[0])
                out[ys - y0:ye - y0, tx * TILE_SIZE:tx * TILE_SIZE + arr.shape[1]] = \
                    arr[ys - tile_y:ye - tile_y]
        return out


# ---------------------------------------------------------------------------
# orthomap


@dataclass
class OrthoMap:
    """One survey image with tile-pyramid access."""

    id: str
    width: int
    height: int
    pixel_size_mm: float
    acquisition_date: _dt.date
    source_path: str
    pyramid_levels: int
    pyr_dir: Path = field(repr=False)
    _cache: dict = field(default_factory=dict, repr=False)
    _cache_lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    _CACHE_TILES = 96  # ~18 MB of decoded tiles

    def _tile(self, level: int, tx: int, ty: int) -> np.ndarray:
        key = (level, tx, ty)
        with self._cache_lock:
            arr = self._cache.get(key)
            if arr is not None:
                return arr
        arr = _load_tile(_tile_path(self.pyr_dir, level, tx, ty))
        arr.setflags(write=False)
        with self._cache_lock:
            if len(self._cache) >= self._CACHE_TILES:
                self._cache.pop(next(iter(self._cache)))
            self._cache[key] = arr
        return arr

    def level_dims(self, level: int) -> tuple[int, int]:
        if not (0 <= level < self.pyramid_levels):
            raise RasterError(f"invalid pyramid level {level}")
        return _level_dims(self.width, self.height, level)

    def read_window(self, origin: tuple[int, int], w: int, h: int,
                    level: int = 0) -> RasterWindow:
        return read_window(self, origin, w, h, level)

    def tile_file(self, level: int, tx: int, ty: int) -> Path:
        if not (0 <= level < self.pyramid_levels):
            raise RasterError(f"invalid pyramid level {level}")
        lw, lh = self.level_dims(level)
        if not (0 <= tx < -(-lw // TILE_SIZE) and 0 <= ty < -(-lh // TILE_SIZE)):
            raise RasterError(f"tile ({tx}, {ty}) outside level {level}")
        return _tile_path(self.pyr_dir, level, tx, ty)

    def descriptor(self) -> dict:
        return {
            "id": self.id,
            "width": self.width,
            "height": self.height,
            "pixel_size_mm": self.pixel_size_mm,
            "acquisition_date": self.acquisition_date.isoformat(),
            "source_path": str(self.source_path),
        }


def open_orthomap(path, pixel_size_mm: float, map_id: str | None = None,
                  acquisition_date: _dt.date | None = None) -> OrthoMap:
    """Open an orthoimage, building (or reusing) its sidecar tile pyramid."""
    path = Path(path)
    if pixel_size_mm <= 0:
        raise ValueError("pixel_size_mm must be > 0")
    if not path.exists():
        raise RasterError(f"no such file: {path}")

    pyr_dir = path.parent / (path.name + ".pyr")
    meta_path = pyr_dir / "meta.json"
    stat = path.stat()
    meta = None
    if meta_path.exists():
        try:
            meta = json.loads(meta_path.read_text())
        except (OSError, json.JSONDecodeError):
            meta = None
        if meta and (meta.get("source_size") != stat.st_size
                     or meta.get("source_mtime") != stat.st_mtime_ns):
            meta = None  # source changed; rebuild

    if meta is None:
        reader = _open_row_reader(path)
        width, height = reader.width, reader.height
        if not (1 <= width <= MAX_DIMENSION and 1 <= height <= MAX_DIMENSION):
            raise RasterError(
                f"dimensions {width}x{height} outside supported range")
        pyr_dir.mkdir(parents=True, exist_ok=True)
        levels = _build_pyramid(reader, pyr_dir, width, height)
        meta = {
            "width": width,
            "height": height,
            "levels": levels,
            "tile": TILE_SIZE,
            "source_size": stat.st_size,
            "source_mtime": stat.st_mtime_ns,
        }
        meta_path.write_text(json.dumps(meta, sort_keys=True))

    if acquisition_date is None:
        acquisition_date = _dt.date.fromtimestamp(stat.st_mtime)
    return OrthoMap(
        id=map_id or re.sub(r"[^A-Za-z0-9_.-]", "_", path.stem),
        width=meta["width"],
        height=meta["height"],
        pixel_size_mm=float(pixel_size_mm),
        acquisition_date=acquisition_date,
        source_path=str(path),
        pyramid_levels=meta["levels"],
        pyr_dir=pyr_dir,
    )


def read_window(omap: OrthoMap, origin: tuple[int, int], w: int, h: int,
                level: int = 0) -> RasterWindow:
    """Exactly the requested pixels at a pyramid level; bit-stable."""
    lw, lh = omap.level_dims(level)
    x0, y0 = int(origin[0]), int(origin[1])
    if w <= 0 or h <= 0 or x0 < 0 or y0 < 0 or x0 + w > lw or y0 + h > lh:
        raise RasterError(
            f"window {origin}+{w}x{h} outside level {level} bounds {lw}x{lh}")
    out = np.empty((h, w, 3), dtype=np.uint8)
    for ty in range(y0 // TILE_SIZE, (y0 + h - 1) // TILE_SIZE + 1):
        for tx in range(x0 // TILE_SIZE, (x0 + w - 1) // TILE_SIZE + 1):
            arr = omap._tile(level, tx, ty)
            tx0, ty0 = tx * TILE_SIZE, ty * TILE_SIZE
            xs, xe = max(x0, tx0), min(x0 + w, tx0 + arr.shape[1])
            ys, ye = max(y0, ty0), min(y0 + h, ty0 + arr.shape[0])
            out[ys - y0:ye - y0, xs - x0:xe - x0] = \
                arr[ys - ty0:ye - ty0, xs - tx0:xe - tx0]
    return RasterWindow(origin=(x0, y0), pixels=out)


# ---------------------------------------------------------------------------
# color-coded label maps


def import_labelmap(path, catalog: ClassCatalog,
                    window: tuple[int, int, int, int],
                    strict: bool = True) -> LabelRaster:
    """Decode a color-coded label image into class indices.

    Colors must match catalog entries exactly. In strict mode an unknown
    color aborts with the offending triples named; in lenient mode unknown
    colors map to 0 and are reported on the returned raster.
    """
    path = Path(path)
    with Image.open(path) as im:
        if im.format != "PNG":
            raise LabelImportError(
                f"{path}: label maps must be PNG (got {im.format}); "
                "lossy formats corrupt color codes")
        rgb = np.asarray(im.convert("RGB"))
    ox, oy, w, h = window
    if rgb.shape[0] != h or rgb.shape[1] != w:
        raise LabelImportError(
            f"{path}: image is {rgb.shape[1]}x{rgb.shape[0]}, "
            f"window wants {w}x{h}")
    packed = (rgb[..., 0].astype(np.uint32) << 16) | \
             (rgb[..., 1].astype(np.uint32) << 8) | rgb[..., 2]
    lut = {(int(c[0]) << 16) | (int(c[1]) << 8) | int(c[2]): i
           for i, c in enumerate(catalog.colors)}
    uniq, inverse = np.unique(packed, return_inverse=True)
    mapped = np.empty(len(uniq), dtype=np.int32)
    unmatched = []
    for k, val in enumerate(uniq.tolist()):
        idx = lut.get(val, -1)
        if idx < 0:
            color = (val >> 16 & 255, val >> 8 & 255, val & 255)
            count = int(np.sum(inverse == k))
            unmatched.append((color, count))
            idx = 0
        mapped[k] = idx
    if unmatched and strict:
        desc = ", ".join(f"rgb{c} x{n}" for c, n in unmatched)
        raise LabelImportError(f"{path}: colors not in catalog: {desc}")
    labels = mapped[inverse].reshape(h, w).astype(np.uint16)
    return LabelRaster(origin=(ox, oy), labels=labels,
                       unmatched=tuple(unmatched))


def export_labelmap(raster: LabelRaster, catalog: ClassCatalog, path) -> Path:
    """Write a lossless color-coded PNG; exact inverse of import_labelmap."""
    if int(raster.labels.max(initial=0)) >= len(catalog):
        raise ValueError("raster contains indices outside the catalog")
    lut = catalog.color_lut()
    rgb = lut[raster.labels]
    path = Path(path)
    try:
        Image.fromarray(rgb, "RGB").save(path, format="PNG")
    except OSError as exc:
        raise RasterError(f"cannot write {path}: {exc}") from exc
    return path
