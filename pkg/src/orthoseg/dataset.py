"""Training-dataset export: tiling a working area, splitting, and merging.

A dataset is a directory:

    images/{split}/{x}_{y}.png     RGB tiles
    labels/{split}/{x}_{y}.png     color-coded label tiles (catalog colors)
    dataset.json                   manifest: tiles, splits, pixel size,
                                   catalog snapshot, split criterion + seed

Label tiles are rendered with no anti-aliasing; overlapping regions resolve
by creation order (later region id wins).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .raster import ClassCatalog, LabelRaster, OrthoMap, export_labelmap, read_window
from .regions import Region, rasterize

__all__ = [
    "WorkingArea",
    "SplitCriterion",
    "TileRecord",
    "TileDataset",
    "DatasetError",
    "export_dataset",
    "merge_datasets",
    "render_labels",
    "load_dataset",
]

SPLITS = ("train", "val", "test")
DEFAULT_TILE = 1024
DEFAULT_FRACTIONS = (0.70, 0.15, 0.15)


class DatasetError(RuntimeError):
    pass


@dataclass(frozen=True)
class WorkingArea:
    x: int
    y: int
    w: int
    h: int

    def clipped_to(self, width: int, height: int) -> "WorkingArea":
        if not (0 <= self.x and 0 <= self.y
                and self.x + self.w <= width and self.y + self.h <= height):
            raise DatasetError(f"working area {self} outside map bounds")
        return self

    @property
    def rect(self) -> tuple[int, int, int, int]:
        return (self.x, self.y, self.w, self.h)


@dataclass(frozen=True)
class SplitCriterion:
    """random(seed) shuffling or spatial bands along an axis."""

    kind: str = "random"  # "random" | "spatial-bands"
    seed: int = 0
    axis: str = "x"  # for spatial-bands
    fractions: tuple[float, float, float] = DEFAULT_FRACTIONS

    def __post_init__(self):
        if self.kind not in ("random", "spatial-bands"):
            raise ValueError(f"unknown split criterion {self.kind!r}")
        if self.axis not in ("x", "y"):
            raise ValueError("axis must be 'x' or 'y'")
        fr = tuple(float(f) for f in self.fractions)
        if len(fr) != 3 or any(f <= 0 for f in fr) or abs(sum(fr) - 1.0) > 1e-9:
            raise ValueError("fractions must be three positive values summing to 1")
        object.__setattr__(self, "fractions", fr)

    def to_json(self) -> dict:
        return {"kind": self.kind, "seed": self.seed, "axis": self.axis,
                "fractions": list(self.fractions)}

    @classmethod
    def from_json(cls, d: dict) -> "SplitCriterion":
        return cls(kind=d["kind"], seed=d["seed"], axis=d.get("axis", "x"),
                   fractions=tuple(d["fractions"]))


@dataclass(frozen=True)
class TileRecord:
    image_path: str  # relative to the dataset root
    label_path: str
    split: str
    origin: tuple[int, int]


@dataclass
class TileDataset:
    root: Path
    tiles: list[TileRecord]
    tile_size: int
    pixel_size_mm: float
    catalog: ClassCatalog
    criterion: SplitCriterion | None = None
    map_id: str = ""
    extra: dict = field(default_factory=dict)

    def split_tiles(self, split: str) -> list[TileRecord]:
        return [t for t in self.tiles if t.split == split]

    def manifest(self) -> dict:
        m = {
            "catalog": self.catalog.to_json(),
            "criterion": self.criterion.to_json() if self.criterion else None,
            "map_id": self.map_id,
            "pixel_size_mm": self.pixel_size_mm,
            "tile_size": self.tile_size,
            "tiles": [
                {"image": t.image_path, "label": t.label_path,
                 "split": t.split, "origin": list(t.origin)}
                for t in self.tiles
            ],
        }
        m.update(self.extra)
        return m

    def save_manifest(self) -> Path:
        path = self.root / "dataset.json"
        path.write_text(json.dumps(self.manifest(), sort_keys=True,
                                   separators=(",", ": "), indent=1) + "\n")
        return path

    def image(self, rec: TileRecord) -> np.ndarray:
        with Image.open(self.root / rec.image_path) as im:
            return np.asarray(im.convert("RGB"))

    def labels(self, rec: TileRecord) -> np.ndarray:
        from .raster import import_labelmap
        size = None
        with Image.open(self.root / rec.label_path) as im:
            size = im.size
        raster = import_labelmap(self.root / rec.label_path, self.catalog,
                                 (rec.origin[0], rec.origin[1], size[0], size[1]))
        return raster.labels


def load_dataset(root) -> TileDataset:
    root = Path(root)
    data = json.loads((root / "dataset.json").read_text())
    tiles = [TileRecord(image_path=t["image"], label_path=t["label"],
                        split=t["split"], origin=tuple(t["origin"]))
             for t in data["tiles"]]
    crit = SplitCriterion.from_json(data["criterion"]) if data.get("criterion") else None
    return TileDataset(root=root, tiles=tiles, tile_size=data["tile_size"],
                       pixel_size_mm=data["pixel_size_mm"],
                       catalog=ClassCatalog.from_json(data["catalog"]),
                       criterion=crit, map_id=data.get("map_id", ""))


# ---------------------------------------------------------------------------
# splitting


def apportion(total: int, fractions: tuple[float, float, float]) -> list[int]:
    """Largest-remainder counts; ties go to the later split."""
    raw = [f * total for f in fractions]
    counts = [int(np.floor(r)) for r in raw]
    remainder = total - sum(counts)
    order = sorted(range(3), key=lambda i: (raw[i] - counts[i], i), reverse=True)
    for i in range(remainder):
        counts[order[i]] += 1
    return counts


def assign_splits(origins: list[tuple[int, int]],
                  criterion: SplitCriterion) -> list[str]:
    n = len(origins)
    if criterion.kind == "random":
        counts = apportion(n, criterion.fractions)
        rng = np.random.default_rng(criterion.seed)
        order = rng.permutation(n)
        splits = [""] * n
        k = 0
        for split, c in zip(SPLITS, counts):
            for i in order[k:k + c]:
                splits[int(i)] = split
            k += c
        return splits

    # spatial bands: whole coordinate columns (or rows) per split, in
    # ascending coordinate order train -> val -> test. Fractions are matched
    # at band granularity; every split keeps at least one band.
    coord = 0 if criterion.axis == "x" else 1
    uniq = sorted({o[coord] for o in origins})
    n_bands = len(uniq)
    if n_bands < 3:
        raise DatasetError("spatial-bands needs at least 3 distinct tile "
                           f"{criterion.axis}-origins (got {n_bands})")
    counts = apportion(n_bands, criterion.fractions)
    for i in range(3):  # rebalance so nobody starves
        while counts[i] == 0:
            donor = int(np.argmax(counts))
            counts[donor] -= 1
            counts[i] += 1
    band_split = {}
    k = 0
    for split, c in zip(SPLITS, counts):
        for b in uniq[k:k + c]:
            band_split[b] = split
        k += c
    return [band_split[o[coord]] for o in origins]


def grid_origins(area: WorkingArea, tile_size: int, stride: int) -> list[tuple[int, int]]:
    def axis_origins(start: int, extent: int) -> list[int]:
        last = start + extent - tile_size
        xs = list(range(start, last + 1, stride))
        if xs[-1] != last:
            xs.append(last)  # clamp the final tile into the area
        return xs

    xs = axis_origins(area.x, area.w)
    ys = axis_origins(area.y, area.h)
    return [(x, y) for y in ys for x in xs]


# ---------------------------------------------------------------------------
# label rendering


def render_labels(regions: list[Region], rect: tuple[int, int, int, int]) -> np.ndarray:
    """Index raster of the regions over rect; later-created (higher id) wins."""
    x, y, w, h = rect
    out = np.zeros((h, w), dtype=np.uint16)
    for region in sorted(regions, key=lambda r: r.id):
        mask = rasterize(region, rect)
        out[mask] = region.class_index
    return out


# ---------------------------------------------------------------------------
# export and merge


def export_dataset(omap: OrthoMap, regions: list[Region], area: WorkingArea,
                   catalog: ClassCatalog, out_dir,
                   criterion: SplitCriterion | None = None,
                   tile_size: int = DEFAULT_TILE, stride: int | None = None,
                   progress=None) -> TileDataset:
    """Cut (image, label) tile pairs over the area and split them."""
    criterion = criterion or SplitCriterion()
    stride = stride or tile_size
    if stride <= 0 or stride > tile_size:
        raise DatasetError("stride must be in (0, tile_size]")
    if area.w < tile_size or area.h < tile_size:
        raise DatasetError(f"working area smaller than one {tile_size} px tile")
    area.clipped_to(omap.width, omap.height)

    origins = grid_origins(area, tile_size, stride)
    splits = assign_splits(origins, criterion)

    root = Path(out_dir)
    for split in SPLITS:
        (root / "images" / split).mkdir(parents=True, exist_ok=True)
        (root / "labels" / split).mkdir(parents=True, exist_ok=True)

    warnings = []
    relevant = [r for r in regions if _bbox_intersects(r, area)]
    any_labels = False
    records = []
    for i, ((x, y), split) in enumerate(zip(origins, splits)):
        win = read_window(omap, (x, y), tile_size, tile_size)
        rect = (x, y, tile_size, tile_size)
        labels = render_labels(relevant, rect)
        any_labels = any_labels or bool(labels.any())
        name = f"{x}_{y}.png"
        img_rel = f"images/{split}/{name}"
        lab_rel = f"labels/{split}/{name}"
        Image.fromarray(np.asarray(win.pixels), "RGB").save(root / img_rel, format="PNG")
        export_labelmap(LabelRaster(origin=(x, y), labels=labels), catalog,
                        root / lab_rel)
        records.append(TileRecord(image_path=img_rel, label_path=lab_rel,
                                  split=split, origin=(x, y)))
        if progress:
            progress((i + 1) / len(origins))
    if not any_labels:
        warnings.append("working area contains zero annotated pixels")

    ds = TileDataset(root=root, tiles=records, tile_size=tile_size,
                     pixel_size_mm=omap.pixel_size_mm, catalog=catalog,
                     criterion=criterion, map_id=omap.id,
                     extra={"warnings": warnings} if warnings else {})
    ds.save_manifest()
    return ds


def _bbox_intersects(region: Region, area: WorkingArea) -> bool:
    bx, by, bw, bh = region.bbox()
    return not (bx >= area.x + area.w or by >= area.y + area.h
                or bx + bw <= area.x or by + bh <= area.y)


def merge_datasets(a: TileDataset, b: TileDataset, target_pixel_size_mm: float,
                   out_dir) -> TileDataset:
    """Concatenate two datasets, resampling every tile to a common scale.

    Images resample bilinearly, labels nearest-neighbor (class colors stay
    exact). Tiles are re-padded (class 0 / black) or cropped at the
    right/bottom edge back to the tile size.
    """
    if target_pixel_size_mm <= 0:
        raise DatasetError("target pixel size must be > 0")
    _check_catalogs(a.catalog, b.catalog)
    tile_size = a.tile_size
    root = Path(out_dir)
    for split in SPLITS:
        (root / "images" / split).mkdir(parents=True, exist_ok=True)
        (root / "labels" / split).mkdir(parents=True, exist_ok=True)

    records = []
    for tag, ds in (("a", a), ("b", b)):
        scale = ds.pixel_size_mm / target_pixel_size_mm
        for rec in ds.tiles:
            name = f"{tag}_{rec.origin[0]}_{rec.origin[1]}.png"
            img_rel = f"images/{rec.split}/{name}"
            lab_rel = f"labels/{rec.split}/{name}"
            img = _resample(ds.image(rec), scale, Image.BILINEAR)
            lab_rgb = _load_rgb(ds.root / rec.label_path)
            lab = _resample(lab_rgb, scale, Image.NEAREST)
            _save_fit(img, root / img_rel, tile_size, fill=0)
            _save_fit(lab, root / lab_rel, tile_size, fill=0)
            records.append(TileRecord(image_path=img_rel, label_path=lab_rel,
                                      split=rec.split, origin=rec.origin))

    ds = TileDataset(root=root, tiles=records, tile_size=tile_size,
                     pixel_size_mm=float(target_pixel_size_mm),
                     catalog=a.catalog, criterion=None,
                     map_id=f"{a.map_id}+{b.map_id}")
    ds.save_manifest()
    return ds


def _check_catalogs(a: ClassCatalog, b: ClassCatalog) -> None:
    for i in range(max(len(a), len(b))):
        ea = (a.name(i), a.color(i)) if i < len(a) else None
        eb = (b.name(i), b.color(i)) if i < len(b) else None
        if ea != eb:
            raise DatasetError(
                f"catalog mismatch at index {i}: {ea!r} vs {eb!r}")


def _load_rgb(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"))


def _resample(arr: np.ndarray, scale: float, method) -> np.ndarray:
    if scale == 1.0:
        return arr
    h, w = arr.shape[:2]
    nw = max(1, int(round(w * scale)))
    nh = max(1, int(round(h * scale)))
    return np.asarray(Image.fromarray(arr, "RGB").resize((nw, nh), method))


def _save_fit(arr: np.ndarray, path: Path, tile_size: int, fill: int) -> None:
    h, w = arr.shape[:2]
    out = np.full((tile_size, tile_size, 3), fill, dtype=np.uint8)
    ch, cw = min(h, tile_size), min(w, tile_size)
    out[:ch, :cw] = arr[:ch, :cw]
    Image.fromarray(out, "RGB").save(path, format="PNG")
