"""Project state: catalog, maps, regions, models, undo journal, and IO.

The on-disk form is a single versioned JSON document (docs/project-schema.md)
referencing orthoimages by path. Region coordinates are serialized with 3
decimal digits. Every mutation of the region set goes through
`apply_transaction`, so undo covers all user actions; the journal keeps the
last 64 transactions.

Vector interchange is a GeoJSON profile (docs/geojson-profile.md): polygon
features in pixel coordinates carrying a `class_name` property.
"""

from __future__ import annotations

import json
import threading
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .raster import ClassCatalog
from .regions import Provenance, Region, ring_area

__all__ = [
    "PROJECT_VERSION",
    "JOURNAL_DEPTH",
    "COORD_DECIMALS",
    "Project",
    "TxOp",
    "ProjectError",
    "SchemaError",
    "save",
    "load",
    "import_vector",
    "export_vector",
]

PROJECT_VERSION = 1
JOURNAL_DEPTH = 64
COORD_DECIMALS = 3


class ProjectError(RuntimeError):
    pass


class SchemaError(ProjectError):
    """Schema violation; message carries a JSON-pointer-style path."""


@dataclass
class TxOp:
    kind: str  # "create" | "delete" | "replace"
    map_id: str
    region: Region | None = None
    region_id: int | None = None

    @classmethod
    def create(cls, map_id: str, region: Region) -> "TxOp":
        return cls(kind="create", map_id=map_id, region=region)

    @classmethod
    def delete(cls, map_id: str, region_id: int) -> "TxOp":
        return cls(kind="delete", map_id=map_id, region_id=region_id)

    @classmethod
    def replace(cls, map_id: str, region: Region) -> "TxOp":
        return cls(kind="replace", map_id=map_id, region=region)


class Project:
    def __init__(self, catalog: ClassCatalog | None = None):
        self.version = PROJECT_VERSION
        self.catalog = catalog or ClassCatalog()
        self.maps: dict[str, dict] = {}  # id -> descriptor
        self.regions: dict[str, dict[int, Region]] = {}
        self.models: list[dict] = []
        self.journal: deque = deque(maxlen=JOURNAL_DEPTH)
        self.revision = 0
        self.extra: dict = {}  # unknown future fields, preserved opaquely
        self._next_id = 1
        self._lock = threading.RLock()

    # -- maps

    def add_map(self, descriptor: dict) -> None:
        with self._lock:
            map_id = descriptor["id"]
            if map_id in self.maps:
                raise ProjectError(f"duplicate map id {map_id!r}")
            self.maps[map_id] = dict(descriptor)
            self.regions.setdefault(map_id, {})
            self.revision += 1

    def map_regions(self, map_id: str) -> list[Region]:
        if map_id not in self.maps:
            raise ProjectError(f"unknown map {map_id!r}")
        return list(self.regions.get(map_id, {}).values())

    def find_region(self, map_id: str, region_id: int) -> Region:
        try:
            return self.regions[map_id][region_id]
        except KeyError:
            raise ProjectError(
                f"unknown region {region_id} on map {map_id!r}") from None

    # -- transactions

    def apply_transaction(self, ops: list[TxOp]) -> list[Region]:
        """Atomically apply region create/delete/replace ops; one undo entry."""
        with self._lock:
            inverse: list[TxOp] = []
            staged: list[tuple] = []
            next_id = self._next_id
            created: list[Region] = []
            for i, op in enumerate(ops):
                if op.map_id not in self.maps:
                    raise ProjectError(f"op {i}: unknown map {op.map_id!r}")
                bucket = self.regions.setdefault(op.map_id, {})
                if op.kind == "create":
                    region = op.region
                    if region is None:
                        raise ProjectError(f"op {i}: create without a region")
                    if not (0 <= region.class_index < len(self.catalog)):
                        raise ProjectError(
                            f"op {i}: class index {region.class_index} outside catalog")
                    rid = region.id
                    if rid is None or rid < 0:
                        rid = next_id
                        next_id += 1
                    elif rid in bucket:
                        raise ProjectError(f"op {i}: region id {rid} already exists")
                    next_id = max(next_id, rid + 1)
                    staged.append(("create", op.map_id, rid, region))
                elif op.kind == "delete":
                    if op.region_id not in bucket:
                        raise ProjectError(
                            f"op {i}: unknown region {op.region_id} on {op.map_id!r}")
                    staged.append(("delete", op.map_id, op.region_id, None))
                elif op.kind == "replace":
                    region = op.region
                    if region is None or region.id not in bucket:
                        raise ProjectError(
                            f"op {i}: replace of unknown region "
                            f"{getattr(region, 'id', None)}")
                    if not (0 <= region.class_index < len(self.catalog)):
                        raise ProjectError(
                            f"op {i}: class index {region.class_index} outside catalog")
                    staged.append(("replace", op.map_id, region.id, region))
                else:
                    raise ProjectError(f"op {i}: unknown op kind {op.kind!r}")

            for kind, map_id, rid, region in staged:
                bucket = self.regions[map_id]
                if kind == "create":
                    new = _with_id(region, rid)
                    bucket[rid] = new
                    created.append(new)
                    inverse.append(TxOp.delete(map_id, rid))
                elif kind == "delete":
                    inverse.append(TxOp.create(map_id, bucket.pop(rid)))
                else:
                    inverse.append(TxOp.replace(map_id, bucket[rid]))
                    bucket[rid] = region
            self._next_id = next_id
            self.journal.append(list(reversed(inverse)))
            self.revision += 1
            return created

    def undo(self) -> None:
        with self._lock:
            if not self.journal:
                raise ProjectError("undo journal is empty")
            inverse = self.journal.pop()
            for op in inverse:
                bucket = self.regions.setdefault(op.map_id, {})
                if op.kind == "create":
                    bucket[op.region.id] = op.region
                elif op.kind == "delete":
                    bucket.pop(op.region_id, None)
                else:
                    bucket[op.region.id] = op.region
            self.revision += 1

    # -- (de)serialization

    def to_json(self) -> dict:
        doc = {
            "version": self.version,
            "catalog": self.catalog.to_json(),
            "maps": [self.maps[k] for k in sorted(self.maps)],
            "regions": {
                map_id: [_region_to_json(r) for _, r in sorted(bucket.items())]
                for map_id, bucket in sorted(self.regions.items())
            },
            "models": self.models,
        }
        for key, value in sorted(self.extra.items()):
            doc.setdefault(key, value)
        return doc

    @classmethod
    def from_json(cls, doc: dict) -> "Project":
        version = _expect(doc, "version", int, "/version")
        if version > PROJECT_VERSION:
            raise ProjectError(
                f"project version {version} is newer than supported "
                f"{PROJECT_VERSION}")
        project = cls(ClassCatalog.from_json(_expect(doc, "catalog", list,
                                                     "/catalog")))
        for i, desc in enumerate(_expect(doc, "maps", list, "/maps")):
            if not isinstance(desc, dict) or "id" not in desc:
                raise SchemaError(f"/maps/{i}: map descriptor needs an id")
            project.maps[desc["id"]] = desc
            project.regions.setdefault(desc["id"], {})
        regions = _expect(doc, "regions", dict, "/regions")
        for map_id, lst in regions.items():
            if map_id not in project.maps:
                raise SchemaError(f"/regions/{map_id}: unknown map")
            if not isinstance(lst, list):
                raise SchemaError(f"/regions/{map_id}: expected a list")
            bucket = project.regions[map_id]
            for i, rj in enumerate(lst):
                region = _region_from_json(rj, f"/regions/{map_id}/{i}",
                                           len(project.catalog))
                if region.id in bucket:
                    raise SchemaError(
                        f"/regions/{map_id}/{i}: duplicate region id {region.id}")
                bucket[region.id] = region
                project._next_id = max(project._next_id, region.id + 1)
        project.models = doc.get("models", [])
        known = {"version", "catalog", "maps", "regions", "models"}
        project.extra = {k: v for k, v in doc.items() if k not in known}
        return project


def _with_id(region: Region, rid: int) -> Region:
    return Region(id=rid, class_index=region.class_index, outer=region.outer,
                  holes=region.holes, provenance=region.provenance,
                  cached_stats=region.cached_stats)


def _round_ring(ring: np.ndarray) -> list:
    return [[round(float(x), COORD_DECIMALS), round(float(y), COORD_DECIMALS)]
            for x, y in np.asarray(ring, dtype=float)]


def _region_to_json(region: Region) -> dict:
    return {
        "id": region.id,
        "class_index": region.class_index,
        "outer": _round_ring(region.outer),
        "holes": [_round_ring(h) for h in region.holes],
        "provenance": region.provenance,
    }


def _region_from_json(rj, path: str, catalog_size: int) -> Region:
    if not isinstance(rj, dict):
        raise SchemaError(f"{path}: expected an object")
    for key, typ in (("id", int), ("class_index", int), ("outer", list)):
        if key not in rj or not isinstance(rj[key], typ):
            raise SchemaError(f"{path}/{key}: missing or wrong type")
    if not (0 <= rj["class_index"] < catalog_size):
        raise SchemaError(f"{path}/class_index: outside catalog")
    outer = np.asarray(rj["outer"], dtype=float)
    if outer.ndim != 2 or outer.shape[1] != 2 or len(outer) < 3:
        raise SchemaError(f"{path}/outer: need >= 3 [x, y] pairs")
    holes = [np.asarray(h, dtype=float) for h in rj.get("holes", [])]
    prov = rj.get("provenance", Provenance.IMPORTED)
    if prov not in Provenance.ALL:
        raise SchemaError(f"{path}/provenance: unknown value {prov!r}")
    return Region(id=rj["id"], class_index=rj["class_index"], outer=outer,
                  holes=holes, provenance=prov)


def _expect(doc: dict, key: str, typ, path: str):
    if key not in doc:
        raise SchemaError(f"{path}: missing")
    if not isinstance(doc[key], typ):
        raise SchemaError(f"{path}: expected {typ.__name__}")
    return doc[key]


def save(project: Project, path) -> Path:
    path = Path(path)
    text = json.dumps(project.to_json(), sort_keys=True,
                      separators=(",", ": "), indent=1) + "\n"
    path.write_text(text)
    return path


def load(path) -> Project:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError:
        raise ProjectError(f"no such project file: {path}") from None
    except json.JSONDecodeError as exc:
        raise SchemaError(f"/: not valid JSON ({exc})") from exc
    if not isinstance(doc, dict):
        raise SchemaError("/: expected a JSON object")
    return Project.from_json(doc)


# ---------------------------------------------------------------------------
# GeoJSON-profile vector exchange


def import_vector(path, catalog: ClassCatalog) -> list[Region]:
    """Read polygon features with class_name properties into Regions."""
    doc = json.loads(Path(path).read_text())
    if doc.get("type") != "FeatureCollection":
        raise SchemaError("/type: expected FeatureCollection")
    regions = []
    for i, feat in enumerate(doc.get("features", [])):
        path_i = f"/features/{i}"
        geom = feat.get("geometry") or {}
        if geom.get("type") != "Polygon":
            raise SchemaError(
                f"{path_i}/geometry/type: only Polygon supported, "
                f"got {geom.get('type')!r}")
        props = feat.get("properties") or {}
        class_name = props.get("class_name")
        if class_name not in catalog.names:
            raise SchemaError(
                f"{path_i}/properties/class_name: {class_name!r} not in catalog")
        rings = geom.get("coordinates") or []
        if not rings:
            raise SchemaError(f"{path_i}/geometry/coordinates: empty polygon")
        norm = []
        for j, ring in enumerate(rings):
            arr = np.asarray(ring, dtype=float)
            if arr.ndim != 2 or arr.shape[1] != 2 or len(arr) < 4:
                raise SchemaError(
                    f"{path_i}/geometry/coordinates/{j}: need closed ring")
            if np.allclose(arr[0], arr[-1]):
                arr = arr[:-1]
            # normalize winding: outer positive, holes negative
            want_positive = j == 0
            if (ring_area(arr) > 0) != want_positive:
                arr = arr[::-1]
            norm.append(arr)
        prov = props.get("provenance", Provenance.IMPORTED)
        if prov not in Provenance.ALL:
            prov = Provenance.IMPORTED
        regions.append(Region(id=int(props.get("id", -1)),
                              class_index=catalog.index_of(class_name),
                              outer=norm[0], holes=norm[1:], provenance=prov))
    return regions


def export_vector(regions: list[Region], catalog: ClassCatalog, path) -> Path:
    """Write the documented GeoJSON profile; rings closed, 3-decimal coords."""
    features = []
    for r in regions:
        rings = [_round_ring(r.outer) + [_round_ring(r.outer)[0]]]
        for h in r.holes:
            rings.append(_round_ring(h) + [_round_ring(h)[0]])
        features.append({
            "type": "Feature",
            "properties": {
                "id": r.id,
                "class_name": catalog.name(r.class_index),
                "provenance": r.provenance,
            },
            "geometry": {"type": "Polygon", "coordinates": rings},
        })
    doc = {"type": "FeatureCollection", "features": features}
    out = Path(path)
    out.write_text(json.dumps(doc, sort_keys=True, separators=(",", ": "),
                              indent=1) + "\n")
    return out
