"""HTTP facade over the annotation engine.

Every route delegates 1:1 to an engine operation; long-running work
(dataset export, training, inference, preview) runs through an async job
registry with cooperative cancellation. One project is open per server
process; mutations are serialized through the project writer lock and all
go through transactions, so they are undoable and never partially visible.
"""

from __future__ import annotations

import json
import os
import threading
import uuid
from collections import OrderedDict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from fastapi import FastAPI, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import FileResponse, JSONResponse, PlainTextResponse, Response
from pydantic import BaseModel, Field

from . import analysis as analysis_mod
from . import dataset as dataset_mod
from . import inference as inference_mod
from . import models as models_mod
from . import project as project_mod
from . import tools as tools_mod
from .clicks import (BuiltinBackend, ClickSet, ContractViolation,
                     ExtremeClicks, ExternalBackend, segment_clicks,
                     segment_extreme)
from .errors import OperationCancelled
from .graphcut import RefineParams, refine
from .raster import ClassCatalog, LabelRaster, OrthoMap, export_labelmap, open_orthomap, read_window
from .regions import Provenance, Region, region_area, vectorize
from .project import Project, ProjectError, SchemaError, TxOp

__all__ = ["ServiceConfig", "AppState", "Job", "JobRegistry", "create_app"]


@dataclass
class ServiceConfig:
    port: int = 8080
    job_parallelism: int = 2
    segment_backend: str | None = None  # external click-backend endpoint
    model_store: str = "models"

    @classmethod
    def from_sources(cls, config_file=None, env=None) -> "ServiceConfig":
        """File values first, environment overrides on top."""
        env = os.environ if env is None else env
        values: dict = {}
        if config_file and Path(config_file).exists():
            values.update(json.loads(Path(config_file).read_text()))
        if "ORTHOSEG_PORT" in env:
            values["port"] = int(env["ORTHOSEG_PORT"])
        if "ORTHOSEG_JOBS" in env:
            values["job_parallelism"] = int(env["ORTHOSEG_JOBS"])
        if "ORTHOSEG_SEGMENT_BACKEND" in env:
            values["segment_backend"] = env["ORTHOSEG_SEGMENT_BACKEND"] or None
        if "ORTHOSEG_MODEL_STORE" in env:
            values["model_store"] = env["ORTHOSEG_MODEL_STORE"]
        known = {f for f in cls.__dataclass_fields__}
        return cls(**{k: v for k, v in values.items() if k in known})


# ---------------------------------------------------------------------------
# jobs


class Job:
    KINDS = ("export-dataset", "train", "infer", "preview")

    def __init__(self, kind: str):
        self.id = uuid.uuid4().hex[:12]
        self.kind = kind
        self.state = "queued"
        self.progress = 0.0
        self.result: dict | None = None
        self.error: str | None = None
        self.cancel_event = threading.Event()
        self._lock = threading.Lock()

    def set_progress(self, p: float):
        with self._lock:
            self.progress = max(self.progress, min(1.0, float(p)))

    def to_json(self) -> dict:
        return {"id": self.id, "kind": self.kind, "state": self.state,
                "progress": self.progress, "result": self.result,
                "error": self.error}


class JobRegistry:
    def __init__(self, parallelism: int = 2):
        self.jobs: OrderedDict[str, Job] = OrderedDict()
        self.executor = ThreadPoolExecutor(max_workers=parallelism)
        self._lock = threading.Lock()

    def submit(self, kind: str, fn) -> Job:
        job = Job(kind)
        with self._lock:
            self.jobs[job.id] = job

        def run():
            if job.cancel_event.is_set():
                job.state = "cancelled"
                return
            job.state = "running"
            try:
                job.result = fn(job)
                job.set_progress(1.0)
                job.state = "done"
            except OperationCancelled as exc:
                job.error = str(exc)
                job.state = "cancelled"
            except Exception as exc:  # noqa: BLE001 - reported via the API
                job.error = f"{type(exc).__name__}: {exc}"
                job.state = "failed"

        self.executor.submit(run)
        return job

    def get(self, job_id: str) -> Job | None:
        return self.jobs.get(job_id)

    def cancel(self, job_id: str) -> Job | None:
        job = self.jobs.get(job_id)
        if job is None:
            return None
        if job.state in ("done", "failed", "cancelled"):
            raise JobConflict(f"job {job_id} already {job.state}")
        job.cancel_event.set()
        if job.state == "queued":
            job.state = "cancelled"
        return job


class JobConflict(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# application state


class AppState:
    def __init__(self, config: ServiceConfig | None = None):
        self.config = config or ServiceConfig()
        self.project = Project()
        self.project_path: Path | None = None
        self.maps: dict[str, OrthoMap] = {}
        self.jobs = JobRegistry(self.config.job_parallelism)
        self.lock = threading.RLock()
        if self.config.segment_backend:
            self.click_backend = ExternalBackend(self.config.segment_backend)
        else:
            self.click_backend = BuiltinBackend()

    # -- project & maps

    def load_project(self, path) -> None:
        with self.lock:
            self.project = project_mod.load(path)
            self.project_path = Path(path)
            self.maps.clear()

    def save_project(self, path=None) -> Path:
        with self.lock:
            target = Path(path) if path else self.project_path
            if target is None:
                raise ProjectError("no project path set")
            self.project_path = target
            return project_mod.save(self.project, target)

    def register_map(self, path, pixel_size_mm, map_id=None) -> OrthoMap:
        with self.lock:
            omap = open_orthomap(path, pixel_size_mm, map_id=map_id)
            self.project.add_map(omap.descriptor())
            self.maps[omap.id] = omap
            return omap

    def open_map(self, map_id: str) -> OrthoMap:
        with self.lock:
            if map_id in self.maps:
                return self.maps[map_id]
            desc = self.project.maps.get(map_id)
            if desc is None:
                raise KeyError(map_id)
            base = self.project_path.parent if self.project_path else Path(".")
            src = Path(desc["source_path"])
            if not src.is_absolute():
                src = base / src
            omap = open_orthomap(src, desc["pixel_size_mm"], map_id=map_id)
            self.maps[map_id] = omap
            return omap

    def model_store(self) -> Path:
        p = Path(self.config.model_store)
        p.mkdir(parents=True, exist_ok=True)
        return p


# ---------------------------------------------------------------------------
# request schemas


class ProjectBody(BaseModel):
    path: str | None = None
    project: dict | None = None
    catalog: list | None = None


class SaveBody(BaseModel):
    path: str | None = None


class MapBody(BaseModel):
    path: str
    pixel_size_mm: float
    id: str | None = None


class RegionBody(BaseModel):
    class_index: int
    outer: list
    holes: list = Field(default_factory=list)
    provenance: str = Provenance.MANUAL


class RegionCreateBody(BaseModel):
    map: str
    region: RegionBody
    expected_revision: int | None = None


class SketchToolBody(BaseModel):
    map: str
    points: list
    class_index: int | None = None
    region_id: int | None = None
    expected_revision: int | None = None


class RefineBody(BaseModel):
    map: str
    region_id: int
    band_width: int = 30
    lam: float = 50.0
    hist_bins: int = 16
    expected_revision: int | None = None


class ExtremeBody(BaseModel):
    map: str
    class_index: int
    points: list  # 4 x [x, y]
    expected_revision: int | None = None


class PosNegBody(BaseModel):
    map: str
    positives: list
    negatives: list = Field(default_factory=list)
    class_index: int | None = None
    prior_region_id: int | None = None
    expected_revision: int | None = None


class ExportDatasetBody(BaseModel):
    map: str
    area: list  # [x, y, w, h]
    out_dir: str
    tile_size: int = 1024
    stride: int | None = None
    criterion: str = "random"  # random | spatial-x | spatial-y
    seed: int = 0
    fractions: list = Field(default_factory=lambda: [0.70, 0.15, 0.15])


class TrainBody(BaseModel):
    dataset_dir: str
    model_id: str | None = None
    epochs: int = 20
    learning_rate: float = 0.01
    batch_tiles: int = 8
    seed: int = 1234


class InferBody(BaseModel):
    map: str
    model_id: str
    area: list | None = None
    tile_size: int = 1024
    stride: int = 512
    min_region_px: float = 4.0
    commit: bool = True
    out_labelmap: str | None = None


class ChangesBody(BaseModel):
    map_a: str
    map_b: str
    tau_iou: float = analysis_mod.DEFAULT_TAU_IOU
    grow_thresh: float = analysis_mod.DEFAULT_GROW_THRESH


# ---------------------------------------------------------------------------
# helpers


def _region_json(region: Region) -> dict:
    return project_mod._region_to_json(region)


def _parse_region(body: RegionBody, region_id: int = -1) -> Region:
    return Region(id=region_id, class_index=body.class_index,
                  outer=np.asarray(body.outer, float),
                  holes=[np.asarray(h, float) for h in body.holes],
                  provenance=body.provenance)


class HTTPError(Exception):
    def __init__(self, status: int, message: str):
        self.status = status
        self.message = message


def _window_for_bbox(omap: OrthoMap, bbox, margin: int):
    x0 = max(0, int(np.floor(bbox[0])) - margin)
    y0 = max(0, int(np.floor(bbox[1])) - margin)
    x1 = min(omap.width, int(np.ceil(bbox[0] + bbox[2])) + margin)
    y1 = min(omap.height, int(np.ceil(bbox[1] + bbox[3])) + margin)
    if x1 <= x0 or y1 <= y0:
        raise HTTPError(400, "geometry outside map bounds")
    return read_window(omap, (x0, y0), x1 - x0, y1 - y0)


def _check_revision(state: AppState, expected: int | None):
    if expected is not None and expected != state.project.revision:
        raise HTTPError(409, f"revision mismatch: project is at "
                             f"{state.project.revision}, request expected {expected}")


def _largest_region(mask: np.ndarray, origin, class_index, provenance) -> Region:
    pieces = vectorize(mask, window_origin=origin, class_index=class_index,
                       provenance=provenance)
    if not pieces:
        raise HTTPError(422, "tool produced an empty mask")
    return max(pieces, key=region_area)


# ---------------------------------------------------------------------------
# app factory


def create_app(state: AppState | None = None) -> FastAPI:
    state = state or AppState()
    app = FastAPI(title="orthoseg", version="0.1.0")
    app.state.engine = state

    @app.exception_handler(RequestValidationError)
    async def bad_request(_req: Request, exc: RequestValidationError):
        return JSONResponse(status_code=400, content={"error": str(exc)})

    @app.exception_handler(HTTPError)
    async def http_error(_req: Request, exc: HTTPError):
        return JSONResponse(status_code=exc.status, content={"error": exc.message})

    @app.exception_handler(ContractViolation)
    async def contract_violation(_req: Request, exc: ContractViolation):
        return JSONResponse(status_code=422,
                            content={"error": f"contract violation: {exc}"})

    @app.exception_handler(SchemaError)
    async def schema_error(_req: Request, exc: SchemaError):
        return JSONResponse(status_code=400, content={"error": str(exc)})

    @app.exception_handler(ProjectError)
    async def project_error(_req: Request, exc: ProjectError):
        msg = str(exc)
        status = 404 if "unknown" in msg else 409
        return JSONResponse(status_code=status, content={"error": msg})

    @app.exception_handler(JobConflict)
    async def job_conflict(_req: Request, exc: JobConflict):
        return JSONResponse(status_code=409, content={"error": str(exc)})

    @app.exception_handler(Exception)
    async def internal(_req: Request, exc: Exception):
        cid = uuid.uuid4().hex[:8]
        return JSONResponse(status_code=500, content={
            "error": f"internal error [{cid}]: {type(exc).__name__}: {exc}",
            "correlation_id": cid})

    # -- project

    @app.get("/project")
    def get_project():
        with state.lock:
            doc = state.project.to_json()
            doc["revision"] = state.project.revision
            return doc

    @app.post("/project")
    def post_project(body: ProjectBody):
        with state.lock:
            if body.path:
                state.load_project(body.path)
            elif body.project is not None:
                state.project = Project.from_json(body.project)
                state.maps.clear()
            else:
                catalog = ClassCatalog(
                    [(e["name"], tuple(e["color"])) for e in (body.catalog or [])])
                state.project = Project(catalog)
                state.maps.clear()
                state.project_path = None
            return {"ok": True, "revision": state.project.revision,
                    "maps": sorted(state.project.maps),
                    "classes": list(state.project.catalog.names)}

    @app.post("/project/save")
    def post_project_save(body: SaveBody):
        path = state.save_project(body.path)
        return {"ok": True, "path": str(path)}

    @app.post("/project/undo")
    def post_undo():
        state.project.undo()
        return {"ok": True, "revision": state.project.revision}

    @app.post("/maps")
    def post_maps(body: MapBody):
        omap = state.register_map(body.path, body.pixel_size_mm, body.id)
        return omap.descriptor() | {"pyramid_levels": omap.pyramid_levels}

    @app.get("/maps/{map_id}/tiles/{z}/{x}/{y}.png")
    def get_tile(map_id: str, z: int, x: int, y: int):
        try:
            omap = state.open_map(map_id)
            path = omap.tile_file(z, x, y)
        except KeyError:
            raise HTTPError(404, f"unknown map {map_id!r}")
        except Exception as exc:
            raise HTTPError(404, str(exc))
        return FileResponse(path, media_type="image/png")

    # -- regions CRUD

    @app.get("/regions")
    def get_regions(map: str):
        if map not in state.project.maps:
            raise HTTPError(404, f"unknown map {map!r}")
        return [_region_json(r) for r in state.project.map_regions(map)]

    @app.post("/regions")
    def post_region(body: RegionCreateBody):
        _check_revision(state, body.expected_revision)
        region = _parse_region(body.region)
        created = state.project.apply_transaction(
            [TxOp.create(body.map, region)])
        return _region_json(created[0])

    @app.put("/regions/{region_id}")
    def put_region(region_id: int, body: RegionCreateBody):
        _check_revision(state, body.expected_revision)
        state.project.find_region(body.map, region_id)
        region = _parse_region(body.region, region_id)
        state.project.apply_transaction([TxOp.replace(body.map, region)])
        return _region_json(region)

    @app.delete("/regions/{region_id}")
    def delete_region(region_id: int, map: str):
        state.project.find_region(map, region_id)
        state.project.apply_transaction([TxOp.delete(map, region_id)])
        return {"ok": True}

    # -- interactive tools

    @app.post("/tools/freehand")
    def tool_freehand(body: SketchToolBody):
        _check_revision(state, body.expected_revision)
        if body.class_index is None:
            raise HTTPError(400, "freehand needs class_index")
        try:
            region = tools_mod.freehand_close(
                tools_mod.Sketch(np.asarray(body.points, float)), body.class_index)
        except (tools_mod.ToolError, ValueError) as exc:
            raise HTTPError(422, str(exc))
        created = state.project.apply_transaction(
            [TxOp.create(body.map, region)])
        return _region_json(created[0])

    @app.post("/tools/cut")
    def tool_cut(body: SketchToolBody):
        _check_revision(state, body.expected_revision)
        if body.region_id is None:
            raise HTTPError(400, "cut needs region_id")
        region = state.project.find_region(body.map, body.region_id)
        try:
            parts = tools_mod.cut(region,
                                  tools_mod.Sketch(np.asarray(body.points, float)))
        except (tools_mod.ToolError, ValueError) as exc:
            raise HTTPError(422, str(exc))
        ops = [TxOp.delete(body.map, region.id)] + \
            [TxOp.create(body.map, p) for p in parts]
        created = state.project.apply_transaction(ops)
        return [_region_json(r) for r in created]

    @app.post("/tools/edit-border")
    def tool_edit_border(body: SketchToolBody):
        _check_revision(state, body.expected_revision)
        if body.region_id is None:
            raise HTTPError(400, "edit-border needs region_id")
        region = state.project.find_region(body.map, body.region_id)
        try:
            edited = tools_mod.edit_border(
                region, tools_mod.Sketch(np.asarray(body.points, float)))
        except (tools_mod.ToolError, ValueError) as exc:
            raise HTTPError(422, str(exc))
        state.project.apply_transaction([TxOp.replace(body.map, edited)])
        return _region_json(edited)

    @app.post("/tools/refine")
    def tool_refine(body: RefineBody):
        _check_revision(state, body.expected_revision)
        region = state.project.find_region(body.map, body.region_id)
        omap = state.open_map(body.map)
        params = RefineParams(band_width=body.band_width, lam=body.lam,
                              hist_bins=body.hist_bins)
        window = _window_for_bbox(omap, region.bbox(), params.band_width + 8)
        try:
            refined = refine(window, region, params)
        except Exception as exc:
            raise HTTPError(422, f"refinement failed: {exc}")
        state.project.apply_transaction([TxOp.replace(body.map, refined)])
        return _region_json(refined)

    @app.post("/tools/extreme-click")
    def tool_extreme(body: ExtremeBody):
        _check_revision(state, body.expected_revision)
        omap = state.open_map(body.map)
        clicks = ExtremeClicks(np.asarray(body.points, float))
        x0, y0, x1, y1 = clicks.bbox()
        window = _window_for_bbox(omap, (x0, y0, x1 - x0, y1 - y0), 160)
        mask = segment_extreme(window, clicks, state.click_backend)
        region = _largest_region(mask, window.origin, body.class_index,
                                 Provenance.ASSISTED_CLICK)
        created = state.project.apply_transaction(
            [TxOp.create(body.map, region)])
        return _region_json(created[0])

    @app.post("/tools/posneg-click")
    def tool_posneg(body: PosNegBody):
        _check_revision(state, body.expected_revision)
        omap = state.open_map(body.map)
        pts = np.asarray(body.positives, float)
        prior_region = None
        if body.prior_region_id is not None:
            prior_region = state.project.find_region(body.map, body.prior_region_id)
            bbox = prior_region.bbox()
            window = _window_for_bbox(omap, bbox, 96)
            from .regions import rasterize as _rasterize
            prior = _rasterize(prior_region,
                               (window.origin[0], window.origin[1],
                                window.width, window.height))
        else:
            allpts = np.vstack([pts, np.asarray(body.negatives, float).reshape(-1, 2)]) \
                if body.negatives else pts
            bx0, by0 = allpts.min(axis=0)
            bx1, by1 = allpts.max(axis=0)
            window = _window_for_bbox(omap, (bx0, by0, bx1 - bx0, by1 - by0), 128)
            prior = None
        clicks = ClickSet(positives=pts,
                          negatives=np.asarray(body.negatives, float).reshape(-1, 2),
                          prior_mask=prior)
        mask = segment_clicks(window, clicks, state.click_backend)
        if prior_region is not None:
            edited = _largest_region(mask, window.origin,
                                     prior_region.class_index, Provenance.EDITED)
            edited.id = prior_region.id
            state.project.apply_transaction([TxOp.replace(body.map, edited)])
            return _region_json(edited)
        if body.class_index is None:
            raise HTTPError(400, "posneg-click needs class_index for new regions")
        region = _largest_region(mask, window.origin, body.class_index,
                                 Provenance.ASSISTED_CLICK)
        created = state.project.apply_transaction([TxOp.create(body.map, region)])
        return _region_json(created[0])

    # -- jobs

    @app.post("/jobs/export-dataset")
    def job_export(body: ExportDatasetBody):
        omap = state.open_map(body.map)
        regions = state.project.map_regions(body.map)
        catalog = state.project.catalog
        if body.criterion == "random":
            crit = dataset_mod.SplitCriterion(kind="random", seed=body.seed,
                                              fractions=tuple(body.fractions))
        else:
            axis = body.criterion.split("-")[-1]
            crit = dataset_mod.SplitCriterion(kind="spatial-bands", axis=axis,
                                              seed=body.seed,
                                              fractions=tuple(body.fractions))
        area = dataset_mod.WorkingArea(*body.area)

        def work(job: Job):
            try:
                ds = dataset_mod.export_dataset(
                    omap, regions, area, catalog, body.out_dir, criterion=crit,
                    tile_size=body.tile_size, stride=body.stride,
                    progress=job.set_progress,
                )
            except BaseException:
                _cleanup_dir(body.out_dir)
                raise
            if job.cancel_event.is_set():
                _cleanup_dir(body.out_dir)
                raise OperationCancelled("export cancelled")
            return {"dataset": str(ds.root), "tiles": len(ds.tiles)}

        return state.jobs.submit("export-dataset", work).to_json()

    @app.post("/jobs/train")
    def job_train(body: TrainBody):
        ds = dataset_mod.load_dataset(body.dataset_dir)
        hyper = models_mod.Hyperparams(epochs=body.epochs,
                                       learning_rate=body.learning_rate,
                                       batch_tiles=body.batch_tiles,
                                       seed=body.seed)

        def work(job: Job):
            handle, model = models_mod.train(
                ds, hyper,
                progress=lambda p, info=None: job.set_progress(p),
                should_cancel=job.cancel_event.is_set,
                model_id=body.model_id)
            store = state.model_store()
            mdir = models_mod.save_model(store, handle, model)
            report = None
            if ds.split_tiles("test"):
                report = models_mod.evaluate(model, ds, out_dir=mdir)
            with state.lock:
                state.project.models.append(handle.to_json())
            out = {"model_id": handle.id, "val_accuracy": handle.val_accuracy}
            if report:
                out["miou"] = report.miou
                out["accuracy"] = report.accuracy
            return out

        return state.jobs.submit("train", work).to_json()

    @app.post("/jobs/infer")
    def job_infer(body: InferBody):
        omap = state.open_map(body.map)
        _, model = models_mod.load_model(state.model_store(), body.model_id)
        config = inference_mod.InferenceConfig(tile_size=body.tile_size,
                                               stride=body.stride,
                                               min_region_px=body.min_region_px)
        area = tuple(body.area) if body.area else None

        def work(job: Job):
            result = inference_mod.run_inference(
                omap, model, area=area, config=config,
                progress=job.set_progress,
                should_cancel=job.cancel_event.is_set)
            out = {"tiles": result.stats["tiles"],
                   "regions": len(result.regions)}
            if body.out_labelmap:
                export_labelmap(result.labels, state.project.catalog,
                                body.out_labelmap)
                out["labelmap"] = body.out_labelmap
            if body.commit:
                if job.cancel_event.is_set():
                    raise OperationCancelled("inference cancelled before commit")
                created = inference_mod.commit_regions(state.project, body.map,
                                                       result.regions)
                out["region_ids"] = [r.id for r in created]
            return out

        return state.jobs.submit("infer", work).to_json()

    @app.post("/jobs/preview")
    def job_preview(body: InferBody):
        omap = state.open_map(body.map)
        _, model = models_mod.load_model(state.model_store(), body.model_id)
        config = inference_mod.InferenceConfig(tile_size=body.tile_size,
                                               stride=body.stride)
        if not body.area:
            raise HTTPError(400, "preview needs an area")
        area = tuple(body.area)

        def work(job: Job):
            labels = inference_mod.preview(omap, model, area, config,
                                           progress=job.set_progress,
                                           should_cancel=job.cancel_event.is_set)
            out_path = body.out_labelmap or f"preview_{job.id}.png"
            export_labelmap(labels, state.project.catalog, out_path)
            return {"labelmap": out_path, "area": list(area)}

        return state.jobs.submit("preview", work).to_json()

    @app.get("/jobs/{job_id}")
    def get_job(job_id: str):
        job = state.jobs.get(job_id)
        if job is None:
            raise HTTPError(404, f"unknown job {job_id!r}")
        return job.to_json()

    @app.delete("/jobs/{job_id}")
    def cancel_job(job_id: str):
        job = state.jobs.cancel(job_id)
        if job is None:
            raise HTTPError(404, f"unknown job {job_id!r}")
        return job.to_json()

    # -- models

    @app.get("/models")
    def get_models():
        return [h.to_json() for h in models_mod.list_models(state.model_store())]

    @app.get("/models/{model_id}/report")
    def get_report(model_id: str):
        path = state.model_store() / model_id / "report.json"
        if not path.exists():
            raise HTTPError(404, f"no report for model {model_id!r}")
        return json.loads(path.read_text())

    # -- analysis

    @app.get("/analysis/coverage")
    def get_coverage(map: str, x: int = 0, y: int = 0, w: int = 0, h: int = 0):
        omap = state.open_map(map)
        if w <= 0 or h <= 0:
            x, y, w, h = 0, 0, omap.width, omap.height
        report = analysis_mod.coverage(state.project.map_regions(map),
                                       state.project.catalog, (x, y, w, h),
                                       omap.pixel_size_mm)
        return report.to_json()

    @app.post("/analysis/changes")
    def post_changes(body: ChangesBody):
        map_a = state.open_map(body.map_a)
        map_b = state.open_map(body.map_b)
        records = analysis_mod.detect_changes(
            state.project.map_regions(body.map_a),
            state.project.map_regions(body.map_b),
            map_a, map_b, tau_iou=body.tau_iou, grow_thresh=body.grow_thresh)
        return analysis_mod.changes_to_json(records)

    # -- exports

    @app.get("/export/labelmap")
    def export_labelmap_route(map: str, x: int = 0, y: int = 0,
                              w: int = 0, h: int = 0):
        omap = state.open_map(map)
        if w <= 0 or h <= 0:
            x, y, w, h = 0, 0, omap.width, omap.height
        labels = dataset_mod.render_labels(state.project.map_regions(map),
                                           (x, y, w, h))
        lut = state.project.catalog.color_lut()
        import io as _io
        from PIL import Image as _Image
        buf = _io.BytesIO()
        _Image.fromarray(lut[labels], "RGB").save(buf, format="PNG")
        return Response(content=buf.getvalue(), media_type="image/png")

    @app.get("/export/vector")
    def export_vector_route(map: str):
        import tempfile
        with tempfile.NamedTemporaryFile(suffix=".geojson", delete=False) as f:
            tmp = f.name
        project_mod.export_vector(state.project.map_regions(map),
                                  state.project.catalog, tmp)
        data = Path(tmp).read_text()
        os.unlink(tmp)
        return Response(content=data, media_type="application/geo+json")

    @app.get("/export/csv")
    def export_csv_route(map: str, x: int = 0, y: int = 0,
                         w: int = 0, h: int = 0):
        omap = state.open_map(map)
        if w <= 0 or h <= 0:
            x, y, w, h = 0, 0, omap.width, omap.height
        report = analysis_mod.coverage(state.project.map_regions(map),
                                       state.project.catalog, (x, y, w, h),
                                       omap.pixel_size_mm)
        import tempfile
        with tempfile.NamedTemporaryFile(suffix=".csv", delete=False) as f:
            tmp = f.name
        analysis_mod.export_csv(report, tmp)
        data = Path(tmp).read_text()
        os.unlink(tmp)
        return PlainTextResponse(content=data, media_type="text/csv")

    return app


def _cleanup_dir(path):
    import shutil
    shutil.rmtree(path, ignore_errors=True)
