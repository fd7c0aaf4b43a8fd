"""Headless command line: serve the HTTP API or run pipeline steps directly."""

from __future__ import annotations

import json
from pathlib import Path

import click
import numpy as np

from . import analysis as analysis_mod
from . import dataset as dataset_mod
from . import inference as inference_mod
from . import models as models_mod
from . import project as project_mod
from .raster import export_labelmap, open_orthomap
from .service import AppState, ServiceConfig, create_app


def _parse_area(text):
    if not text:
        return None
    parts = [int(p) for p in text.split(",")]
    if len(parts) != 4:
        raise click.BadParameter("area must be x,y,w,h")
    return tuple(parts)


def _load_state(project_path, config_path=None) -> AppState:
    state = AppState(ServiceConfig.from_sources(config_path))
    if project_path:
        state.load_project(project_path)
    return state


@click.group()
def main():
    """AI-assisted orthoimage annotation engine."""


@main.command()
@click.option("--project", "project_path", type=click.Path(exists=True),
              default=None, help="project.json to open")
@click.option("--port", type=int, default=None)
@click.option("--config", "config_path", type=click.Path(), default=None)
def serve(project_path, port, config_path):
    """Run the HTTP service."""
    import uvicorn
    config = ServiceConfig.from_sources(config_path)
    if port is not None:
        config.port = port
    state = AppState(config)
    if project_path:
        state.load_project(project_path)
    uvicorn.run(create_app(state), host="127.0.0.1", port=config.port)


@main.command("export-dataset")
@click.option("--project", "project_path", type=click.Path(exists=True), required=True)
@click.option("--map", "map_id", required=True)
@click.option("--area", required=True, help="x,y,w,h in map pixels")
@click.option("--out", "out_dir", type=click.Path(), required=True)
@click.option("--tile", type=int, default=1024)
@click.option("--stride", type=int, default=None)
@click.option("--criterion", type=click.Choice(["random", "spatial-x", "spatial-y"]),
              default="random")
@click.option("--seed", type=int, default=0)
@click.option("--fractions", default="0.70,0.15,0.15")
def export_dataset_cmd(project_path, map_id, area, out_dir, tile, stride,
                       criterion, seed, fractions):
    """Export (image, label) training tiles from an annotated area."""
    state = _load_state(project_path)
    omap = state.open_map(map_id)
    fr = tuple(float(f) for f in fractions.split(","))
    if criterion == "random":
        crit = dataset_mod.SplitCriterion(kind="random", seed=seed, fractions=fr)
    else:
        crit = dataset_mod.SplitCriterion(kind="spatial-bands",
                                          axis=criterion.split("-")[-1],
                                          seed=seed, fractions=fr)
    ds = dataset_mod.export_dataset(
        omap, state.project.map_regions(map_id),
        dataset_mod.WorkingArea(*_parse_area(area)), state.project.catalog,
        out_dir, criterion=crit, tile_size=tile, stride=stride)
    counts = {s: len(ds.split_tiles(s)) for s in dataset_mod.SPLITS}
    click.echo(f"exported {len(ds.tiles)} tiles to {ds.root} (splits: {counts})")


@main.command()
@click.option("--dataset", "dataset_dir", type=click.Path(exists=True), required=True)
@click.option("--models-dir", type=click.Path(), default="models")
@click.option("--model-id", default=None)
@click.option("--epochs", type=int, default=20)
@click.option("--learning-rate", type=float, default=0.01)
@click.option("--batch-tiles", type=int, default=8)
@click.option("--seed", type=int, default=1234)
def train(dataset_dir, models_dir, model_id, epochs, learning_rate,
          batch_tiles, seed):
    """Train the builtin baseline on an exported dataset."""
    ds = dataset_mod.load_dataset(dataset_dir)
    hyper = models_mod.Hyperparams(epochs=epochs, learning_rate=learning_rate,
                                   batch_tiles=batch_tiles, seed=seed)

    def show(p, info=None):
        if info:
            click.echo(f"epoch {info['epoch']}: loss {info['loss']:.4f} "
                       f"val acc {info['val_accuracy']:.4f}")

    handle, model = models_mod.train(ds, hyper, progress=show, model_id=model_id)
    models_mod.save_model(models_dir, handle, model)
    click.echo(f"model {handle.id} saved (best val accuracy "
               f"{handle.val_accuracy:.4f})")


@main.command()
@click.option("--project", "project_path", type=click.Path(exists=True), required=True)
@click.option("--map", "map_id", required=True)
@click.option("--model", "model_id", required=True)
@click.option("--models-dir", type=click.Path(), default="models")
@click.option("--area", default=None, help="x,y,w,h (default: whole map)")
@click.option("--tile", type=int, default=1024)
@click.option("--stride", type=int, default=512)
@click.option("--out", "out_path", type=click.Path(), required=True,
              help="color-coded label map PNG")
@click.option("--commit/--no-commit", default=False,
              help="also append regions to the project file")
def infer(project_path, map_id, model_id, models_dir, area, tile, stride,
          out_path, commit):
    """Fully automatic segmentation with seamless tile blending."""
    state = _load_state(project_path)
    omap = state.open_map(map_id)
    _, model = models_mod.load_model(models_dir, model_id)
    config = inference_mod.InferenceConfig(tile_size=tile, stride=stride)
    with click.progressbar(length=100, label="inference") as bar:
        last = [0]

        def tick(p):
            step = int(p * 100) - last[0]
            if step > 0:
                bar.update(step)
                last[0] += step

        result = inference_mod.run_inference(omap, model,
                                             area=_parse_area(area),
                                             config=config, progress=tick)
    export_labelmap(result.labels, state.project.catalog, out_path)
    click.echo(f"wrote {out_path} ({len(result.regions)} regions, "
               f"{result.stats['tiles']} tiles)")
    if commit:
        inference_mod.commit_regions(state.project, map_id, result.regions)
        project_mod.save(state.project, project_path)
        click.echo(f"committed {len(result.regions)} regions to {project_path}")


@main.command()
@click.option("--dataset", "dataset_dir", type=click.Path(exists=True), required=True)
@click.option("--model", "model_id", required=True)
@click.option("--models-dir", type=click.Path(), default="models")
@click.option("--out-dir", type=click.Path(), default=None)
def evaluate(dataset_dir, model_id, models_dir, out_dir):
    """Confusion matrix, accuracy and mIoU over the test split."""
    ds = dataset_mod.load_dataset(dataset_dir)
    _, model = models_mod.load_model(models_dir, model_id)
    out = out_dir or str(Path(models_dir) / model_id)
    report = models_mod.evaluate(model, ds, out_dir=out)
    click.echo(f"accuracy {report.accuracy:.4f}  mIoU {report.miou:.4f}")
    for c, iou in enumerate(report.per_class_iou):
        if iou is not None:
            click.echo(f"  class {c} ({ds.catalog.name(c)}): IoU {iou:.4f}")
    click.echo(f"report written to {out}/report.json")


@main.command()
@click.option("--project", "project_path", type=click.Path(exists=True), required=True)
@click.option("--map-a", required=True)
@click.option("--map-b", required=True)
@click.option("--tau-iou", type=float, default=analysis_mod.DEFAULT_TAU_IOU)
@click.option("--grow-thresh", type=float, default=analysis_mod.DEFAULT_GROW_THRESH)
@click.option("--out", "out_path", type=click.Path(), required=True)
@click.option("--csv", "csv_path", type=click.Path(), default=None)
def changes(project_path, map_a, map_b, tau_iou, grow_thresh, out_path, csv_path):
    """Multi-temporal change detection between two co-registered maps."""
    state = _load_state(project_path)
    oa, ob = state.open_map(map_a), state.open_map(map_b)
    records = analysis_mod.detect_changes(
        state.project.map_regions(map_a), state.project.map_regions(map_b),
        oa, ob, tau_iou=tau_iou, grow_thresh=grow_thresh)
    analysis_mod.changes_to_json(records, out_path)
    if csv_path:
        analysis_mod.changes_to_csv(records, state.project.catalog, csv_path)
    by_status: dict[str, int] = {}
    for rec in records:
        by_status[rec.status] = by_status.get(rec.status, 0) + 1
    click.echo(f"{len(records)} records: {json.dumps(by_status, sort_keys=True)}")


if __name__ == "__main__":
    main()
