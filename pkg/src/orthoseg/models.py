"""Model runtime: builtin per-pixel baseline, training, and evaluation metrics.

The builtin model is multinomial logistic regression over 9 per-pixel
features (RGB plus 5x5 local mean and standard deviation per channel). It
exists so the whole pipeline runs end to end with no learned-weights
dependency; heavier models plug in through the external HTTP backend
protocol (docs/backend-protocol.md).

Model store layout: models/{id}/model.json + weights.bin; evaluation writes
report.json and predicted label tiles for the paired browser.
"""

from __future__ import annotations

import datetime as _dt
import json
import uuid
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .dataset import TileDataset, TileRecord
from .errors import OperationCancelled
from .raster import ClassCatalog, LabelRaster, export_labelmap

__all__ = [
    "Hyperparams",
    "ModelHandle",
    "EvalReport",
    "BaselineModel",
    "TrainingError",
    "train",
    "predict_tile",
    "evaluate",
    "confusion_matrix",
    "metrics_from_confusion",
    "save_model",
    "load_model",
    "list_models",
]

FEATURE_COUNT = 9
PIXELS_PER_TILE = 20000  # per gradient step; keeps batches bounded
LOCAL_WINDOW = 5


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class Hyperparams:
    epochs: int = 20
    learning_rate: float = 0.01
    batch_tiles: int = 8
    seed: int = 1234

    def __post_init__(self):
        if min(self.epochs, self.batch_tiles, self.seed) <= 0 or self.learning_rate <= 0:
            raise ValueError("hyperparameters must be positive")

    def to_json(self) -> dict:
        return {"epochs": self.epochs, "learning_rate": self.learning_rate,
                "batch_tiles": self.batch_tiles, "seed": self.seed}


@dataclass
class ModelHandle:
    id: str
    backend: str  # "builtin-baseline" | "external"
    classes: list[int]  # catalog indices the model predicts (never 0)
    class_names: list[str]
    dataset_root: str
    hyperparams: dict
    seed: int
    created: str
    trained: str = ""
    val_accuracy: float = 0.0

    def to_json(self) -> dict:
        return dict(self.__dict__)

    @classmethod
    def from_json(cls, d: dict) -> "ModelHandle":
        return cls(**d)


def tile_features(rgb: np.ndarray) -> np.ndarray:
    """(h, w, 9) float32: RGB, 5x5 local mean, 5x5 local std per channel."""
    x = rgb.astype(np.float32) / 255.0
    feats = [x]
    mean = np.empty_like(x)
    sq = np.empty_like(x)
    for c in range(3):
        mean[..., c] = ndimage.uniform_filter(x[..., c], size=LOCAL_WINDOW,
                                              mode="nearest")
        sq[..., c] = ndimage.uniform_filter(x[..., c] ** 2, size=LOCAL_WINDOW,
                                            mode="nearest")
    std = np.sqrt(np.maximum(sq - mean ** 2, 0.0))
    feats.extend([mean, std])
    return np.concatenate(feats, axis=-1)


@dataclass
class BaselineModel:
    classes: list[int]
    weights: np.ndarray  # (FEATURE_COUNT + 1, K) float64
    feat_mean: np.ndarray
    feat_std: np.ndarray

    def predict(self, rgb_tile: np.ndarray) -> np.ndarray:
        """Per-pixel class probabilities, channels ordered like self.classes."""
        f = tile_features(rgb_tile)
        z = (f - self.feat_mean) / self.feat_std
        logits = z @ self.weights[:-1] + self.weights[-1]
        logits -= logits.max(axis=-1, keepdims=True)
        e = np.exp(logits, dtype=np.float32)
        return e / e.sum(axis=-1, keepdims=True)

    def predict_labels(self, rgb_tile: np.ndarray) -> np.ndarray:
        probs = self.predict(rgb_tile)
        cls = np.asarray(self.classes, dtype=np.uint16)
        return cls[np.argmax(probs, axis=-1)]


def predict_tile(model: BaselineModel, rgb_tile: np.ndarray) -> np.ndarray:
    if rgb_tile.ndim != 3 or rgb_tile.shape[2] != 3:
        raise ValueError("tile must be (h, w, 3) RGB")
    return model.predict(rgb_tile)


# ---------------------------------------------------------------------------
# training


def train(dataset: TileDataset, hyper: Hyperparams | None = None,
          progress=None, should_cancel=None,
          model_id: str | None = None) -> tuple[ModelHandle, BaselineModel]:
    """Fit the builtin baseline; best-val-accuracy weights are kept."""
    hyper = hyper or Hyperparams()
    train_tiles = dataset.split_tiles("train")
    val_tiles = dataset.split_tiles("val")
    if not train_tiles:
        raise TrainingError("dataset has an empty train split")
    if not val_tiles:
        raise TrainingError("dataset has an empty val split")

    classes = list(range(1, len(dataset.catalog)))
    if not classes:
        raise TrainingError("catalog has no classes beyond 'unlabeled'")
    k = len(classes)
    class_pos = np.full(len(dataset.catalog), -1, dtype=np.int64)
    for i, c in enumerate(classes):
        class_pos[c] = i

    rng = np.random.default_rng(hyper.seed)

    # feature standardization from a deterministic sample of train pixels
    sample_feats = []
    for rec in train_tiles:
        f, y = _labeled_pixels(dataset, rec, rng, cap=4000)
        if len(y):
            sample_feats.append(f)
    if not sample_feats:
        raise TrainingError("train split contains no labeled pixels")
    sample = np.concatenate(sample_feats)
    feat_mean = sample.mean(axis=0)
    feat_std = sample.std(axis=0)
    feat_std[feat_std < 1e-6] = 1.0

    weights = np.zeros((FEATURE_COUNT + 1, k), dtype=np.float64)
    best = (None, -1.0)

    n_batches = max(1, -(-len(train_tiles) // hyper.batch_tiles))
    for epoch in range(hyper.epochs):
        if should_cancel and should_cancel():
            raise OperationCancelled("training cancelled")
        order = rng.permutation(len(train_tiles))
        epoch_loss = 0.0
        seen = 0
        for b in range(n_batches):
            batch = [train_tiles[int(i)] for i in
                     order[b * hyper.batch_tiles:(b + 1) * hyper.batch_tiles]]
            xs, ys = [], []
            for rec in batch:
                f, y = _labeled_pixels(dataset, rec, rng, cap=PIXELS_PER_TILE)
                if len(y):
                    xs.append(f)
                    ys.append(y)
            if not xs:
                continue
            x = (np.concatenate(xs) - feat_mean) / feat_std
            y = class_pos[np.concatenate(ys)]
            logits = x @ weights[:-1] + weights[-1]
            logits -= logits.max(axis=1, keepdims=True)
            e = np.exp(logits)
            probs = e / e.sum(axis=1, keepdims=True)
            n = len(y)
            loss = -float(np.log(probs[np.arange(n), y] + 1e-12).mean())
            if not np.isfinite(loss):
                raise TrainingError(f"training diverged at epoch {epoch + 1}")
            epoch_loss += loss * n
            seen += n
            grad_logits = probs
            grad_logits[np.arange(n), y] -= 1.0
            grad_logits /= n
            weights[:-1] -= hyper.learning_rate * (x.T @ grad_logits)
            weights[-1] -= hyper.learning_rate * grad_logits.sum(axis=0)

        val_acc = _split_accuracy(dataset, val_tiles, weights, feat_mean,
                                  feat_std, classes)
        if val_acc > best[1]:
            best = (weights.copy(), val_acc)
        if progress:
            progress((epoch + 1) / hyper.epochs,
                     {"epoch": epoch + 1,
                      "loss": epoch_loss / max(seen, 1),
                      "val_accuracy": val_acc})

    weights, val_acc = best
    model = BaselineModel(classes=classes, weights=weights,
                          feat_mean=feat_mean, feat_std=feat_std)
    handle = ModelHandle(
        id=model_id or uuid.uuid4().hex[:12],
        backend="builtin-baseline",
        classes=classes,
        class_names=[dataset.catalog.name(c) for c in classes],
        dataset_root=str(dataset.root),
        hyperparams=hyper.to_json(),
        seed=hyper.seed,
        created=_dt.datetime.now().isoformat(timespec="seconds"),
        trained=_dt.datetime.now().isoformat(timespec="seconds"),
        val_accuracy=float(val_acc),
    )
    return handle, model


def _labeled_pixels(dataset: TileDataset, rec: TileRecord, rng,
                    cap: int) -> tuple[np.ndarray, np.ndarray]:
    rgb = dataset.image(rec)
    labels = dataset.labels(rec)
    feats = tile_features(rgb)
    ys, xs = np.nonzero(labels)
    if len(ys) == 0:
        return np.zeros((0, FEATURE_COUNT), np.float32), np.zeros(0, np.int64)
    if len(ys) > cap:
        pick = rng.choice(len(ys), size=cap, replace=False)
        ys, xs = ys[pick], xs[pick]
    return feats[ys, xs], labels[ys, xs].astype(np.int64)


def _split_accuracy(dataset, tiles, weights, feat_mean, feat_std, classes) -> float:
    model = BaselineModel(classes=classes, weights=weights,
                          feat_mean=feat_mean, feat_std=feat_std)
    correct = 0
    total = 0
    for rec in tiles:
        labels = dataset.labels(rec)
        sel = labels > 0
        if not sel.any():
            continue
        pred = model.predict_labels(dataset.image(rec))
        correct += int((pred[sel] == labels[sel]).sum())
        total += int(sel.sum())
    return correct / total if total else 0.0


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvalReport:
    confusion: np.ndarray  # (K, K) int64 over catalog indices; row = GT
    per_class_iou: list  # aligned to catalog indices; None where undefined
    miou: float
    accuracy: float
    paired_tiles: list = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "confusion": self.confusion.tolist(),
            "per_class_iou": self.per_class_iou,
            "miou": self.miou,
            "accuracy": self.accuracy,
            "paired_tiles": self.paired_tiles,
        }

    @classmethod
    def from_json(cls, d: dict) -> "EvalReport":
        return cls(confusion=np.asarray(d["confusion"], dtype=np.int64),
                   per_class_iou=d["per_class_iou"], miou=d["miou"],
                   accuracy=d["accuracy"], paired_tiles=d["paired_tiles"])


def confusion_matrix(gt: np.ndarray, pred: np.ndarray, k: int) -> np.ndarray:
    """Count matrix with GT index 0 excluded; rows GT, cols prediction."""
    sel = gt > 0
    g = gt[sel].astype(np.int64)
    p = pred[sel].astype(np.int64)
    return np.bincount(g * k + p, minlength=k * k).reshape(k, k)


def metrics_from_confusion(confusion: np.ndarray) -> tuple[list, float, float]:
    k = confusion.shape[0]
    total = confusion.sum()
    accuracy = float(np.trace(confusion) / total) if total else 0.0
    per_class = [None] * k
    present = []
    for c in range(1, k):
        row = confusion[c].sum()
        col = confusion[:, c].sum()
        if row == 0:  # class absent from GT: excluded
            continue
        denom = row + col - confusion[c, c]
        iou = float(confusion[c, c] / denom) if denom else None
        per_class[c] = iou
        if iou is not None:
            present.append(iou)
    miou = float(np.mean(present)) if present else 0.0
    return per_class, miou, accuracy


def evaluate(model: BaselineModel, dataset: TileDataset, out_dir=None,
             split: str = "test", progress=None) -> EvalReport:
    """Accumulate the confusion matrix over a split; emit paired tile triples."""
    tiles = dataset.split_tiles(split)
    if not tiles:
        raise TrainingError(f"dataset has an empty {split} split")
    k = len(dataset.catalog)
    confusion = np.zeros((k, k), dtype=np.int64)
    paired = []
    pred_dir = Path(out_dir) / "pred" if out_dir else None
    if pred_dir:
        pred_dir.mkdir(parents=True, exist_ok=True)
    for i, rec in enumerate(sorted(tiles, key=lambda t: t.origin)):
        gt = dataset.labels(rec)
        pred = model.predict_labels(dataset.image(rec))
        confusion += confusion_matrix(gt, pred, k)
        entry = {"image": str(dataset.root / rec.image_path),
                 "gt": str(dataset.root / rec.label_path)}
        if pred_dir:
            pred_path = pred_dir / f"{rec.origin[0]}_{rec.origin[1]}.png"
            export_labelmap(LabelRaster(origin=rec.origin, labels=pred),
                            dataset.catalog, pred_path)
            entry["pred"] = str(pred_path)
        paired.append(entry)
        if progress:
            progress((i + 1) / len(tiles))
    per_class, miou, accuracy = metrics_from_confusion(confusion)
    report = EvalReport(confusion=confusion, per_class_iou=per_class,
                        miou=miou, accuracy=accuracy, paired_tiles=paired)
    if out_dir:
        (Path(out_dir) / "report.json").write_text(
            json.dumps(report.to_json(), sort_keys=True, indent=1) + "\n")
    return report


# ---------------------------------------------------------------------------
# model store


def save_model(store_dir, handle: ModelHandle, model: BaselineModel) -> Path:
    mdir = Path(store_dir) / handle.id
    mdir.mkdir(parents=True, exist_ok=True)
    meta = handle.to_json()
    meta["feat_mean"] = model.feat_mean.tolist()
    meta["feat_std"] = model.feat_std.tolist()
    (mdir / "model.json").write_text(json.dumps(meta, sort_keys=True, indent=1))
    with open(mdir / "weights.bin", "wb") as f:
        np.save(f, model.weights)
    return mdir


def load_model(store_dir, model_id: str) -> tuple[ModelHandle, BaselineModel]:
    mdir = Path(store_dir) / model_id
    if not (mdir / "model.json").exists():
        raise FileNotFoundError(f"no model {model_id!r} in {store_dir}")
    meta = json.loads((mdir / "model.json").read_text())
    feat_mean = np.asarray(meta.pop("feat_mean"))
    feat_std = np.asarray(meta.pop("feat_std"))
    handle = ModelHandle.from_json(meta)
    with open(mdir / "weights.bin", "rb") as f:
        weights = np.load(f)
    model = BaselineModel(classes=handle.classes, weights=weights,
                          feat_mean=feat_mean, feat_std=feat_std)
    return handle, model


def list_models(store_dir) -> list[ModelHandle]:
    store = Path(store_dir)
    out = []
    if not store.exists():
        return out
    for mdir in sorted(store.iterdir()):
        if (mdir / "model.json").exists():
            meta = json.loads((mdir / "model.json").read_text())
            meta.pop("feat_mean", None)
            meta.pop("feat_std", None)
            out.append(ModelHandle.from_json(meta))
    return out
