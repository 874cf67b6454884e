"""Segmentation metrics, zero-shot harness, Grad-CAM and report emission."""

from __future__ import annotations

import csv
import io
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence, Union

import numpy as np

from .data.dataset import Dataset, DatasetError, SplitDescriptor, load_dataset, resize_bilinear, split
from .tensor import Tape, Tensor, backward, mul
from .tensor import sum as tensor_sum

# --- per-mask metrics -----------------------------------------------------------


def confusion_counts(pred: np.ndarray, target: np.ndarray, class_id: int = 1):
    """``(tp, fp, fn)`` for one class of two hard label maps."""
    pred, target = np.asarray(pred), np.asarray(target)
    if pred.shape != target.shape:
        raise ValueError(f"prediction shape {pred.shape} != target shape {target.shape}")
    p = pred == class_id
    t = target == class_id
    tp = int(np.count_nonzero(p & t))
    return tp, int(np.count_nonzero(p)) - tp, int(np.count_nonzero(t)) - tp


def dice_metric(pred: np.ndarray, target: np.ndarray, class_id: int = 1) -> float:
    """``2|A n B| / (|A| + |B|)``; 1.0 when both masks are empty."""
    tp, fp, fn = confusion_counts(pred, target, class_id)
    denom = 2 * tp + fp + fn
    return 1.0 if denom == 0 else 2 * tp / denom


def iou_metric(pred: np.ndarray, target: np.ndarray, class_id: int = 1) -> float:
    tp, fp, fn = confusion_counts(pred, target, class_id)
    denom = tp + fp + fn
    return 1.0 if denom == 0 else tp / denom


@dataclass(frozen=True)
class ClassScores:
    dsc: float
    iou: float
    precision: float
    recall: float
    empty: bool  # absent from both prediction and target


def class_scores(pred: np.ndarray, target: np.ndarray, class_id: int) -> ClassScores:
    tp, fp, fn = confusion_counts(pred, target, class_id)
    if tp + fp + fn == 0:
        return ClassScores(1.0, 1.0, 1.0, 1.0, True)
    return ClassScores(
        dsc=2 * tp / (2 * tp + fp + fn),
        iou=tp / (tp + fp + fn),
        precision=tp / (tp + fp) if tp + fp else 0.0,
        recall=tp / (tp + fn) if tp + fn else 0.0,
        empty=False,
    )


def hard_labels(probs: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Threshold a single-channel map, or argmax over channels when K >= 2."""
    probs = np.asarray(probs)
    if probs.shape[-1] == 1:
        return (probs[..., 0] > threshold).astype(np.uint8)
    return np.argmax(probs, axis=-1).astype(np.uint8)


def foreground_classes(num_outputs: int) -> list:
    # background (0) excluded; binary maps score class 1
    return [1] if num_outputs == 1 else list(range(1, num_outputs))


@dataclass
class ReportRow:
    per_class: dict  # class id -> ClassScores
    mean_dsc: float
    empty_classes: list


def multiclass_report(pred: np.ndarray, target: np.ndarray, threshold: float = 0.5) -> ReportRow:
    """Per-class scores of one ``H x W x K`` prediction against an ``H x W`` label map."""
    labels = hard_labels(pred, threshold)
    per_class = {k: class_scores(labels, target, k) for k in foreground_classes(pred.shape[-1])}
    mean = float(np.mean([s.dsc for s in per_class.values()]))
    return ReportRow(per_class, mean, [k for k, s in per_class.items() if s.empty])


# --- dataset-level reports ------------------------------------------------------

METRICS = ("dsc", "iou", "precision", "recall")


@dataclass
class MetricsReport:
    dataset: str
    checkpoint: str
    sample_count: int
    per_class: dict  # class id -> {metric: mean over samples}
    mean: dict  # metric -> mean over classes of per_class
    empty_pairs: int  # (sample, class) pairs scored by the empty-empty convention
    per_sample_dsc: list = field(default_factory=list)
    wall_ms: float = 0.0

    @property
    def dsc(self) -> float:
        return self.mean["dsc"]

    def to_json(self) -> str:
        d = asdict(self)
        d["per_class"] = {str(k): v for k, v in self.per_class.items()}
        return json.dumps(d, sort_keys=True)


def aggregate(rows: Sequence[ReportRow], dataset: str = "", checkpoint: str = "",
              wall_ms: float = 0.0) -> MetricsReport:
    """Mean over samples per class, then mean over classes (class order fixed)."""
    if not rows:
        raise ValueError("cannot aggregate an empty set of samples")
    classes = sorted(rows[0].per_class)
    per_class = {
        k: {m: float(np.mean([getattr(r.per_class[k], m) for r in rows])) for m in METRICS}
        for k in classes
    }
    mean = {m: float(np.mean([per_class[k][m] for k in classes])) for m in METRICS}
    empty = sum(len(r.empty_classes) for r in rows)
    return MetricsReport(dataset, checkpoint, len(rows), per_class, mean, empty,
                         [r.mean_dsc for r in rows], wall_ms)


def evaluate_dataset(model, dataset: Dataset, threshold: float = 0.5, batch_size: int = 8,
                     checkpoint_id: str = "") -> MetricsReport:
    """Inference-mode metrics of ``model`` over every sample, in source-id order."""
    if len(dataset) == 0:
        raise DatasetError(f"dataset {dataset.name!r} is empty")
    if dataset.num_classes != model.cfg.num_classes:
        raise ValueError(
            f"model has {model.cfg.num_classes} classes but dataset {dataset.name!r} has {dataset.num_classes}"
        )
    start = time.perf_counter()
    samples = sorted(dataset.samples, key=lambda s: s.source_id)
    rows = []
    for i in range(0, len(samples), batch_size):
        chunk = samples[i:i + batch_size]
        probs = model.predict(np.stack([s.image for s in chunk]), batch_size=batch_size)
        rows.extend(multiclass_report(p, s.mask, threshold) for p, s in zip(probs, chunk))
    wall = (time.perf_counter() - start) * 1000
    return aggregate(rows, dataset.name, checkpoint_id, wall)


# --- zero-shot harness --------------------------------------------------------


class ClassCountMismatch(ValueError):
    pass


@dataclass
class XevalRow:
    train_data: str
    test_data: str
    method: str
    dsc: float


TABLE3_HEADER = ("train_data", "test_data", "method", "dsc")
TABLE1_HEADER = ("modality", "dataset", "image_size", "dsc")


def _corpus_name(path) -> str:
    return Path(path).resolve().name


def cross_dataset_eval(checkpoint, train_corpus, test_corpora: Iterable, method: str = "Ours",
                       threshold: float = 0.5, batch_size: int = 8):
    """Evaluate a frozen checkpoint on corpora it was not trained on.

    ``checkpoint`` is a checkpoint path or a loaded :class:`Checkpoint`. A test
    corpus equal to ``train_corpus`` is scored on its held-out test split.
    Returns ``(rows, reports)``. Raises if the weights change.
    """
    from .train import Checkpoint, load_checkpoint

    ckpt = checkpoint if isinstance(checkpoint, Checkpoint) else load_checkpoint(checkpoint)
    model = ckpt.model()
    size = model.cfg.input_size
    before = model.weight_hash()
    train_path = Path(train_corpus).resolve()
    rows, reports = [], []
    for corpus in test_corpora:
        corpus_path = Path(corpus).resolve()
        try:
            data = load_dataset(corpus_path, model.cfg.num_classes, size=size)
        except DatasetError as exc:
            if "is not a class id" in str(exc):
                raise ClassCountMismatch(
                    f"{corpus_path.name}: labels exceed the checkpoint's {model.cfg.num_classes}-class head ({exc})"
                ) from None
            raise
        if corpus_path == train_path:
            data = split(data, SplitDescriptor(seed=ckpt.train_cfg.get("split_seed", 0)))[2]
        report = evaluate_dataset(model, data, threshold, batch_size, checkpoint_id=ckpt.identity)
        reports.append(report)
        rows.append(XevalRow(_corpus_name(train_path), _corpus_name(corpus_path), method, report.dsc))
    if model.weight_hash() != before:
        raise RuntimeError("weights changed during zero-shot evaluation")
    return rows, reports


def _write_csv(header, rows, path=None) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text)
    return text


def _fmt(x: float) -> str:
    return repr(float(x))


def table3_csv(rows: Sequence[XevalRow], path=None) -> str:
    return _write_csv(TABLE3_HEADER, [(r.train_data, r.test_data, r.method, _fmt(r.dsc)) for r in rows], path)


def table1_csv(rows: Sequence[tuple], path=None) -> str:
    """Rows of ``(modality, dataset, (h, w), dsc)``."""
    return _write_csv(
        TABLE1_HEADER, [(m, d, f"{size[0]} x {size[1]}", _fmt(dsc)) for m, d, size, dsc in rows], path
    )


SCATTER_HEADER = ("model", "params_m", "dsc")


def emit_scatter(rows: Sequence[dict], path=None) -> str:
    """Parameter-count vs DSC CSV, sorted by parameters ascending."""
    for r in rows:
        if not r["params_millions"] > 0:
            raise ValueError(f"{r['model_name']}: parameter count must be positive")
        if not 0 <= r["dsc"] <= 1:
            raise ValueError(f"{r['model_name']}: dsc {r['dsc']} outside [0, 1]")
    ordered = sorted(rows, key=lambda r: r["params_millions"])
    return _write_csv(
        SCATTER_HEADER, [(r["model_name"], _fmt(r["params_millions"]), _fmt(r["dsc"])) for r in ordered], path
    )


def parse_scatter(text: str) -> list:
    reader = csv.reader(io.StringIO(text))
    header = next(reader)
    if tuple(header) != SCATTER_HEADER:
        raise ValueError(f"unexpected scatter header {header}")
    return [{"model_name": m, "params_millions": float(p), "dsc": float(d)} for m, p, d in reader]


# --- Grad-CAM ---------------------------------------------------------------------


def grad_cam(model, image: np.ndarray, target: Union[str, int] = "foreground",
             layer: str = "enc4") -> np.ndarray:
    """Saliency map ``H x W`` in [0, 1] for one image.

    Channel weights are the spatial mean of d(score)/d(activation) at
    ``layer``; the map is ``relu(sum_c w_c A_c)``, resized to the input and
    min-max normalized. ``target`` is a class index or ``"foreground"``
    (sum of all foreground logits over pixels).
    """
    image = np.asarray(image)
    x = Tensor(image[None] if image.ndim == 3 else image, requires_grad=True)
    with Tape() as tape:
        out = model.forward(x)
        if layer not in out.taps:
            raise KeyError(f"unknown layer {layer!r}; available: {sorted(out.taps)}")
        activ = out.taps[layer]
        logits = out.logits
        k = logits.shape[-1]
        if target == "foreground":
            channels = [0] if k == 1 else list(range(1, k))
        else:
            if not 0 <= int(target) < max(k, 2):
                raise ValueError(f"class {target} outside the model's {k} outputs")
            channels = [0] if k == 1 else [int(target)]
        selector = np.zeros((1, 1, 1, k), dtype=logits.dtype)
        selector[..., channels] = 1
        score = tensor_sum(mul(logits, Tensor(np.broadcast_to(selector, logits.shape).copy())))
    grads = backward(tape, score, keep=[activ], retain_all=False)
    g = grads[activ][0]
    a = activ.data[0]
    weights = g.mean(axis=(0, 1))
    cam = np.maximum((a * weights).sum(axis=-1), 0).astype(np.float64)
    cam = resize_bilinear(cam, x.shape[1:3])
    lo, hi = cam.min(), cam.max()
    if hi <= 0:
        return np.zeros_like(cam)
    if hi - lo <= 1e-12 * hi:
        return np.ones_like(cam)
    return (cam - lo) / (hi - lo)
