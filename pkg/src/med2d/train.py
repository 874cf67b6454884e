"""Losses, Adam, augmentation, the training loop and checkpoints.

Randomness is always derived from the run seed, never carried as state:

* epoch shuffle:        ``default_rng(seed + epoch)``
* augmentation of a sample: ``default_rng([seed, epoch, sample_index])``
* dropout of a step:    ``default_rng([seed, epoch, batch_index, 1])``

so a run resumed from an epoch-boundary checkpoint replays the rest of the
uninterrupted run exactly.
"""

from __future__ import annotations

import json
import math
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Optional

import numpy as np

from .arch import Model, ModelConfig, ModelOutput
from .data.container import read_container, write_container
from .data.dataset import Dataset, DatasetError, SplitDescriptor, split
from .evaluate import aggregate, multiclass_report
from .tensor import Tape, Tensor, add, backward, record

# --- losses ---------------------------------------------------------------------


def _as_batch(a: np.ndarray) -> np.ndarray:
    return a[None] if a.ndim == 3 else a


def _debug_enabled() -> bool:
    return os.environ.get("MED2D_DEBUG", "") not in ("", "0")


def _check_pair(pred: Tensor, target: np.ndarray):
    if pred.shape != target.shape:
        raise ValueError(f"prediction shape {pred.shape} != target shape {target.shape}")


def dice_terms(p: np.ndarray, t: np.ndarray, smooth: float):
    """Per (sample, class) soft Dice loss of ``N x H x W x K`` arrays."""
    p64, t64 = _as_batch(p).astype(np.float64), _as_batch(t).astype(np.float64)
    inter = (p64 * t64).sum(axis=(1, 2))
    denom = p64.sum(axis=(1, 2)) + t64.sum(axis=(1, 2)) + smooth
    return 1.0 - (2 * inter + smooth) / denom, inter, denom


def dice_loss(pred: Tensor, target: np.ndarray, smooth: float = 1.0, validate: Optional[bool] = None) -> Tensor:
    """``1 - (2 sum(p t) + s) / (sum(p) + sum(t) + s)`` averaged over samples and classes."""
    target = np.asarray(target)
    _check_pair(pred, target)
    if not smooth > 0:
        raise ValueError(f"smooth must be > 0, got {smooth}")
    if validate if validate is not None else _debug_enabled():
        if pred.data.min() < 0 or pred.data.max() > 1:
            raise ValueError("dice_loss predictions must lie in [0, 1]")
    terms, inter, denom = dice_terms(pred.data, target, smooth)
    count = terms.size
    t64 = _as_batch(target).astype(np.float64)

    def bwd(g):
        # d/dp of -(2I + s)/D, with dI/dp = t and dD/dp = 1
        coef = (2 * inter + smooth) / denom ** 2
        grad = -(2 * t64 / denom[:, None, None, :] - coef[:, None, None, :]) / count
        return (np.reshape(g * grad, pred.shape).astype(pred.dtype),)

    return record(np.asarray(terms.mean(), dtype=pred.dtype), (pred,), bwd)


def _log_sigmoid_terms(z: np.ndarray, t: np.ndarray) -> np.ndarray:
    # stable max(z, 0) - z t + log(1 + exp(-|z|))
    return np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))


def bce_with_logits(logits: Tensor, target: np.ndarray) -> Tensor:
    """Mean binary cross-entropy of ``sigmoid(logits)`` against ``target``."""
    target = np.asarray(target)
    _check_pair(logits, target)
    z = logits.data.astype(np.float64)
    t = target.astype(np.float64)
    value = _log_sigmoid_terms(z, t).mean()
    n = z.size

    def bwd(g):
        return ((g * (0.5 * np.tanh(0.5 * z) + 0.5 - t) / n).astype(logits.dtype),)

    return record(np.asarray(value, dtype=logits.dtype), (logits,), bwd)


def _log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def ce_with_logits(logits: Tensor, target: np.ndarray) -> Tensor:
    """Mean over pixels of ``-sum_k t_k log softmax(z)_k`` (channel axis last)."""
    target = np.asarray(target)
    _check_pair(logits, target)
    if logits.shape[-1] < 2:
        raise ValueError("cross-entropy needs at least 2 channels; use bce for binary heads")
    z = logits.data.astype(np.float64)
    t = target.astype(np.float64)
    logp = _log_softmax(z)
    n = z.size // z.shape[-1]
    value = -(t * logp).sum() / n

    def bwd(g):
        return ((g * (np.exp(logp) * t.sum(axis=-1, keepdims=True) - t) / n).astype(logits.dtype),)

    return record(np.asarray(value, dtype=logits.dtype), (logits,), bwd)


LOSS_NAMES = ("dice", "bce", "dice_plus_bce", "ce", "dice_plus_ce")


def default_loss(num_classes: int) -> str:
    return "dice_plus_bce" if num_classes == 1 else "dice_plus_ce"


def check_loss(name: str, num_classes: int) -> str:
    if name not in LOSS_NAMES:
        raise ValueError(f"unknown loss {name!r}; expected one of {LOSS_NAMES}")
    if num_classes == 1 and name in ("ce", "dice_plus_ce"):
        raise ValueError(f"loss {name!r} needs a multiclass head")
    if num_classes > 1 and name in ("bce", "dice_plus_bce"):
        raise ValueError(f"loss {name!r} needs a single-channel binary head")
    return name


def compute_loss(name: str, out: ModelOutput, target: np.ndarray) -> Tensor:
    parts = []
    if "dice" in name:
        parts.append(dice_loss(out.probs, target))
    if name.endswith("bce"):
        parts.append(bce_with_logits(out.logits, target))
    elif name.endswith("ce"):
        parts.append(ce_with_logits(out.logits, target))
    return parts[0] if len(parts) == 1 else add(parts[0], parts[1])


def per_sample_loss(name: str, probs: np.ndarray, logits: np.ndarray, target: np.ndarray) -> np.ndarray:
    """The value of :func:`compute_loss` for each sample alone, in float64."""
    total = np.zeros(len(probs))
    if "dice" in name:
        total += dice_terms(probs, target, 1.0)[0].mean(axis=1)
    z = logits.astype(np.float64)
    t = target.astype(np.float64)
    if name.endswith("bce"):
        total += _log_sigmoid_terms(z, t).mean(axis=(1, 2, 3))
    elif name.endswith("ce"):
        total += -(t * _log_softmax(z)).sum(axis=-1).mean(axis=(1, 2))
    return total


def encode_targets(masks: np.ndarray, num_classes: int, dtype=np.float32) -> np.ndarray:
    """``N x H x W`` class ids to ``N x H x W x K`` targets (K = 1 for binary)."""
    masks = np.asarray(masks)
    if num_classes == 1:
        return (masks == 1).astype(dtype)[..., None]
    return (masks[..., None] == np.arange(num_classes)).astype(dtype)


# --- Adam -----------------------------------------------------------------------


class NonFiniteGradient(FloatingPointError):
    pass


class DivergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class AdamConfig:
    learning_rate: float = 0.0175
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0

    @classmethod
    def zeros_like(cls, weights: dict) -> "AdamState":
        return cls({k: np.zeros_like(w) for k, w in weights.items()},
                   {k: np.zeros_like(w) for k, w in weights.items()}, 0)


def adam_step(weights: dict, grads: dict, state: AdamState, cfg: AdamConfig):
    """One bias-corrected Adam update; returns ``(new_weights, new_state)``.

    Inputs are not modified. Non-finite gradients raise before anything changes.
    """
    if set(weights) != set(grads) or set(weights) != set(state.m):
        raise ValueError("weights, gradients and moments must share the same names")
    bad = [k for k, g in grads.items() if not np.all(np.isfinite(g))]
    if bad:
        raise NonFiniteGradient(f"non-finite gradient in {len(bad)} tensor(s), first: {bad[0]}")
    t = state.step + 1
    c1 = 1 - cfg.beta1 ** t
    c2 = 1 - cfg.beta2 ** t
    new_w, new_m, new_v = {}, {}, {}
    for k, w in weights.items():
        g = grads[k]
        if g.shape != w.shape or state.m[k].shape != w.shape:
            raise ValueError(f"{k}: weight {w.shape}, gradient {g.shape}, moment {state.m[k].shape}")
        dt = w.dtype
        m = (cfg.beta1 * state.m[k] + (1 - cfg.beta1) * g).astype(dt)
        v = (cfg.beta2 * state.v[k] + (1 - cfg.beta2) * g * g).astype(dt)
        step = cfg.learning_rate * (m / c1) / (np.sqrt(v / c2) + cfg.eps)
        new_w[k] = (w - step).astype(dt)
        new_m[k], new_v[k] = m, v
    return new_w, AdamState(new_m, new_v, t)


def clip_by_global_norm(grads: dict, max_norm: float) -> dict:
    if max_norm <= 0:
        return grads
    total = math.sqrt(math.fsum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))
    if total <= max_norm:
        return grads
    scale = max_norm / total
    return {k: (g * scale).astype(g.dtype) for k, g in grads.items()}


# --- augmentation ---------------------------------------------------------------

AUGMENT_FLAGS = ("hflip", "vflip", "rot90")


def apply_transform(image: np.ndarray, mask: np.ndarray, hflip=False, vflip=False, quarter_turns=0):
    """Apply flips then ``quarter_turns`` counter-clockwise rotations to both arrays."""
    if image.shape[:2] != mask.shape[:2]:
        raise ValueError(f"image {image.shape[:2]} and mask {mask.shape[:2]} are not aligned")
    if hflip:
        image, mask = image[:, ::-1], mask[:, ::-1]
    if vflip:
        image, mask = image[::-1], mask[::-1]
    if quarter_turns % 4:
        image = np.rot90(image, quarter_turns, axes=(0, 1))
        mask = np.rot90(mask, quarter_turns, axes=(0, 1))
    return np.ascontiguousarray(image), np.ascontiguousarray(mask)


def augment(image: np.ndarray, mask: np.ndarray, flags: Iterable[str], rng: np.random.Generator):
    """Random flips / right-angle rotation from ``flags``; the same draw for image and mask."""
    flags = set(flags)
    unknown = flags - set(AUGMENT_FLAGS)
    if unknown:
        raise ValueError(f"unknown augmentation flags {sorted(unknown)}")
    # always draw all three so the stream does not depend on which flags are set
    h, v, k = rng.random(), rng.random(), int(rng.integers(4))
    square = image.shape[0] == image.shape[1]
    turns = (k if square else 2 * (k % 2)) if "rot90" in flags else 0
    return apply_transform(image, mask, "hflip" in flags and h < 0.5, "vflip" in flags and v < 0.5, turns)


# --- configuration --------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 8
    learning_rate: float = 0.0175
    epochs: int = 100
    dropout_rate: float = 0.5
    loss: Optional[str] = None  # None: dice_plus_bce (binary) / dice_plus_ce (multiclass)
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    augment: tuple = AUGMENT_FLAGS
    grad_clip: float = 0.0
    eval_every: int = 1
    stop_train_dsc: Optional[float] = None
    stop_val_dsc: Optional[float] = None
    split_seed: int = 0
    threshold: float = 0.5
    record_wall_time: bool = True

    def __post_init__(self):
        object.__setattr__(self, "augment", tuple(self.augment))
        if not self.learning_rate >= 0:
            raise ValueError(f"learning rate must be >= 0, got {self.learning_rate}")
        if not 0 <= self.dropout_rate < 1:
            raise ValueError(f"dropout rate must be in [0, 1), got {self.dropout_rate}")
        if self.batch_size < 1 or self.epochs < 0 or self.eval_every < 1:
            raise ValueError("batch_size and eval_every must be >= 1 and epochs >= 0")
        if self.loss is not None and self.loss not in LOSS_NAMES:
            raise ValueError(f"unknown loss {self.loss!r}; expected one of {LOSS_NAMES}")
        bad = set(self.augment) - set(AUGMENT_FLAGS)
        if bad:
            raise ValueError(f"unknown augmentation flags {sorted(bad)}")

    @property
    def adam(self) -> AdamConfig:
        return AdamConfig(self.learning_rate, self.beta1, self.beta2, self.adam_eps)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["augment"] = list(self.augment)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


# --- checkpoints ----------------------------------------------------------------


class CheckpointError(ValueError):
    pass


CHECKPOINT_FORMAT = "med2d-checkpoint"


@dataclass
class Checkpoint:
    params: dict
    model_cfg: dict
    train_cfg: dict = field(default_factory=dict)
    moments: Optional[AdamState] = None
    epoch: int = 0
    best_val: float = -1.0
    best_epoch: int = 0

    @property
    def step(self) -> int:
        return self.moments.step if self.moments is not None else 0

    def model(self) -> Model:
        return Model(ModelConfig.from_dict(self.model_cfg), {k: v.copy() for k, v in self.params.items()})

    @property
    def identity(self) -> str:
        return self.model().weight_hash()[:16]

    def to_tensors(self) -> dict:
        meta = {
            "format": CHECKPOINT_FORMAT, "epoch": self.epoch, "step": self.step,
            "best_val": self.best_val, "best_epoch": self.best_epoch,
            "model_cfg": self.model_cfg, "train_cfg": self.train_cfg,
        }
        raw = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
        out = {"meta/config": raw.astype(np.float32)}
        for k, v in self.params.items():
            out[f"param/{k}"] = v
        if self.moments is not None:
            for k in self.params:
                out[f"adam_m/{k}"] = self.moments.m[k]
                out[f"adam_v/{k}"] = self.moments.v[k]
        return out

    @classmethod
    def from_tensors(cls, tensors: dict) -> "Checkpoint":
        if "meta/config" not in tensors:
            raise CheckpointError("container has no meta/config tensor; not a checkpoint")
        try:
            meta = json.loads(tensors["meta/config"].astype(np.uint8).tobytes().decode())
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"unreadable checkpoint metadata: {exc}") from None
        if meta.get("format") != CHECKPOINT_FORMAT:
            raise CheckpointError(f"unexpected checkpoint format {meta.get('format')!r}")
        params = {k[6:]: v for k, v in tensors.items() if k.startswith("param/")}
        moments = None
        if any(k.startswith("adam_m/") for k in tensors):
            moments = AdamState({k: tensors[f"adam_m/{k}"] for k in params},
                                {k: tensors[f"adam_v/{k}"] for k in params}, meta["step"])
        return cls(params, meta["model_cfg"], meta["train_cfg"], moments, meta["epoch"],
                   meta["best_val"], meta["best_epoch"])


def save_checkpoint(path, ckpt: Checkpoint) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    write_container(path, ckpt.to_tensors())
    return path


def load_checkpoint(path) -> Checkpoint:
    return Checkpoint.from_tensors(read_container(path))


# --- metric sink ------------------------------------------------------------------


class JsonlSink:
    """Append metric records to a newline-delimited JSON file."""

    def __init__(self, path, truncate_after_epoch: Optional[int] = None):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        if truncate_after_epoch is not None and self.path.exists():
            keep = [ln for ln in self.path.read_text().splitlines()
                    if ln and json.loads(ln)["epoch"] <= truncate_after_epoch]
            self.path.write_text("".join(ln + "\n" for ln in keep))
        elif truncate_after_epoch is None:
            self.path.write_text("")

    def __call__(self, rec: dict):
        with self.path.open("a") as fh:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_metrics(path) -> list:
    return [json.loads(ln) for ln in Path(path).read_text().splitlines() if ln]


# --- training loop ----------------------------------------------------------------


@dataclass
class TrainResult:
    best: Checkpoint
    last: Checkpoint
    history: list
    stop_reason: str


def _inference_scores(model: Model, data: Dataset, loss: str, batch_size: int, threshold: float):
    """(mean loss, aggregate DSC) of ``model`` on ``data`` in inference mode."""
    losses, rows = [], []
    for i in range(0, len(data), batch_size):
        chunk = data.samples[i:i + batch_size]
        out = model.forward(np.stack([s.image for s in chunk]).astype(model.dtype))
        masks = np.stack([s.mask for s in chunk])
        target = encode_targets(masks, model.cfg.num_classes)
        losses.extend(per_sample_loss(loss, out.probs.data, out.logits.data, target))
        rows.extend(multiclass_report(p, m, threshold) for p, m in zip(out.probs.data, masks))
    return math.fsum(losses) / len(losses), aggregate(rows).dsc


def _batch(samples, indices, cfg: TrainConfig, epoch: int, dtype):
    images, masks = [], []
    for idx in indices:
        s = samples[idx]
        if cfg.augment:
            img, msk = augment(s.image, s.mask, cfg.augment, np.random.default_rng([cfg.seed, epoch, int(idx)]))
        else:
            img, msk = s.image, s.mask
        images.append(img)
        masks.append(msk)
    return np.stack(images).astype(dtype), np.stack(masks)


def train(model: Model, dataset: Dataset, cfg: TrainConfig, sink: Optional[Callable[[dict], None]] = None,
          resume: Optional[Checkpoint] = None, resume_best: Optional[Checkpoint] = None,
          checkpoint_dir=None) -> TrainResult:
    """Train ``model`` on the train split of ``dataset``.

    Emits one ``train`` and one ``val`` record per epoch to ``sink``. The
    model's parameters are updated in place. With ``checkpoint_dir``, best and
    last checkpoints are written as ``best.m2sn`` / ``last.m2sn`` after every
    epoch.
    """
    num_classes = model.cfg.num_classes
    if dataset.num_classes != num_classes:
        raise DatasetError(f"dataset has {dataset.num_classes} classes, model has {num_classes}")
    loss_name = check_loss(cfg.loss or default_loss(num_classes), num_classes)
    train_set, val_set, _ = split(dataset, SplitDescriptor(seed=cfg.split_seed))
    if len(train_set) == 0 or len(val_set) == 0:
        raise DatasetError(
            f"empty split: {len(train_set)} train / {len(val_set)} val samples from {len(dataset)}"
        )
    emit = sink or (lambda rec: None)
    params = {k: np.ascontiguousarray(v) for k, v in model.params.items()}
    state = AdamState.zeros_like(params)
    start_epoch, best_val, best_epoch = 1, -1.0, 0
    best = None
    if resume is not None:
        if set(resume.params) != set(params):
            raise CheckpointError("checkpoint parameters do not match the model")
        params = {k: resume.params[k].copy() for k in params}
        state = resume.moments or state
        start_epoch, best_val, best_epoch = resume.epoch + 1, resume.best_val, resume.best_epoch
        best = resume_best
    model_cfg, train_cfg = model.cfg.to_dict(), cfg.to_dict()

    def snapshot(epoch):
        return Checkpoint({k: v.copy() for k, v in params.items()}, model_cfg, train_cfg,
                          AdamState(dict(state.m), dict(state.v), state.step), epoch, best_val, best_epoch)

    history, stop_reason = [], "epochs"
    last = snapshot(start_epoch - 1)
    if best is None:
        best = last
    n = len(train_set)
    for epoch in range(start_epoch, cfg.epochs + 1):
        t0 = time.perf_counter()
        order = np.random.default_rng(cfg.seed + epoch).permutation(n)
        sample_losses = {}
        for b, i in enumerate(range(0, n, cfg.batch_size)):
            idx = order[i:i + cfg.batch_size]
            images, masks = _batch(train_set.samples, idx, cfg, epoch, model.dtype)
            target = encode_targets(masks, num_classes)
            weights = {k: Tensor(v, requires_grad=True) for k, v in params.items()}
            with Tape() as tape:
                out = model.forward(Tensor(images), weights, training=True,
                                    rng=np.random.default_rng([cfg.seed, epoch, b, 1]),
                                    dropout_rate=cfg.dropout_rate)
                loss = compute_loss(loss_name, out, target)
            if not np.isfinite(loss.item()):
                raise DivergenceError(f"loss became {loss.item()} at epoch {epoch}, batch {b} (step {state.step + 1})")
            for j, v in zip(idx, per_sample_loss(loss_name, out.probs.data, out.logits.data, target)):
                sample_losses[int(j)] = v
            store = backward(tape, loss, retain_all=False)
            grads = clip_by_global_norm({k: store[w] for k, w in weights.items()}, cfg.grad_clip)
            try:
                params, state = adam_step(params, grads, state, cfg.adam)
            except NonFiniteGradient as exc:
                raise DivergenceError(f"epoch {epoch}, batch {b}: {exc}") from None
        model.params = params
        train_loss = math.fsum(sample_losses[j] for j in sorted(sample_losses)) / n
        train_dsc = None
        evaluate_now = epoch % cfg.eval_every == 0 or epoch == cfg.epochs
        val_loss, val_dsc = _inference_scores(model, val_set, loss_name, cfg.batch_size, cfg.threshold)
        if evaluate_now:
            train_dsc = _inference_scores(model, train_set, loss_name, cfg.batch_size, cfg.threshold)[1]
        wall = round((time.perf_counter() - t0) * 1000, 3) if cfg.record_wall_time else None
        lr = cfg.learning_rate
        for rec in ({"epoch": epoch, "split": "train", "loss": train_loss, "dsc": train_dsc, "lr": lr, "wall_ms": wall},
                    {"epoch": epoch, "split": "val", "loss": val_loss, "dsc": val_dsc, "lr": lr, "wall_ms": wall}):
            history.append(rec)
            emit(rec)
        improved = val_dsc > best_val
        if improved:
            best_val, best_epoch = val_dsc, epoch
        last = snapshot(epoch)
        if improved:
            best = last
        if checkpoint_dir is not None:
            save_checkpoint(Path(checkpoint_dir) / "last.m2sn", last)
            if improved:
                save_checkpoint(Path(checkpoint_dir) / "best.m2sn", best)
        if (cfg.stop_train_dsc is not None or cfg.stop_val_dsc is not None) and train_dsc is not None:
            if train_dsc >= (cfg.stop_train_dsc or 0) and val_dsc >= (cfg.stop_val_dsc or 0):
                stop_reason = "target"
                break
    return TrainResult(best, last, history, stop_reason)
