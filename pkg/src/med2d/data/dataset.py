"""Paired image/mask datasets, resizing and deterministic splits.

On-disk layout::

    root/images/<id>.(ppm|pgm|png)
    root/masks/<id>.(pgm|png)
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .pnm import IMAGE_EXTENSIONS, DecodeError, read_image, write_pnm


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class SegmentationSample:
    image: np.ndarray  # H x W x 3 float32 in [0, 1]
    mask: np.ndarray  # H x W integer class ids
    source_id: str

    def __post_init__(self):
        if self.image.shape[:2] != self.mask.shape:
            raise DatasetError(
                f"{self.source_id}: image {self.image.shape[:2]} and mask {self.mask.shape} differ spatially"
            )


@dataclass(frozen=True)
class Dataset:
    samples: tuple
    num_classes: int = 1  # model convention: 1 means binary foreground/background
    name: str = ""

    def __len__(self):
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def __getitem__(self, i):
        return self.samples[i]

    @property
    def label_count(self) -> int:
        return max(2, self.num_classes)

    @property
    def ids(self) -> list:
        return [s.source_id for s in self.samples]

    def images(self) -> np.ndarray:
        return np.stack([s.image for s in self.samples])

    def masks(self) -> np.ndarray:
        return np.stack([s.mask for s in self.samples])


# --- resizing -----------------------------------------------------------------


def _source_coords(n_out: int, n_in: int) -> np.ndarray:
    # half-pixel centres
    return (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5


def resize_bilinear(img: np.ndarray, size) -> np.ndarray:
    """Bilinear resize of ``H x W`` or ``H x W x C``; identity at the same size."""
    h, w = size
    if img.shape[:2] == (h, w):
        return img
    src = img.astype(np.float64)
    ys = np.clip(_source_coords(h, img.shape[0]), 0, img.shape[0] - 1)
    xs = np.clip(_source_coords(w, img.shape[1]), 0, img.shape[1] - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, img.shape[0] - 1)
    x1 = np.minimum(x0 + 1, img.shape[1] - 1)
    wy = (ys - y0)[:, None]
    wx = (xs - x0)[None, :]
    if src.ndim == 3:
        wy, wx = wy[..., None], wx[..., None]
    top = src[y0][:, x0] * (1 - wx) + src[y0][:, x1] * wx
    bottom = src[y1][:, x0] * (1 - wx) + src[y1][:, x1] * wx
    return (top * (1 - wy) + bottom * wy).astype(img.dtype)


def resize_nearest(mask: np.ndarray, size) -> np.ndarray:
    """Nearest-neighbour resize; output labels are a subset of input labels."""
    h, w = size
    if mask.shape[:2] == (h, w):
        return mask
    ys = np.minimum(((np.arange(h) + 0.5) * mask.shape[0] / h).astype(int), mask.shape[0] - 1)
    xs = np.minimum(((np.arange(w) + 0.5) * mask.shape[1] / w).astype(int), mask.shape[1] - 1)
    return mask[ys][:, xs]


# --- loading ------------------------------------------------------------------


def _index(directory: Path, extensions) -> dict:
    out = {}
    if not directory.is_dir():
        return out
    for p in sorted(directory.iterdir()):
        if p.suffix.lower() in extensions:
            if p.stem in out:
                raise DatasetError(f"two files share the id {p.stem!r} in {directory}")
            out[p.stem] = p
    return out


def to_float_image(raw: np.ndarray) -> np.ndarray:
    scale = 65535.0 if raw.dtype == np.uint16 else 255.0
    img = raw.astype(np.float32) / np.float32(scale)
    if img.ndim == 2:
        img = np.repeat(img[..., None], 3, axis=2)
    return img


def collapse_mask(raw: np.ndarray, num_classes: int, source_id: str = "") -> np.ndarray:
    if raw.ndim == 3:
        raise DatasetError(f"{source_id}: mask must be single-channel, got shape {raw.shape}")
    mask = raw.astype(np.int64)
    if num_classes == 1:
        values = np.unique(mask)
        if np.all(np.isin(values, (0, 255))):
            mask = mask // 255
    limit = max(2, num_classes)
    if mask.size and (mask.max() >= limit or mask.min() < 0):
        raise DatasetError(f"{source_id}: mask value {int(mask.max())} is not a class id below {limit}")
    return mask.astype(np.uint8 if limit <= 256 else np.int64)


def load_dataset(root, num_classes: int = 1, size: Optional[Sequence[int]] = None,
                 name: Optional[str] = None) -> Dataset:
    """Load every matched image/mask pair under ``root``.

    Images are resized bilinearly and masks by nearest neighbour when ``size``
    is given. A missing or empty directory yields an empty dataset.
    """
    root = Path(root)
    images = _index(root / "images", IMAGE_EXTENSIONS)
    masks = _index(root / "masks", (".pgm", ".png"))
    orphans = sorted(set(images) ^ set(masks))
    if orphans:
        kinds = ["image without mask" if o in images else "mask without image" for o in orphans]
        listing = ", ".join(f"{o} ({k})" for o, k in zip(orphans, kinds))
        raise DatasetError(f"unmatched files in {root}: {listing}")
    if isinstance(size, int):
        size = (size, size)
    samples = []
    for sid in sorted(images):
        try:
            img = to_float_image(read_image(images[sid]))
            mask_raw = read_image(masks[sid])
        except DecodeError as exc:
            raise DatasetError(f"{sid}: {exc}") from None
        mask = collapse_mask(mask_raw, num_classes, sid)
        if img.shape[:2] != mask.shape:
            raise DatasetError(f"{sid}: image {img.shape[:2]} and mask {mask.shape} differ spatially")
        if size is not None:
            img = np.clip(resize_bilinear(img, size), 0, 1)
            mask = resize_nearest(mask, size)
        samples.append(SegmentationSample(img, mask, sid))
    return Dataset(tuple(samples), num_classes, name or root.name)


def write_dataset(root, samples: Sequence[tuple]) -> Path:
    """Write ``(id, image uint8, mask uint8)`` triples in the standard layout."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    for sid, image, mask in samples:
        ext = ".ppm" if image.ndim == 3 else ".pgm"
        write_pnm(root / "images" / f"{sid}{ext}", image)
        write_pnm(root / "masks" / f"{sid}.pgm", mask)
    return root


# --- splitting ----------------------------------------------------------------

SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class SplitDescriptor:
    seed: int = 0
    fractions: tuple = (0.8, 0.1, 0.1)

    def __post_init__(self):
        if len(self.fractions) != 3 or any(f < 0 for f in self.fractions):
            raise ValueError(f"need three non-negative fractions, got {self.fractions}")
        if abs(sum(self.fractions) - 1.0) > 1e-9:
            raise ValueError(f"split fractions must sum to 1, got {self.fractions}")

    def assign(self, ids: Sequence[str]) -> list:
        """Split label per position of ``sorted(ids)``.

        Validation and test sizes are floored; the remainder goes to train.
        """
        n = len(ids)
        n_val = int(np.floor(self.fractions[1] * n + 1e-9))
        n_test = int(np.floor(self.fractions[2] * n + 1e-9))
        order = np.random.default_rng(self.seed).permutation(n)
        labels = ["train"] * n
        for rank, pos in enumerate(order):
            if rank < n_val:
                labels[pos] = "val"
            elif rank < n_val + n_test:
                labels[pos] = "test"
        return labels


def split(dataset: Dataset, desc: SplitDescriptor = SplitDescriptor()):
    """Deterministic disjoint partition into (train, val, test) keyed on sorted ids."""
    ordered = sorted(dataset.samples, key=lambda s: s.source_id)
    labels = desc.assign([s.source_id for s in ordered])
    parts = {k: [] for k in SPLITS}
    for sample, label in zip(ordered, labels):
        parts[label].append(sample)
    return tuple(
        Dataset(tuple(parts[k]), dataset.num_classes, f"{dataset.name}:{k}" if dataset.name else k)
        for k in SPLITS
    )
