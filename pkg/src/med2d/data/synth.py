"""Synthetic segmentation corpora: ellipses, thresholded blobs and thin vessels.

Each image is ``base + intensity + tint * (contrast * fg + noise * texture)``,
where the foreground and texture terms are made zero-mean per image; the mean
intensity of a corpus is therefore set by ``base + intensity`` alone (up to
8-bit quantization and clipping). A :class:`DomainShift` changes the
intensity offset, foreground contrast, texture strength and frequency and
shape elongation to produce a distinct family for zero-shot experiments.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .dataset import resize_bilinear, write_dataset

KINDS = ("ellipses", "blobs", "vessels")
_KIND_CODE = {k: i for i, k in enumerate(KINDS)}

BASE_LEVEL = 0.45
FG_CONTRAST = 0.22
TEXTURE_AMPLITUDE = 0.04
TINT = np.array([1.0, 0.85, 0.7])
FG_FRACTION = (0.01, 0.6)


@dataclass(frozen=True)
class DomainShift:
    intensity: float = 0.0
    contrast: float = 1.0
    noise: float = 1.0
    texture_scale: float = 1.0
    elongation: float = 1.0

    @property
    def is_identity(self) -> bool:
        return self == DomainShift()


NO_SHIFT = DomainShift()
DEFAULT_SHIFT = DomainShift(intensity=0.15, contrast=0.45, noise=2.5, texture_scale=2.0, elongation=1.6)


def _grid(size):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    return yy + 0.5, xx + 0.5


def _ellipses(rng, size, shift):
    yy, xx = _grid(size)
    mask = np.zeros((size, size), bool)
    for _ in range(rng.integers(1, 4)):
        cy, cx = rng.uniform(0.2, 0.8, 2) * size
        a, b = rng.uniform(0.08, 0.22, 2) * size
        a, b = a * shift.elongation, b / shift.elongation
        t = rng.uniform(0, np.pi)
        dy, dx = yy - cy, xx - cx
        u = dx * np.cos(t) + dy * np.sin(t)
        v = -dx * np.sin(t) + dy * np.cos(t)
        mask |= (u / a) ** 2 + (v / b) ** 2 <= 1
    return mask


def _blobs(rng, size, shift):
    yy, xx = _grid(size)
    field = np.zeros((size, size))
    for _ in range(rng.integers(2, 5)):
        cy, cx = rng.uniform(0.15, 0.85, 2) * size
        sy, sx = rng.uniform(0.05, 0.12, 2) * size
        sy, sx = sy * shift.elongation, sx / shift.elongation
        field += rng.uniform(0.6, 1.0) * np.exp(-0.5 * (((yy - cy) / sy) ** 2 + ((xx - cx) / sx) ** 2))
    return field > 0.5 * field.max()


def _vessels(rng, size, shift):
    yy, xx = _grid(size)
    mask = np.zeros((size, size), bool)
    for _ in range(rng.integers(2, 5)):
        # cubic Bezier through control points spread over the image, dilated by r px
        ctrl = rng.uniform(0.05, 0.95, (4, 2)) * size
        ctrl[:, 1] = ctrl[:, 1].mean() + (ctrl[:, 1] - ctrl[:, 1].mean()) * shift.elongation
        r = rng.uniform(1.0, 3.0)
        ts = np.linspace(0, 1, 4 * size)[:, None]
        pts = ((1 - ts) ** 3 * ctrl[0] + 3 * (1 - ts) ** 2 * ts * ctrl[1]
               + 3 * (1 - ts) * ts ** 2 * ctrl[2] + ts ** 3 * ctrl[3])
        for py, px in pts:
            y0, y1 = max(0, int(py) - 4), min(size, int(py) + 5)
            x0, x1 = max(0, int(px) - 4), min(size, int(px) + 5)
            if y0 >= y1 or x0 >= x1:
                continue
            d = np.hypot(yy[y0:y1, x0:x1] - py, xx[y0:y1, x0:x1] - px)
            mask[y0:y1, x0:x1] |= d <= r
    return mask


_SHAPES = {"ellipses": _ellipses, "blobs": _blobs, "vessels": _vessels}


def _texture(rng, size, scale):
    cells = max(2, int(round(size / 16 * scale)))
    coarse = rng.standard_normal((cells, cells))
    smooth = resize_bilinear(coarse, (size, size))
    fine = rng.standard_normal((size, size))
    tex = smooth + 0.5 * fine
    return (tex - tex.mean()) / (tex.std() + 1e-12)


def generate_sample(kind: str, index: int, size: int, seed: int, shift: DomainShift = NO_SHIFT):
    """One ``(image uint8 H x W x 3, mask bool H x W)`` pair."""
    rng = np.random.default_rng([seed, index, _KIND_CODE[kind]])
    shape_fn = _SHAPES[kind]
    for _ in range(200):
        mask = shape_fn(rng, size, shift)
        frac = mask.mean()
        if FG_FRACTION[0] <= frac <= FG_FRACTION[1]:
            break
    else:
        raise RuntimeError(f"could not draw a {kind} mask within the foreground bounds")
    texture = _texture(rng, size, shift.texture_scale)
    fg = mask.astype(np.float64)
    structure = shift.contrast * FG_CONTRAST * (fg - fg.mean()) + shift.noise * TEXTURE_AMPLITUDE * texture
    img = BASE_LEVEL + shift.intensity + TINT[None, None, :] * structure[..., None]
    img = np.clip(np.round(img * 255), 0, 255).astype(np.uint8)
    return img, mask


def generate_corpus(kind: str, n: int, size: int, seed: int, shift: DomainShift = NO_SHIFT) -> list:
    if kind not in _SHAPES:
        raise ValueError(f"unknown corpus kind {kind!r}; expected one of {KINDS}")
    if n < 1:
        raise ValueError(f"corpus size must be >= 1, got {n}")
    if size % 16 or size < 16:
        raise ValueError(f"image size must be a positive multiple of 16, got {size}")
    out = []
    for i in range(n):
        img, mask = generate_sample(kind, i, size, seed, shift)
        out.append((f"{kind}_{i:04d}", img, mask.astype(np.uint8) * 255))
    return out


def synth_corpus(kind: str, n: int, size: int, seed: int, root, shift: Optional[DomainShift] = None) -> Path:
    """Generate a corpus and write it in the standard dataset layout under ``root``."""
    return write_dataset(root, generate_corpus(kind, n, size, seed, shift or NO_SHIFT))
