"""Binary PGM (P5) / PPM (P6) codecs, plus optional PNG reading via Pillow."""

from __future__ import annotations

from pathlib import Path

import numpy as np

IMAGE_EXTENSIONS = (".ppm", ".pgm", ".png")


class DecodeError(ValueError):
    pass


def _tokens(buf: bytes, count: int):
    """Read ``count`` whitespace-separated header tokens, skipping ``#`` comments."""
    pos, out = 0, []
    while len(out) < count:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if pos >= len(buf):
            raise DecodeError("truncated header")
        if buf[pos:pos + 1] == b"#":
            end = buf.find(b"\n", pos)
            pos = len(buf) if end < 0 else end + 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
            pos += 1
        out.append(buf[start:pos])
    return out, pos


def decode_pnm(buf: bytes) -> np.ndarray:
    """Decode P5/P6 bytes into ``H x W`` or ``H x W x 3`` (uint8, or uint16 if maxval > 255)."""
    tokens, pos = _tokens(buf, 4)
    magic = tokens[0]
    if magic not in (b"P5", b"P6"):
        raise DecodeError(f"unsupported PNM magic {magic!r}")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise DecodeError(f"bad PNM header: {exc}") from None
    if width < 1 or height < 1 or not 0 < maxval < 65536:
        raise DecodeError(f"bad PNM geometry {width}x{height} maxval {maxval}")
    pos += 1  # exactly one whitespace byte before the raster
    channels = 3 if magic == b"P6" else 1
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    nbytes = width * height * channels * dtype.itemsize
    raster = buf[pos:pos + nbytes]
    if len(raster) < nbytes:
        raise DecodeError(f"truncated raster: need {nbytes} bytes, got {len(raster)}")
    arr = np.frombuffer(raster, dtype=dtype).astype(np.uint16 if maxval > 255 else np.uint8)
    shape = (height, width, 3) if channels == 3 else (height, width)
    return arr.reshape(shape)


def encode_pnm(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    if arr.dtype != np.uint8:
        raise ValueError(f"PNM encoder takes uint8 data, got {arr.dtype}")
    if arr.ndim == 2:
        magic = b"P5"
    elif arr.ndim == 3 and arr.shape[2] == 3:
        magic = b"P6"
    else:
        raise ValueError(f"expected H x W or H x W x 3, got {arr.shape}")
    h, w = arr.shape[:2]
    return magic + f"\n{w} {h}\n255\n".encode() + np.ascontiguousarray(arr).tobytes()


def read_pnm(path) -> np.ndarray:
    return decode_pnm(Path(path).read_bytes())


def write_pnm(path, arr: np.ndarray) -> None:
    Path(path).write_bytes(encode_pnm(arr))


def read_png(path) -> np.ndarray:
    try:
        from PIL import Image
    except ImportError as exc:  # pragma: no cover - depends on environment
        raise DecodeError("PNG support needs Pillow (pip install 'artifact[png]')") from exc
    try:
        with Image.open(path) as im:
            if im.mode not in ("L", "RGB"):
                im = im.convert("RGB" if im.mode in ("RGBA", "P", "CMYK") else "L")
            return np.array(im)
    except OSError as exc:
        raise DecodeError(f"cannot decode {path}: {exc}") from None


def read_image(path) -> np.ndarray:
    path = Path(path)
    ext = path.suffix.lower()
    if ext in (".ppm", ".pgm"):
        return read_pnm(path)
    if ext == ".png":
        return read_png(path)
    raise DecodeError(f"unsupported image extension {ext!r}")
