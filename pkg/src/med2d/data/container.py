"""Named-tensor container used for checkpoints.

Layout, all integers little-endian::

    b"M2SN"  u32 version=1  u32 tensor_count
    per tensor: u32 name_len, UTF-8 name, u8 rank, rank x u64 dims,
                product(dims) x float32 (little-endian IEEE-754)

There is no checksum: a flipped payload byte decodes to a different value in
exactly one element.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Iterable, Mapping, Union

import numpy as np

MAGIC = b"M2SN"
VERSION = 1
HEADER = struct.Struct("<4sII")


class ContainerError(ValueError):
    pass


class BadMagicError(ContainerError):
    pass


class VersionMismatchError(ContainerError):
    pass


class TruncatedError(ContainerError):
    pass


class DuplicateNameError(ContainerError):
    pass


Tensors = Union[Mapping[str, np.ndarray], Iterable[tuple]]


def encode_container(tensors: Tensors) -> bytes:
    items = list(tensors.items()) if isinstance(tensors, Mapping) else list(tensors)
    seen = set()
    parts = [HEADER.pack(MAGIC, VERSION, len(items))]
    for name, arr in items:
        if name in seen:
            raise DuplicateNameError(f"duplicate tensor name {name!r}")
        seen.add(name)
        arr = np.asarray(arr)
        if arr.ndim > 255:
            raise ContainerError(f"rank {arr.ndim} does not fit in a u8")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def decode_container(buf: bytes) -> dict:
    if len(buf) < HEADER.size:
        raise TruncatedError(f"file is {len(buf)} bytes, shorter than the {HEADER.size}-byte header")
    magic, version, count = HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise VersionMismatchError(f"container version {version}, this reader supports {VERSION}")
    pos = HEADER.size
    out: dict = {}

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise TruncatedError(f"need {n} bytes at offset {pos}, file has {len(buf) - pos} left")
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<B", take(1))
        dims = struct.unpack(f"<{rank}Q", take(8 * rank))
        size = int(np.prod(dims, dtype=np.int64)) if rank else 1
        payload = take(4 * size)
        if name in out:
            raise DuplicateNameError(f"duplicate tensor name {name!r} in file")
        out[name] = np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(dims)
    if pos != len(buf):
        raise ContainerError(f"{len(buf) - pos} trailing bytes after {count} tensors")
    return out


def write_container(path, tensors: Tensors) -> None:
    data = encode_container(tensors)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)


def read_container(path) -> dict:
    return decode_container(Path(path).read_bytes())
