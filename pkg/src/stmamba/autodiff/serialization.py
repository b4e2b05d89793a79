"""Named-tensor container (``MSRA``) used for checkpoints.

Layout, all little-endian::

    b"MSRA" | u32 version | u32 count
    count x ( u32 name_len | utf-8 name | u32 ndim | ndim x u32 extent )
    f32 payloads in declaration order
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"MSRA"
VERSION = 1


class FormatError(ValueError):
    pass


def dumps_tensors(tensors: dict[str, np.ndarray]) -> bytes:
    head = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    body = []
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        raw = name.encode("utf-8")
        head.append(struct.pack("<I", len(raw)))
        head.append(raw)
        head.append(struct.pack("<I", arr.ndim))
        head.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        body.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(head + body)


def loads_tensors(buf: bytes) -> dict[str, np.ndarray]:
    if buf[:4] != MAGIC:
        raise FormatError(f"bad magic {buf[:4]!r}, expected {MAGIC!r}")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise FormatError(f"unsupported container version {version}")
    pos = 12
    entries = []
    for _ in range(count):
        (n,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        name = buf[pos:pos + n].decode("utf-8")
        pos += n
        (ndim,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}I", buf, pos)
        pos += 4 * ndim
        entries.append((name, shape))
    out = {}
    for name, shape in entries:
        size = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(buf, dtype="<f4", count=size, offset=pos).reshape(shape)
        out[name] = arr.astype(np.float32)
        pos += 4 * size
    if pos != len(buf):
        raise FormatError(f"{len(buf) - pos} trailing bytes after payloads")
    return out


def save_tensors(path, tensors: dict[str, np.ndarray]):
    Path(path).write_bytes(dumps_tensors(tensors))


def load_tensors(path) -> dict[str, np.ndarray]:
    return loads_tensors(Path(path).read_bytes())
