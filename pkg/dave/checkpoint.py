"""DAVECKPT container: named float32 tensors, little-endian.

Layout::

    b"DAVECKPT" | u32 version | u32 count
    per tensor: u16 name_len | name (utf-8) | u8 rank | u32 extents[rank] | f32 data
"""

from __future__ import annotations

import io
import os
import struct
from collections import OrderedDict
from typing import BinaryIO, Dict, Mapping, Union

import numpy as np

from dave.errors import CheckpointError
from dave.tensor import Tensor

MAGIC = b"DAVECKPT"
VERSION = 1

Arrays = Mapping[str, Union[np.ndarray, Tensor]]


def _as_f32(value: Union[np.ndarray, Tensor]) -> np.ndarray:
    arr = value.data if isinstance(value, Tensor) else np.asarray(value)
    return np.ascontiguousarray(arr, dtype="<f4")


def write_checkpoint(stream: BinaryIO, tensors: Arrays) -> None:
    stream.write(MAGIC)
    stream.write(struct.pack("<II", VERSION, len(tensors)))
    for name in sorted(tensors):
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise CheckpointError(f"tensor name too long: {name[:40]}...")
        arr = _as_f32(tensors[name])
        if arr.ndim > 0xFF:
            raise CheckpointError(f"tensor {name!r}: rank {arr.ndim} too large")
        stream.write(struct.pack("<H", len(raw)))
        stream.write(raw)
        stream.write(struct.pack("<B", arr.ndim))
        stream.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        stream.write(arr.tobytes(order="C"))


def _read_exact(stream: BinaryIO, n: int, source: str) -> bytes:
    buf = stream.read(n)
    if len(buf) != n:
        raise CheckpointError(f"{source}: truncated checkpoint")
    return buf


def read_checkpoint(stream: BinaryIO, source: str = "<stream>") -> "OrderedDict[str, np.ndarray]":
    magic = stream.read(len(MAGIC))
    if magic != MAGIC:
        raise CheckpointError(f"{source}: bad magic {magic!r}, not a DAVECKPT file")
    version, count = struct.unpack("<II", _read_exact(stream, 8, source))
    if version != VERSION:
        raise CheckpointError(f"{source}: unsupported version {version}")

    out: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for _ in range(count):
        (name_len,) = struct.unpack("<H", _read_exact(stream, 2, source))
        name = _read_exact(stream, name_len, source).decode("utf-8")
        (rank,) = struct.unpack("<B", _read_exact(stream, 1, source))
        shape = struct.unpack(f"<{rank}I", _read_exact(stream, 4 * rank, source))
        n = int(np.prod(shape, dtype=np.int64)) if rank else 1
        data = np.frombuffer(_read_exact(stream, 4 * n, source), dtype="<f4")
        out[name] = data.reshape(shape).astype(np.float32)
    return out


def save_checkpoint(path: str, tensors: Arrays) -> None:
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)
    buf = io.BytesIO()
    write_checkpoint(buf, tensors)
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(buf.getvalue())
    os.replace(tmp, path)


def load_checkpoint(path: str) -> Dict[str, np.ndarray]:
    try:
        with open(path, "rb") as f:
            return read_checkpoint(f, source=path)
    except FileNotFoundError:
        raise CheckpointError(f"checkpoint not found: {path}") from None


def split_prefix(tensors: Mapping[str, np.ndarray], prefix: str) -> Dict[str, np.ndarray]:
    """Subset of ``tensors`` whose names start with ``prefix + '/'``."""
    head = prefix.rstrip("/") + "/"
    return {k: v for k, v in tensors.items() if k.startswith(head)}
