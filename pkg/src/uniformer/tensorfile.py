"""Binary tensor container used for golden files and parameter checkpoints.

Single tensor layout:

    magic    "UFT1" (4 bytes)
    dtype    1 byte: 0 = float32, 1 = float64
    rank     uint32 little-endian
    extents  rank x uint32 little-endian
    data     raw row-major little-endian element bytes

A record file is a plain concatenation of named records, each being

    name_len uint32 little-endian
    name     UTF-8 bytes
    tensor   one tensor block as above

with records sorted lexicographically by name, so files are deterministic
and diffable.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"UFT1"

_DTYPE_TAGS = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_TAG_FOR = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


class TensorFileError(ValueError):
    """Malformed or mismatched tensor file content."""


def _encode(array: np.ndarray) -> bytes:
    arr = np.asarray(array)
    if arr.ndim and not arr.flags["C_CONTIGUOUS"]:
        arr = np.ascontiguousarray(arr)
    if arr.dtype not in _TAG_FOR:
        raise TensorFileError(f"unsupported dtype {arr.dtype}; expected float32/float64")
    tag = _TAG_FOR[arr.dtype]
    head = MAGIC + struct.pack("<BI", tag, arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape) if arr.ndim else b""
    return head + arr.astype(_DTYPE_TAGS[tag], copy=False).tobytes(order="C")


def _decode(buf: memoryview, offset: int) -> tuple[np.ndarray, int]:
    if bytes(buf[offset : offset + 4]) != MAGIC:
        raise TensorFileError(f"bad magic at byte {offset}; not a tensor block")
    offset += 4
    tag, rank = struct.unpack_from("<BI", buf, offset)
    offset += 5
    if tag not in _DTYPE_TAGS:
        raise TensorFileError(f"unknown dtype tag {tag}")
    extents = struct.unpack_from(f"<{rank}I", buf, offset) if rank else ()
    offset += 4 * rank
    dtype = _DTYPE_TAGS[tag]
    count = 1
    for e in extents:
        count *= e
    nbytes = count * dtype.itemsize
    if offset + nbytes > len(buf):
        raise TensorFileError("truncated tensor data")
    arr = np.frombuffer(buf, dtype=dtype, count=count, offset=offset).reshape(extents)
    # native byte order, writable copy
    return arr.astype(dtype.newbyteorder("="), copy=True), offset + nbytes


def write_tensor(path, array: np.ndarray) -> None:
    Path(path).write_bytes(_encode(array))


def read_tensor(path) -> np.ndarray:
    buf = memoryview(Path(path).read_bytes())
    arr, end = _decode(buf, 0)
    if end != len(buf):
        raise TensorFileError(f"{path}: {len(buf) - end} trailing bytes after tensor")
    return arr


def write_records(path, records: dict[str, np.ndarray]) -> None:
    """Write named tensors sorted by name."""
    chunks = []
    for name in sorted(records):
        nb = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(nb)))
        chunks.append(nb)
        chunks.append(_encode(records[name]))
    Path(path).write_bytes(b"".join(chunks))


def read_records(path) -> dict[str, np.ndarray]:
    buf = memoryview(Path(path).read_bytes())
    records: dict[str, np.ndarray] = {}
    offset = 0
    while offset < len(buf):
        if offset + 4 > len(buf):
            raise TensorFileError("truncated record header")
        (nlen,) = struct.unpack_from("<I", buf, offset)
        offset += 4
        name = bytes(buf[offset : offset + nlen]).decode("utf-8")
        offset += nlen
        arr, offset = _decode(buf, offset)
        if name in records:
            raise TensorFileError(f"duplicate record name {name!r}")
        records[name] = arr
    return records
