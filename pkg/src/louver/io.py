"""Binary dataset files and index snapshots.

Dataset layout (little endian): ``b"LVKD"``, u32 version, u32 n, u32 d,
then ``n*d`` float32 values row-major.

Snapshot layout: ``b"LVIX"``, u32 version, u32 header length, a UTF-8 JSON
header describing the layout, config and arrays, the raw array bytes in
header order, and a trailing u32 CRC-32 of everything before it.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import asdict
from pathlib import Path

import numpy as np

from louver.build import BuildConfig, LouverIndex
from louver.geometry import SubspaceLayout

DATASET_MAGIC = b"LVKD"
DATASET_VERSION = 1
SNAPSHOT_MAGIC = b"LVIX"
SNAPSHOT_VERSION = 1

_HEAD = struct.Struct("<4sIII")
_SNAP_HEAD = struct.Struct("<4sII")
_CRC = struct.Struct("<I")


class FormatError(ValueError):
    """File is not in the expected format or is damaged."""


def dataset_bytes(matrix) -> bytes:
    a = np.ascontiguousarray(matrix, dtype="<f4")
    if a.ndim != 2:
        raise ValueError("dataset must be a 2-D matrix")
    n, d = a.shape
    return _HEAD.pack(DATASET_MAGIC, DATASET_VERSION, n, d) + a.tobytes()


def parse_dataset(buf: bytes) -> np.ndarray:
    if len(buf) < _HEAD.size:
        raise FormatError("dataset file shorter than its header")
    magic, version, n, d = _HEAD.unpack_from(buf)
    if magic != DATASET_MAGIC:
        raise FormatError(f"bad dataset magic {magic!r}")
    if version != DATASET_VERSION:
        raise FormatError(f"unsupported dataset version {version}")
    need = 4 * n * d
    if len(buf) - _HEAD.size != need:
        raise FormatError(f"payload is {len(buf) - _HEAD.size} bytes, expected {need}")
    a = np.frombuffer(buf, dtype="<f4", count=n * d, offset=_HEAD.size)
    return a.reshape(n, d).astype(np.float32)


def save_dataset(path, matrix) -> None:
    Path(path).write_bytes(dataset_bytes(matrix))


def load_dataset(path) -> np.ndarray:
    return parse_dataset(Path(path).read_bytes())


def snapshot_bytes(index: LouverIndex) -> bytes:
    arrays = index.state()
    header = {
        "d": index.d,
        "S": index.S,
        "offsets": list(index.layout.offsets),
        "config": asdict(index.config),
        "indexed_count": index.indexed_count,
        "K": index.K,
        "batches": index.batches,
        "arrays": [[name, a.dtype.newbyteorder("<").str, list(a.shape)] for name, a in arrays.items()],
    }
    hjson = json.dumps(header, sort_keys=True).encode()
    parts = [_SNAP_HEAD.pack(SNAPSHOT_MAGIC, SNAPSHOT_VERSION, len(hjson)), hjson]
    for a in arrays.values():
        parts.append(a.astype(a.dtype.newbyteorder("<"), copy=False).tobytes())
    body = b"".join(parts)
    return body + _CRC.pack(zlib.crc32(body))


def parse_snapshot(buf: bytes) -> LouverIndex:
    if len(buf) < _SNAP_HEAD.size + _CRC.size:
        raise FormatError("snapshot shorter than its header")
    magic, version, hlen = _SNAP_HEAD.unpack_from(buf)
    if magic != SNAPSHOT_MAGIC:
        raise FormatError(f"bad snapshot magic {magic!r}")
    if version != SNAPSHOT_VERSION:
        raise FormatError(f"unsupported snapshot version {version}")
    body, (crc,) = buf[: -_CRC.size], _CRC.unpack_from(buf, len(buf) - _CRC.size)
    if zlib.crc32(body) != crc:
        raise FormatError("snapshot checksum mismatch")
    pos = _SNAP_HEAD.size
    try:
        header = json.loads(body[pos : pos + hlen])
    except ValueError as e:
        raise FormatError(f"unreadable snapshot header: {e}") from None
    pos += hlen
    arrays = {}
    for name, dtype, shape in header["arrays"]:
        dt = np.dtype(dtype)
        size = dt.itemsize * int(np.prod(shape, dtype=np.int64))
        if pos + size > len(body):
            raise FormatError(f"snapshot truncated inside array {name!r}")
        arrays[name] = np.frombuffer(body, dtype=dt, count=size // dt.itemsize, offset=pos).reshape(shape)
        pos += size
    if pos != len(body):
        raise FormatError("trailing bytes after snapshot arrays")
    layout = SubspaceLayout.split(header["d"], header["S"])
    if list(layout.offsets) != header["offsets"]:
        raise FormatError("snapshot layout does not match the standard split")
    index = LouverIndex.from_state(layout, BuildConfig(**header["config"]), arrays, header["batches"])
    if index.indexed_count != header["indexed_count"] or index.K != header["K"]:
        raise FormatError("snapshot header disagrees with its arrays")
    return index


def save_snapshot(path, index: LouverIndex) -> None:
    Path(path).write_bytes(snapshot_bytes(index))


def load_snapshot(path) -> LouverIndex:
    return parse_snapshot(Path(path).read_bytes())
