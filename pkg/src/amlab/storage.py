"""Versioned binary container used for models and datasets.

Byte layout (all integers little-endian)::

    offset  size  field
    0       8     magic, b"AMLBMODL" for models, b"AMLBDATA" for datasets
    8       2     uint16 format version (currently 1)
    10      4     uint32 header length H
    14      H     UTF-8 JSON header, keys sorted, separators (",", ":")
    14+H    ...   array payloads, back to back, in header["arrays"] order

Each entry of ``header["arrays"]`` is ``{"name", "dtype", "shape"}`` where
dtype is ``"<f8"`` or ``"<i8"``; the payload is the C-order raw bytes. Writing
the same content twice gives identical bytes, and float64 values round-trip
exactly.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from amlab.errors import FormatError

FORMAT_VERSION = 1
MODEL_MAGIC = b"AMLBMODL"
DATASET_MAGIC = b"AMLBDATA"
_PREFIX = struct.Struct("<8sHI")
_DTYPES = {"<f8": np.dtype("<f8"), "<i8": np.dtype("<i8")}


def pack(magic: bytes, header: dict, arrays: list[tuple[str, np.ndarray]]) -> bytes:
    header = dict(header)
    payload = []
    entries = []
    for name, arr in arrays:
        arr = np.asarray(arr)
        dt = "<i8" if np.issubdtype(arr.dtype, np.integer) else "<f8"
        entries.append({"name": name, "dtype": dt, "shape": list(arr.shape)})
        payload.append(np.ascontiguousarray(arr, dtype=_DTYPES[dt]).tobytes())
    header["arrays"] = entries
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return _PREFIX.pack(magic, FORMAT_VERSION, len(blob)) + blob + b"".join(payload)


def unpack(data: bytes, magic: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if len(data) < _PREFIX.size:
        raise FormatError("file too short for the container prefix", len(data))
    got, version, hlen = _PREFIX.unpack_from(data, 0)
    if got != magic:
        raise FormatError(f"bad magic {got!r}, expected {magic!r}", 0)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported format version {version}", 8)
    start = _PREFIX.size
    if len(data) < start + hlen:
        raise FormatError("truncated header", len(data))
    try:
        header = json.loads(data[start : start + hlen].decode("utf-8"))
    except ValueError as exc:
        raise FormatError(f"unreadable header: {exc}", start) from exc
    pos = start + hlen
    arrays = {}
    for entry in header.get("arrays", []):
        dt = _DTYPES.get(entry["dtype"])
        if dt is None:
            raise FormatError(f"unsupported dtype {entry['dtype']!r}", pos)
        shape = tuple(entry["shape"])
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        if len(data) < pos + nbytes:
            raise FormatError(f"truncated payload for array {entry['name']!r}", len(data))
        arrays[entry["name"]] = np.frombuffer(data, dtype=dt, count=nbytes // dt.itemsize, offset=pos).reshape(shape)
        pos += nbytes
    if pos != len(data):
        raise FormatError("trailing bytes after the last array", pos)
    return header, arrays


def write_file(path, blob: bytes) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(blob)
    return path
