"""Checkpoint container: magic, JSON header, 64-byte-aligned float32 data.

Layout: 8-byte magic ``QFCKPT01``, a little-endian uint64 header length, that
many bytes of UTF-8 JSON mapping tensor name -> {dtype, shape, offset,
nbytes}, then the data region of little-endian float32 values. Offsets are
relative to the data region start. Writing is deterministic: names are
sorted and the header JSON is canonicalized, so identical tensors produce
byte-identical files.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import BadMagicError, HeaderError, TruncatedFileError

MAGIC = b"QFCKPT01"
ALIGNMENT = 64


def _align(n: int) -> int:
    return (n + ALIGNMENT - 1) // ALIGNMENT * ALIGNMENT


def write_container(path, tensors: dict) -> None:
    path = Path(path)
    arrays = {}
    for name, value in tensors.items():
        arr = np.ascontiguousarray(np.asarray(value, dtype="<f4"))
        arrays[str(name)] = arr

    header = {}
    offset = 0
    for name in sorted(arrays):
        arr = arrays[name]
        header[name] = {
            "dtype": "f32",
            "shape": [int(s) for s in arr.shape],
            "offset": offset,
            "nbytes": int(arr.nbytes),
        }
        offset = _align(offset + arr.nbytes)

    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header_bytes)))
        fh.write(header_bytes)
        pos = 0
        for name in sorted(arrays):
            pad = header[name]["offset"] - pos
            if pad:
                fh.write(b"\x00" * pad)
            fh.write(arrays[name].tobytes())
            pos = header[name]["offset"] + header[name]["nbytes"]


def read_container(path) -> dict:
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < len(MAGIC) or blob[: len(MAGIC)] != MAGIC:
        raise BadMagicError(f"{path} is not a checkpoint container (bad magic)")
    if len(blob) < len(MAGIC) + 8:
        raise TruncatedFileError(f"{path} ends inside the header length field")
    (header_len,) = struct.unpack_from("<Q", blob, len(MAGIC))
    header_start = len(MAGIC) + 8
    data_start = header_start + header_len
    if len(blob) < data_start:
        raise TruncatedFileError(f"{path} ends inside the JSON header")
    try:
        header = json.loads(blob[header_start:data_start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise HeaderError(f"{path}: header is not valid JSON: {exc}") from exc
    if not isinstance(header, dict):
        raise HeaderError(f"{path}: header must be a JSON object")

    data = blob[data_start:]
    out = {}
    for name, rec in header.items():
        if not isinstance(rec, dict):
            raise HeaderError(f"{path}: record for {name!r} is not an object")
        missing = {"dtype", "shape", "offset", "nbytes"} - rec.keys()
        if missing:
            raise HeaderError(f"{path}: record for {name!r} lacks {sorted(missing)}")
        if rec["dtype"] != "f32":
            raise HeaderError(f"{path}: {name!r} has unsupported dtype {rec['dtype']!r}")
        shape = tuple(int(s) for s in rec["shape"])
        if any(s < 0 for s in shape):
            raise HeaderError(f"{path}: {name!r} has negative dimensions {shape}")
        count = int(np.prod(shape)) if shape else 1
        offset, nbytes = int(rec["offset"]), int(rec["nbytes"])
        if nbytes != count * 4:
            raise HeaderError(
                f"{path}: {name!r} declares {nbytes} bytes for shape {shape}"
            )
        if offset % ALIGNMENT != 0 or offset < 0:
            raise HeaderError(f"{path}: {name!r} offset {offset} is not 64-byte aligned")
        if offset + nbytes > len(data):
            raise TruncatedFileError(
                f"{path}: data region too short for tensor {name!r}"
            )
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=offset)
        out[name] = arr.reshape(shape).astype(np.float32, copy=True)
    return out
