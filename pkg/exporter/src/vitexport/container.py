"""Standalone writer/reader for the quantization-toolkit container format.

Implemented independently of the consumer so the two codecs cross-check each
other: 8-byte magic ``QFCKPT01``, little-endian uint64 header length, UTF-8
JSON header mapping tensor name -> {dtype, shape, offset, nbytes}, then a
data region of little-endian float32 with offsets 64-byte aligned relative
to the region start. Names are written sorted and the JSON is canonical, so
equal tensors give byte-identical files.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"QFCKPT01"
ALIGNMENT = 64


class ContainerFormatError(RuntimeError):
    pass


def write_container(path, tensors: dict) -> None:
    arrays = {str(k): np.ascontiguousarray(np.asarray(v, dtype="<f4"))
              for k, v in tensors.items()}
    header = {}
    offset = 0
    for name in sorted(arrays):
        arr = arrays[name]
        header[name] = {"dtype": "f32", "shape": [int(s) for s in arr.shape],
                        "offset": offset, "nbytes": int(arr.nbytes)}
        offset += arr.nbytes
        offset = (offset + ALIGNMENT - 1) // ALIGNMENT * ALIGNMENT
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        pos = 0
        for name in sorted(arrays):
            pad = header[name]["offset"] - pos
            fh.write(b"\x00" * pad)
            fh.write(arrays[name].tobytes())
            pos = header[name]["offset"] + header[name]["nbytes"]


def read_container(path) -> dict:
    blob = Path(path).read_bytes()
    if blob[:8] != MAGIC:
        raise ContainerFormatError(f"{path}: bad magic")
    (hlen,) = struct.unpack_from("<Q", blob, 8)
    if len(blob) < 16 + hlen:
        raise ContainerFormatError(f"{path}: truncated header")
    header = json.loads(blob[16:16 + hlen].decode("utf-8"))
    data = blob[16 + hlen:]
    out = {}
    for name, rec in header.items():
        shape = tuple(rec["shape"])
        count = int(np.prod(shape)) if shape else 1
        if rec["offset"] + rec["nbytes"] > len(data):
            raise ContainerFormatError(f"{path}: truncated data for {name!r}")
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=rec["offset"])
        out[name] = arr.reshape(shape).astype(np.float32, copy=True)
    return out
