"""Bit-exact tensor archives for checkpoints.

Layout: 8-byte magic, 8-byte little-endian header length, a UTF-8 JSON
header (metadata plus a tensor index), then the raw tensor payloads
concatenated in index order.  Saving the same tensors and metadata twice
yields byte-identical files, and a load/save round trip is bit-exact.
"""

from __future__ import annotations

import json
import struct
from typing import Mapping

import numpy as np

from .errors import ValidationError

MAGIC = b"TNSRCHK1"


def save_tensors(path, tensors: Mapping[str, np.ndarray], meta: Mapping | None = None) -> None:
    names = sorted(tensors)
    index = []
    for name in names:
        arr = np.ascontiguousarray(tensors[name])
        index.append({"name": name, "dtype": str(arr.dtype), "shape": list(arr.shape)})
    header = json.dumps(
        {"meta": dict(meta or {}), "tensors": index},
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for name in names:
            fh.write(np.ascontiguousarray(tensors[name]).tobytes())


def load_tensors(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise ValidationError(f"not a tensor archive: {path}")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        tensors = {}
        for entry in header["tensors"]:
            shape = tuple(entry["shape"])
            dtype = np.dtype(entry["dtype"])
            count = int(np.prod(shape)) if shape else 1
            buf = fh.read(count * dtype.itemsize)
            tensors[entry["name"]] = np.frombuffer(buf, dtype=dtype).reshape(shape).copy()
    return tensors, header["meta"]
