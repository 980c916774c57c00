"""Versioned binary checkpoint container: JSON header + raw parameter arrays.

Layout: 4-byte magic, 8-byte little-endian header length, UTF-8 JSON header,
then each array's raw bytes in header order. Arrays round-trip bit-exactly.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .errors import InvalidConfig

MAGIC = b"EBC1"
CONTAINER_VERSION = 1


@dataclass
class Container:
    model_kind: str
    vocab_ref: str
    hyperparams: dict
    arrays: dict[str, np.ndarray]


def save_container(path, model_kind: str, vocab_ref: str, hyperparams: dict, arrays: dict) -> None:
    entries = []
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        entries.append({"name": name, "shape": list(arr.shape), "dtype": arr.dtype.str})
    header = {
        "version": CONTAINER_VERSION,
        "model_kind": model_kind,
        "vocab_ref": vocab_ref,
        "hyperparams": hyperparams,
        "arrays": entries,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for name, arr in arrays.items():
            fh.write(np.ascontiguousarray(arr).tobytes())


def load_container(path) -> Container:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise InvalidConfig(f"not a checkpoint file: {path}")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        if header.get("version") != CONTAINER_VERSION:
            raise InvalidConfig(f"unsupported checkpoint version {header.get('version')!r}")
        arrays = {}
        for entry in header["arrays"]:
            dtype = np.dtype(entry["dtype"])
            count = int(np.prod(entry["shape"])) if entry["shape"] else 1
            buf = fh.read(count * dtype.itemsize)
            arrays[entry["name"]] = np.frombuffer(buf, dtype=dtype).reshape(entry["shape"]).copy()
    return Container(header["model_kind"], header["vocab_ref"], header["hyperparams"], arrays)


def peek_kind(path) -> str:
    with open(path, "rb") as fh:
        if fh.read(4) != MAGIC:
            raise InvalidConfig(f"not a checkpoint file: {path}")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        return json.loads(fh.read(hlen).decode("utf-8"))["model_kind"]
