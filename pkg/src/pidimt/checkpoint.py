"""Versioned checkpoint container.

Layout (all integers little-endian)::

    b"DIMTCKPT"            8-byte magic
    u32 version
    u64 header_length
    header                 UTF-8 JSON: config, step, seed, rng state, tensor index
    blobs                  f32 little-endian arrays, offsets relative to blob start

Each tensor index entry is ``{"name", "shape", "offset", "nbytes"}``.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

MAGIC = b"DIMTCKPT"
VERSION = 1


class LoadError(RuntimeError):
    """Checkpoint cannot be read or does not match the requested architecture."""


def write_checkpoint(path: str | Path, tensors: dict[str, torch.Tensor], header: dict) -> None:
    index, blobs, offset = [], [], 0
    for name, t in tensors.items():
        arr = t.detach().cpu().to(torch.float32).numpy().astype("<f4", copy=False)
        raw = arr.tobytes(order="C")
        index.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    head = json.dumps({**header, "tensors": index}).encode("utf-8")
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", VERSION, len(head)))
        fh.write(head)
        for raw in blobs:
            fh.write(raw)
    tmp.replace(path)


def read_checkpoint(path: str | Path) -> tuple[dict[str, torch.Tensor], dict]:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise LoadError(f"{path}: not a checkpoint (bad magic)")
    version, hlen = struct.unpack_from("<IQ", data, 8)
    if version != VERSION:
        raise LoadError(f"{path}: unsupported checkpoint version {version}")
    start = 8 + struct.calcsize("<IQ")
    header = json.loads(data[start:start + hlen].decode("utf-8"))
    base = start + hlen
    tensors = {}
    for entry in header.pop("tensors"):
        lo = base + entry["offset"]
        arr = np.frombuffer(data, dtype="<f4", count=entry["nbytes"] // 4, offset=lo)
        tensors[entry["name"]] = torch.from_numpy(arr.reshape(entry["shape"]).astype(np.float32))
    return tensors, header
