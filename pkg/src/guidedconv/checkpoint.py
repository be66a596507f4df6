"""GDC1 binary checkpoints.

Layout (all integers little-endian u32)::

    b"GDC1"  count  { name_len  name(utf-8)  rank  dim_0 .. dim_{rank-1}  float32 data }*count

Model checkpoints store the network configuration as the first record,
``__config__``: a rank-1 record whose values are the bytes of the UTF-8
``key=value`` text (one byte per float32), so every file follows the same
grammar.
"""
from __future__ import annotations

import struct

import numpy as np

MAGIC = b"GDC1"
CONFIG_KEY = "__config__"


class CheckpointError(ValueError):
    pass


def write_tensors(fh, tensors):
    fh.write(MAGIC)
    fh.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        raw = name.encode("utf-8")
        fh.write(struct.pack("<I", len(raw)))
        fh.write(raw)
        fh.write(struct.pack("<I", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def save_tensors(path, tensors):
    with open(path, "wb") as fh:
        write_tensors(fh, tensors)


def _read(fh, n):
    buf = fh.read(n)
    if len(buf) != n:
        raise CheckpointError("truncated checkpoint")
    return buf


def read_tensors(fh):
    if _read(fh, 4) != MAGIC:
        raise CheckpointError("not a GDC1 checkpoint (bad magic)")
    (count,) = struct.unpack("<I", _read(fh, 4))
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", _read(fh, 4))
        name = _read(fh, nlen).decode("utf-8")
        (rank,) = struct.unpack("<I", _read(fh, 4))
        shape = struct.unpack(f"<{rank}I", _read(fh, 4 * rank))
        size = int(np.prod(shape, dtype=np.int64))
        out[name] = np.frombuffer(_read(fh, 4 * size), dtype="<f4").reshape(shape).astype(np.float32)
    if fh.read(1):
        raise CheckpointError("trailing bytes after last tensor")
    return out


def load_tensors(path):
    with open(path, "rb") as fh:
        return read_tensors(fh)


def encode_text(text):
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.float32)


def decode_text(arr):
    return bytes(np.asarray(arr, dtype=np.uint8).tolist()).decode("utf-8")


def save_model(path, model):
    tensors = {CONFIG_KEY: encode_text(model.config.to_text())}
    tensors.update(model.state_dict())
    save_tensors(path, tensors)


def load_model(path):
    from .network import NetConfig, build

    tensors = load_tensors(path)
    if CONFIG_KEY not in tensors:
        raise CheckpointError(f"{path}: no {CONFIG_KEY} record; not a model checkpoint")
    config = NetConfig.from_text(decode_text(tensors.pop(CONFIG_KEY)))
    model = build(config, seed=0)
    model.load_state_dict(tensors)
    return model
