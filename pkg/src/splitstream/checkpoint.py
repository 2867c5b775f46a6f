"""Checkpoint serialization.

Layout (all integers little-endian):
    magic "TCKP" | version u8 | count u32 | records...
    record: name_len u16 | name utf-8 | rank u8 | dims u32 * rank | f32 payload

Round-trips are bit-exact; payloads are written in row-major order.
"""

from __future__ import annotations

import struct
from typing import Mapping

import numpy as np

from .tensor import Tensor

MAGIC = b"TCKP"
VERSION = 1


class CheckpointError(ValueError):
    pass


def dump_checkpoint(tensors: Mapping[str, "np.ndarray | Tensor"]) -> bytes:
    out = [MAGIC, struct.pack("<BI", VERSION, len(tensors))]
    for name, t in tensors.items():
        arr = np.asarray(t.data if isinstance(t, Tensor) else t, dtype="<f4", order="C")
        enc = name.encode("utf-8")
        out.append(struct.pack("<H", len(enc)))
        out.append(enc)
        out.append(struct.pack("<B", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(arr.tobytes())
    return b"".join(out)


def parse_checkpoint(blob: bytes) -> dict[str, np.ndarray]:
    view = memoryview(blob)
    if len(view) < 9 or bytes(view[:4]) != MAGIC:
        raise CheckpointError("bad checkpoint magic")
    version, count = struct.unpack_from("<BI", view, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos = 9
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        if pos + 2 > len(view):
            raise CheckpointError("truncated checkpoint (name length)")
        (nlen,) = struct.unpack_from("<H", view, pos)
        pos += 2
        if pos + nlen + 1 > len(view):
            raise CheckpointError("truncated checkpoint (name)")
        name = bytes(view[pos : pos + nlen]).decode("utf-8")
        pos += nlen
        rank = view[pos]
        pos += 1
        if pos + 4 * rank > len(view):
            raise CheckpointError("truncated checkpoint (dims)")
        dims = struct.unpack_from(f"<{rank}I", view, pos)
        pos += 4 * rank
        nbytes = 4 * int(np.prod(dims, dtype=np.int64)) if rank else 4
        if pos + nbytes > len(view):
            raise CheckpointError("truncated checkpoint (payload)")
        arr = np.frombuffer(view[pos : pos + nbytes], dtype="<f4").reshape(dims).copy()
        pos += nbytes
        out[name] = arr
    return out


def save_checkpoint(path, tensors: Mapping[str, "np.ndarray | Tensor"]) -> None:
    with open(path, "wb") as f:
        f.write(dump_checkpoint(tensors))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        return parse_checkpoint(f.read())
