"""Versioned binary checkpoint container.

Layout (all integers little-endian)::

    b"MTS2" | u32 version | u32 len | kind (utf-8) | u32 len | meta (JSON, utf-8)
    | u32 n_tensors | n x (u32 len | name | u8 dtype | u32 ndim | ndim x u64 dim | raw data)
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

MAGIC = b"MTS2"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1, np.dtype("int64"): 2}


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    kind: str
    config: dict
    step: int
    tensors: dict[str, torch.Tensor]
    meta: dict = field(default_factory=dict)

    def prefixed(self, prefix: str) -> dict[str, torch.Tensor]:
        return {k[len(prefix):]: v for k, v in self.tensors.items() if k.startswith(prefix)}


def dumps_checkpoint(ck: Checkpoint) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    for blob in (ck.kind.encode(), json.dumps({"config": ck.config, "step": ck.step, **ck.meta},
                                              sort_keys=True).encode()):
        buf.write(struct.pack("<I", len(blob)))
        buf.write(blob)
    buf.write(struct.pack("<I", len(ck.tensors)))
    for name in sorted(ck.tensors):
        arr = ck.tensors[name].detach().cpu().numpy()
        if arr.dtype not in _CODES:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for {name}")
        nb = name.encode()
        buf.write(struct.pack("<I", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<BI", _CODES[arr.dtype], arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype=_DTYPES[_CODES[arr.dtype]]).tobytes())
    return buf.getvalue()


def loads_checkpoint(data: bytes) -> Checkpoint:
    view = memoryview(data)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError(f"truncated checkpoint at byte {pos}")
        out = view[pos:pos + n]
        pos += n
        return out

    def u32() -> int:
        return struct.unpack("<I", take(4))[0]

    if bytes(take(4)) != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    version = u32()
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    kind = bytes(take(u32())).decode()
    meta = json.loads(bytes(take(u32())).decode())
    tensors = {}
    for _ in range(u32()):
        name = bytes(take(u32())).decode()
        code, ndim = struct.unpack("<BI", take(5))
        if code not in _DTYPES:
            raise CheckpointError(f"unknown dtype code {code} for {name}")
        shape = struct.unpack(f"<{ndim}Q", take(8 * ndim))
        dt = _DTYPES[code]
        n = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(bytes(take(n * dt.itemsize)), dtype=dt).reshape(shape)
        tensors[name] = torch.from_numpy(arr.copy())
    if pos != len(view):
        raise CheckpointError("trailing bytes after last tensor")
    config = meta.pop("config")
    step = meta.pop("step")
    return Checkpoint(kind, config, step, tensors, meta)


def save_checkpoint(ck: Checkpoint, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(dumps_checkpoint(ck))
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> Checkpoint:
    return loads_checkpoint(Path(path).read_bytes())
