"""Little-endian binary checkpoint format.

Layout::

    magic          4 bytes  b"STCK"
    version        u32
    meta_len       u32      length of the UTF-8 JSON header that follows
    meta           JSON     architecture hyperparameters, step, config hash, ...
    n_tensors      u32
    n_tensors times:
        name_len   u32
        name       UTF-8
        rank       u32
        dims       rank x u32
        data       prod(dims) x float32

Model weights are named after ``state_dict`` keys; optimizer moments live
under ``optim/<param name>/exp_avg`` and ``optim/<param name>/exp_avg_sq``.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path
from typing import Mapping

import numpy as np
import torch

MAGIC = b"STCK"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def write_checkpoint(path: str | Path, meta: Mapping, tensors: Mapping[str, torch.Tensor]) -> None:
    """Serialize atomically (temp file + rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = json.dumps(dict(meta), sort_keys=True).encode("utf-8")
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".ckpt-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(MAGIC)
            f.write(struct.pack("<II", FORMAT_VERSION, len(blob)))
            f.write(blob)
            f.write(struct.pack("<I", len(tensors)))
            for name, tensor in tensors.items():
                arr = tensor.detach().cpu().to(torch.float32).numpy()
                key = name.encode("utf-8")
                f.write(struct.pack("<I", len(key)))
                f.write(key)
                f.write(struct.pack("<I", arr.ndim))
                f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
                f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_checkpoint(path: str | Path) -> tuple[dict, dict[str, torch.Tensor]]:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic")
    pos = 4

    def take(fmt: str):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(data):
            raise CheckpointError(f"{path}: truncated")
        out = struct.unpack_from(fmt, data, pos)
        pos += size
        return out

    version, meta_len = take("<II")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    meta = json.loads(data[pos : pos + meta_len].decode("utf-8"))
    pos += meta_len
    (count,) = take("<I")
    tensors: dict[str, torch.Tensor] = {}
    for _ in range(count):
        (n,) = take("<I")
        name = data[pos : pos + n].decode("utf-8")
        pos += n
        (rank,) = take("<I")
        dims = take(f"<{rank}I") if rank else ()
        numel = int(np.prod(dims)) if rank else 1
        if pos + 4 * numel > len(data):
            raise CheckpointError(f"{path}: truncated tensor {name}")
        arr = np.frombuffer(data, dtype="<f4", count=numel, offset=pos).reshape(dims)
        pos += 4 * numel
        tensors[name] = torch.from_numpy(arr.astype(np.float32))
    if pos != len(data):
        raise CheckpointError(f"{path}: {len(data) - pos} trailing bytes")
    return meta, tensors
