"""``UNFK`` checkpoint archives.

Layout, all little-endian::

    b"UNFK"  version:u16  count:u32
    count x { path_len:u32  path:utf8  rank:u8  dims:rank*u32  payload:prod(dims)*f32 }

Entries are sorted by path. Values are stored as float32.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Dict, Mapping

import numpy as np

MAGIC = b"UNFK"
VERSION = 1


class CheckpointError(ValueError):
    pass


def encode(tensors: Mapping[str, np.ndarray]) -> bytes:
    out = [MAGIC, struct.pack("<HI", VERSION, len(tensors))]
    for path in sorted(tensors):
        arr = np.asarray(tensors[path], dtype="<f4")
        name = path.encode("utf-8")
        if arr.ndim > 255:
            raise CheckpointError(f"{path}: rank {arr.ndim} does not fit in u8")
        out.append(struct.pack("<I", len(name)))
        out.append(name)
        out.append(struct.pack("<B", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(arr.tobytes(order="C"))
    return b"".join(out)


def decode(blob: bytes) -> Dict[str, np.ndarray]:
    if blob[:4] != MAGIC:
        raise CheckpointError("not an UNFK archive (bad magic)")
    try:
        version, count = struct.unpack_from("<HI", blob, 4)
        if version != VERSION:
            raise CheckpointError(f"unsupported archive version {version}")
        pos = 10
        out: Dict[str, np.ndarray] = {}
        last = None
        for _ in range(count):
            (n,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            path = blob[pos:pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<B", blob, pos)
            pos += 1
            dims = struct.unpack_from(f"<{rank}I", blob, pos)
            pos += 4 * rank
            size = int(np.prod(dims, dtype=np.int64))
            if pos + 4 * size > len(blob):
                raise CheckpointError(f"{path}: payload truncated")
            out[path] = np.frombuffer(blob, dtype="<f4", count=size, offset=pos).reshape(dims).copy()
            pos += 4 * size
            if last is not None and path <= last:
                raise CheckpointError(f"entries not sorted/unique at {path!r}")
            last = path
    except struct.error as err:
        raise CheckpointError(f"archive truncated: {err}") from None
    if pos != len(blob):
        raise CheckpointError(f"{len(blob) - pos} trailing bytes after {count} entries")
    return out


def save(tensors: Mapping[str, np.ndarray], path) -> None:
    Path(path).write_bytes(encode(tensors))


def load(path) -> Dict[str, np.ndarray]:
    return decode(Path(path).read_bytes())


def model_state(model, buffers: bool = False) -> Dict[str, np.ndarray]:
    """Parameter arrays by dotted path; optionally BN running statistics too."""
    state = {name: p.data for name, p in model.named_parameters()}
    if buffers:
        state.update(dict(model.named_buffers()))
    return state


def load_into(model, tensors: Mapping[str, np.ndarray], strict: bool = True) -> None:
    params = dict(model.named_parameters())
    buffers = dict(model.named_buffers())
    missing = sorted(set(params) - set(tensors))
    unknown = sorted(set(tensors) - set(params) - set(buffers))
    if strict and (missing or unknown):
        raise CheckpointError(f"state mismatch; missing {missing[:5]}, unexpected {unknown[:5]}")
    for name, arr in tensors.items():
        if name in params:
            p = params[name]
            if p.shape != arr.shape:
                raise CheckpointError(f"{name}: shape {arr.shape} != {p.shape}")
            p.data = arr.astype(p.dtype)
        elif name in buffers:
            buffers[name][...] = arr


__all__ = ["CheckpointError", "MAGIC", "VERSION", "decode", "encode", "load", "load_into", "model_state", "save"]
