"""Binary checkpoint container for model parameters and optimizer state.

Layout (all little-endian): magic "RSDL", u16 version, u16 task-tag length
+ bytes, u32 entry count; then per entry u16 name length + bytes, u8 ndim,
u32 dims, raw f32 data. Adam moment/step entries are stored alongside the
parameters under ``opt.*`` names so training can resume.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from ..errors import FormatError

_MAGIC = b"RSDL"
_VERSION = 1


def save_checkpoint(path, task_tag: str, params, optimizer=None, extra=None) -> None:
    """``extra`` maps names to arrays (batch-norm buffers, norm stats, ...)."""
    entries = [(p.name, p.data) for p in params]
    if extra:
        entries.extend(sorted(extra.items()))
    if optimizer is not None:
        entries.extend(optimizer.state_entries())

    chunks = [_MAGIC, struct.pack("<H", _VERSION)]
    tag = task_tag.encode()
    chunks.append(struct.pack("<H", len(tag)))
    chunks.append(tag)
    chunks.append(struct.pack("<I", len(entries)))
    for name, data in entries:
        nb = name.encode()
        a = np.ascontiguousarray(data, dtype="<f4")
        chunks.append(struct.pack("<H", len(nb)))
        chunks.append(nb)
        chunks.append(struct.pack("<B", a.ndim))
        chunks.append(struct.pack(f"<{a.ndim}I", *a.shape))
        chunks.append(a.tobytes())
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(b"".join(chunks))
    tmp.replace(path)


def load_checkpoint(path):
    """Returns (task_tag, {name: float32 array})."""
    data = Path(path).read_bytes()
    if len(data) < 8 or data[:4] != _MAGIC:
        raise FormatError(f"{path}: not a checkpoint file")
    (version,) = struct.unpack_from("<H", data, 4)
    if version != _VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    (taglen,) = struct.unpack_from("<H", data, 6)
    pos = 8
    task_tag = data[pos : pos + taglen].decode()
    pos += taglen
    (count,) = struct.unpack_from("<I", data, pos)
    pos += 4

    entries = {}
    for _ in range(count):
        (namelen,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos : pos + namelen].decode()
        pos += namelen
        (ndim,) = struct.unpack_from("<B", data, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", data, pos)
        pos += 4 * ndim
        n = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(data, dtype="<f4", count=n, offset=pos).reshape(shape)
        pos += 4 * n
        entries[name] = arr.copy()
    if pos != len(data):
        raise FormatError(f"{path}: trailing bytes in checkpoint")
    return task_tag, entries


def assign_params(params, entries: dict) -> None:
    """Copy checkpoint entries into matching Param objects (by name)."""
    for p in params:
        if p.name not in entries:
            raise FormatError(f"checkpoint missing parameter {p.name}")
        src = entries[p.name]
        if tuple(src.shape) != tuple(p.data.shape):
            raise FormatError(
                f"{p.name}: checkpoint shape {src.shape} != model shape {p.data.shape}"
            )
        p.data[...] = src.astype(p.data.dtype)
