"""Versioned container of named tensors.

Layout (all integers little-endian)::

    b"DVCK"                magic
    u32                    format version
    u32                    header length in bytes
    header                 UTF-8 JSON: {"version", "arch", "arch_hash", "seeds", "meta", "tensors": [names]}
    repeated per tensor, in header order:
        u16 name length, name (UTF-8)
        u8 ndim, u32 * ndim shape
        f32 * prod(shape) data
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"DVCK"
VERSION = 1


class CheckpointError(ValueError):
    pass


def arch_hash(arch: dict) -> str:
    return hashlib.sha256(json.dumps(arch, sort_keys=True).encode()).hexdigest()[:16]


def save_checkpoint(path, tensors: dict[str, np.ndarray], arch: dict, seeds: dict | None = None,
                    meta: dict | None = None) -> None:
    names = list(tensors)
    header = {
        "version": VERSION,
        "arch": arch,
        "arch_hash": arch_hash(arch),
        "seeds": seeds or {},
        "meta": meta or {},
        "tensors": names,
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<II", VERSION, len(hbytes)), hbytes]
    for name in names:
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        nb = name.encode()
        parts.append(struct.pack("<H", len(nb)) + nb)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    """Return ``(tensors, header)``; tensors are widened to float64."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    buf = path.read_bytes()
    if buf[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {buf[:4]!r}")
    version, hlen = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    off = 12
    header = json.loads(buf[off:off + hlen].decode())
    off += hlen
    tensors = {}
    for expected in header["tensors"]:
        (nlen,) = struct.unpack_from("<H", buf, off)
        off += 2
        name = buf[off:off + nlen].decode()
        off += nlen
        if name != expected:
            raise CheckpointError(f"{path}: tensor {name!r} out of order, expected {expected!r}")
        (ndim,) = struct.unpack_from("<B", buf, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", buf, off)
        off += 4 * ndim
        n = int(np.prod(shape)) if ndim else 1
        if off + 4 * n > len(buf):
            raise CheckpointError(f"{path}: truncated data for tensor {name!r}")
        tensors[name] = np.frombuffer(buf, dtype="<f4", count=n, offset=off).reshape(shape).astype(np.float64)
        off += 4 * n
    if header["arch_hash"] != arch_hash(header["arch"]):
        raise CheckpointError(f"{path}: architecture hash mismatch")
    return tensors, header
