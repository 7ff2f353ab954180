"""Binary checkpoint files.

Layout (little-endian): ``b"EQCK"``, u16 version, u64 iteration, u32 blob count,
then per blob: u16 name length, UTF-8 name, u8 ndim, ndim x u32 shape, f64 values.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from ..errors import CheckpointFormatError

MAGIC = b"EQCK"
VERSION = 1
_HEAD = struct.Struct("<4sHQI")


def write_checkpoint(path, iteration: int, blobs: dict[str, np.ndarray]) -> None:
    parts = [_HEAD.pack(MAGIC, VERSION, iteration, len(blobs))]
    for name, arr in blobs.items():
        raw = name.encode("utf-8")
        arr = np.ascontiguousarray(arr, dtype="<f8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(arr.tobytes())
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(b"".join(parts))
    tmp.replace(path)


def read_checkpoint(path) -> tuple[int, dict[str, np.ndarray]]:
    blob = Path(path).read_bytes()
    try:
        magic, version, iteration, count = _HEAD.unpack_from(blob, 0)
        if magic != MAGIC:
            raise CheckpointFormatError(f"{path}: bad magic {magic!r}")
        if version != VERSION:
            raise CheckpointFormatError(f"{path}: unsupported version {version}")
        off = _HEAD.size
        out = {}
        for _ in range(count):
            (n,) = struct.unpack_from("<H", blob, off)
            off += 2
            name = blob[off:off + n].decode("utf-8")
            off += n
            (ndim,) = struct.unpack_from("<B", blob, off)
            off += 1
            shape = struct.unpack_from(f"<{ndim}I", blob, off)
            off += 4 * ndim
            size = int(np.prod(shape))
            if off + 8 * size > len(blob):
                raise CheckpointFormatError(f"{path}: truncated blob {name!r}")
            out[name] = np.frombuffer(blob, "<f8", size, off).reshape(shape).astype(np.float64)
            off += 8 * size
    except (struct.error, UnicodeDecodeError) as exc:
        raise CheckpointFormatError(f"{path}: {exc}") from exc
    if off != len(blob):
        raise CheckpointFormatError(f"{path}: {len(blob) - off} trailing bytes")
    return iteration, out


def save_networks(path, iteration: int, gen, disc) -> None:
    blobs = {f"gen.{k}": v.data for k, v in gen.params.items()}
    blobs.update({f"disc.{k}": v.data for k, v in disc.params.items()})
    write_checkpoint(path, iteration, blobs)


def load_networks(path, gen, disc=None) -> int:
    iteration, blobs = read_checkpoint(path)
    gen.load_state_dict({k[4:]: v for k, v in blobs.items() if k.startswith("gen.")})
    if disc is not None:
        disc.load_state_dict({k[5:]: v for k, v in blobs.items() if k.startswith("disc.")})
    return iteration
