"""Binary file formats: the embeddings container and the checkpoint container.

Both formats are little-endian, fully specified by their own bytes, and
written so that write -> read -> write is byte-identical.

Embeddings ("GFEM"): magic, u32 version, u32 count, u32 dim, then
count*dim float32 values. File length must be exactly 16 + 4*count*dim.

Checkpoint ("GFCK"): magic, u32 version, u64 manifest length, manifest JSON
(sorted keys), u32 block count, then named blocks. Each block is
u32 name length, name bytes, u8 itemsize (4 or 8), u32 ndim, u32 dims,
raw little-endian floats.
"""

from __future__ import annotations

import json
import os
import struct

import numpy as np

from .errors import DataFormatError, InvalidArgument

EMBEDDINGS_MAGIC = b"GFEM"
EMBEDDINGS_VERSION = 1
CHECKPOINT_MAGIC = b"GFCK"
CHECKPOINT_VERSION = 1


def _atomic_write(path: str, payload: bytes) -> None:
    # Write-then-rename so a crash never leaves a half-written container.
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(payload)
    os.replace(tmp, path)


def write_embeddings(path: str, matrix: np.ndarray) -> None:
    matrix = np.asarray(matrix)
    if matrix.ndim != 2:
        raise InvalidArgument(f"embeddings must be 2-D, got shape {matrix.shape}")
    count, dim = matrix.shape
    header = EMBEDDINGS_MAGIC + struct.pack("<III", EMBEDDINGS_VERSION, count, dim)
    _atomic_write(path, header + np.ascontiguousarray(matrix, dtype="<f4").tobytes())


def read_embeddings(path: str) -> np.ndarray:
    try:
        with open(path, "rb") as f:
            blob = f.read()
    except FileNotFoundError as e:
        raise DataFormatError(f"embeddings file not found: {path}") from e
    if len(blob) < 16 or blob[:4] != EMBEDDINGS_MAGIC:
        raise DataFormatError(f"{path} is not an embeddings file")
    version, count, dim = struct.unpack("<III", blob[4:16])
    if version != EMBEDDINGS_VERSION:
        raise DataFormatError(f"unsupported embeddings version {version}")
    expected = 16 + 4 * count * dim
    if len(blob) != expected:
        raise DataFormatError(
            f"{path} length {len(blob)} != expected {expected} for {count}x{dim}")
    data = np.frombuffer(blob, dtype="<f4", offset=16)
    return data.reshape(count, dim).copy()


_ITEMSIZE_DTYPE = {4: "<f4", 8: "<f8"}


def write_checkpoint(path: str, manifest: dict, blocks: dict[str, np.ndarray]) -> None:
    manifest_bytes = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [CHECKPOINT_MAGIC,
             struct.pack("<I", CHECKPOINT_VERSION),
             struct.pack("<Q", len(manifest_bytes)),
             manifest_bytes,
             struct.pack("<I", len(blocks))]
    for name, arr in blocks.items():
        arr = np.asarray(arr)
        if arr.dtype.itemsize not in _ITEMSIZE_DTYPE:
            raise InvalidArgument(f"block {name}: unsupported dtype {arr.dtype}")
        name_bytes = name.encode("utf-8")
        parts.append(struct.pack("<I", len(name_bytes)))
        parts.append(name_bytes)
        parts.append(struct.pack("<B", arr.dtype.itemsize))
        parts.append(struct.pack("<I", arr.ndim))
        parts.extend(struct.pack("<I", d) for d in arr.shape)
        parts.append(np.ascontiguousarray(arr, dtype=_ITEMSIZE_DTYPE[arr.dtype.itemsize]).tobytes())
    _atomic_write(path, b"".join(parts))


class _Reader:
    def __init__(self, blob: bytes, path: str):
        self.blob = blob
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise DataFormatError(f"{self.path} is truncated")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_checkpoint(path: str) -> tuple[dict, dict[str, np.ndarray]]:
    try:
        with open(path, "rb") as f:
            blob = f.read()
    except FileNotFoundError as e:
        raise DataFormatError(f"checkpoint not found: {path}") from e
    r = _Reader(blob, path)
    if r.take(4) != CHECKPOINT_MAGIC:
        raise DataFormatError(f"{path} is not a checkpoint file")
    (version,) = r.unpack("<I")
    if version != CHECKPOINT_VERSION:
        raise DataFormatError(f"unsupported checkpoint version {version}")
    (manifest_len,) = r.unpack("<Q")
    try:
        manifest = json.loads(r.take(manifest_len).decode("utf-8"))
    except json.JSONDecodeError as e:
        raise DataFormatError(f"{path} manifest is not valid JSON") from e
    (n_blocks,) = r.unpack("<I")
    blocks: dict[str, np.ndarray] = {}
    for _ in range(n_blocks):
        (name_len,) = r.unpack("<I")
        name = r.take(name_len).decode("utf-8")
        (itemsize,) = r.unpack("<B")
        if itemsize not in _ITEMSIZE_DTYPE:
            raise DataFormatError(f"{path}: block {name} has bad itemsize {itemsize}")
        (ndim,) = r.unpack("<I")
        shape = tuple(r.unpack("<" + "I" * ndim)) if ndim else ()
        n_items = int(np.prod(shape)) if shape else 1
        raw = r.take(itemsize * n_items)
        arr = np.frombuffer(raw, dtype=_ITEMSIZE_DTYPE[itemsize]).reshape(shape).copy()
        blocks[name] = arr
    if r.pos != len(blob):
        raise DataFormatError(f"{path} has {len(blob) - r.pos} trailing bytes")
    return manifest, blocks
