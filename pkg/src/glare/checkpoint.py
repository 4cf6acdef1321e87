"""Single-file binary checkpoints.

Layout (little-endian)::

    b"GLRC"  u32 version
    u32 meta_len, meta_len bytes of UTF-8 JSON metadata
    u32 count, then per tensor:
        u16 name_len, name, u8 dtype code, u8 rank, rank x u32 dims, u64 payload offset
    u64 payload_len, payload (raw float32 values, tensors back to back)
    u32 CRC-32 of every preceding byte
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

MAGIC = b"GLRC"
VERSION = 1
DTYPE_CODES = {1: np.dtype("<f4")}
CODE_OF = {np.dtype("<f4"): 1}


class CheckpointError(ValueError):
    pass


def checkpoint_save(path, named_tensors: dict[str, np.ndarray], meta: dict | None = None) -> Path:
    names = list(named_tensors)
    if len(set(names)) != len(names):
        raise CheckpointError("duplicate tensor names")
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode()
    head = bytearray(MAGIC)
    head += struct.pack("<I", VERSION)
    head += struct.pack("<I", len(meta_bytes)) + meta_bytes
    head += struct.pack("<I", len(names))
    payload = bytearray()
    for name in names:
        arr = np.asarray(named_tensors[name], dtype="<f4")
        nb = name.encode()
        head += struct.pack("<H", len(nb)) + nb
        head += struct.pack("<BB", 1, arr.ndim)
        head += struct.pack(f"<{arr.ndim}I", *arr.shape)
        head += struct.pack("<Q", len(payload))
        payload += arr.tobytes()
    blob = bytes(head) + struct.pack("<Q", len(payload)) + bytes(payload)
    blob += struct.pack("<I", zlib.crc32(blob))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(blob)
    tmp.replace(path)
    return path


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise CheckpointError("truncated checkpoint")
        out = self.blob[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def checkpoint_load(path) -> tuple[dict[str, np.ndarray], dict]:
    blob = Path(path).read_bytes()
    if len(blob) < 8 or blob[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a GLRC checkpoint")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError(f"{path}: checksum mismatch (corrupted or truncated)")
    r = _Reader(body)
    r.take(4)
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    (meta_len,) = r.unpack("<I")
    meta = json.loads(r.take(meta_len).decode())
    (count,) = r.unpack("<I")
    index = []
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode()
        code, rank = r.unpack("<BB")
        if code not in DTYPE_CODES:
            raise CheckpointError(f"{name}: unknown dtype code {code}")
        dims = r.unpack(f"<{rank}I") if rank else ()
        (offset,) = r.unpack("<Q")
        index.append((name, DTYPE_CODES[code], tuple(dims), offset))
    (payload_len,) = r.unpack("<Q")
    payload = r.take(payload_len)
    if r.pos != len(body):
        raise CheckpointError("trailing bytes after payload")
    tensors = {}
    for name, dtype, dims, offset in index:
        nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
        if offset + nbytes > payload_len:
            raise CheckpointError(f"{name}: payload too short")
        tensors[name] = np.frombuffer(payload, dtype=dtype, count=nbytes // dtype.itemsize, offset=offset).reshape(dims).copy()
    if len(tensors) != count:
        raise CheckpointError("duplicate tensor names in checkpoint")
    return tensors, meta


def check_names(expected, found, what: str = "checkpoint") -> None:
    """Raise with the full diff if two name sets differ."""
    expected, found = set(expected), set(found)
    if expected != found:
        missing = sorted(expected - found)
        extra = sorted(found - expected)
        raise CheckpointError(f"{what}: parameter names differ; missing={missing} unexpected={extra}")
