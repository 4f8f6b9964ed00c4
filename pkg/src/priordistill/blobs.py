"""Raw little-endian fp32 tensor blobs with a fixed 32-byte header.

Header layout (little endian)::

    4s   magic  b"PDB1"
    B    dtype code (1 = float32)
    B    rank (<= 6)
    2x   padding
    6I   dims, unused trailing dims are zero

Payload length is always ``4 * prod(dims)`` so storage audits reduce to
``file_size - HEADER_SIZE``.
"""

from __future__ import annotations

import hashlib
import struct
from pathlib import Path

import numpy as np

from .errors import CorruptionError, ShapeError

MAGIC = b"PDB1"
HEADER_SIZE = 32
DTYPE_F32 = 1
MAX_RANK = 6
_HEADER = struct.Struct("<4sBB2x6I")
assert _HEADER.size == HEADER_SIZE


def encode_header(shape: tuple[int, ...]) -> bytes:
    if len(shape) > MAX_RANK:
        raise ShapeError(f"rank {len(shape)} exceeds blob limit {MAX_RANK}")
    dims = list(shape) + [0] * (MAX_RANK - len(shape))
    return _HEADER.pack(MAGIC, DTYPE_F32, len(shape), *dims)


def decode_header(raw: bytes) -> tuple[int, ...]:
    if len(raw) < HEADER_SIZE:
        raise CorruptionError("truncated blob header")
    magic, dtype, rank, *dims = _HEADER.unpack(raw[:HEADER_SIZE])
    if magic != MAGIC:
        raise CorruptionError(f"bad blob magic {magic!r}")
    if dtype != DTYPE_F32:
        raise CorruptionError(f"unsupported dtype code {dtype}")
    if rank > MAX_RANK:
        raise CorruptionError(f"bad rank {rank}")
    return tuple(dims[:rank])


def to_bytes(array) -> bytes:
    arr = np.asarray(array, dtype="<f4", order="C")  # ascontiguousarray would promote 0-d to 1-d
    return encode_header(arr.shape) + arr.tobytes()


def from_bytes(raw: bytes) -> np.ndarray:
    shape = decode_header(raw)
    count = int(np.prod(shape, dtype=np.int64)) if shape else 1
    payload = raw[HEADER_SIZE:]
    if len(payload) != 4 * count:
        raise CorruptionError(f"payload is {len(payload)} bytes, header implies {4 * count}")
    return np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float32)


def write_blob(path: Path, array) -> tuple[tuple[int, ...], int, str]:
    """Write ``array`` and return ``(shape, payload_bytes, sha256)``."""
    raw = to_bytes(array)
    Path(path).write_bytes(raw)
    shape = decode_header(raw)
    return shape, len(raw) - HEADER_SIZE, hashlib.sha256(raw).hexdigest()


def read_blob(path: Path, sha256: str | None = None, component: str | None = None) -> np.ndarray:
    raw = Path(path).read_bytes()
    if sha256 is not None and hashlib.sha256(raw).hexdigest() != sha256:
        raise CorruptionError(f"checksum mismatch in component {component or path}", component)
    try:
        return from_bytes(raw)
    except CorruptionError as exc:
        raise CorruptionError(f"{component or path}: {exc}", component) from exc


def payload_size(path: Path) -> int:
    return Path(path).stat().st_size - HEADER_SIZE
