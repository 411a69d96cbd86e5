"""Binary embedding file layout shared with the training package.

Header: 4-byte magic "SYMC", uint32 format version (1), uint64 row count,
uint32 dimension, all little-endian, followed by count * dim float32 values
in row-major order.  Row r of the payload belongs to train interaction r.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"SYMC"
VERSION = 1
_HEADER = struct.Struct("<4sIQI")


class FormatError(Exception):
    """Raised for malformed or inconsistent embedding files."""


def write_embedding_file(path: str | Path, rows: np.ndarray) -> None:
    rows = np.asarray(rows)
    if rows.ndim != 2:
        raise FormatError(f"need a 2-d matrix, got shape {rows.shape}")
    if not np.isfinite(rows).all():
        raise FormatError("non-finite value in embedding payload")
    payload = np.ascontiguousarray(rows, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, rows.shape[0], rows.shape[1]))
        fh.write(payload.tobytes())


def read_embedding_file(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: file shorter than the {_HEADER.size}-byte header")
    magic, version, count, dim = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    need = count * dim * 4
    if len(raw) - _HEADER.size != need:
        raise FormatError(
            f"{path}: truncated payload, need {need} bytes, have {len(raw) - _HEADER.size}"
        )
    data = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size)
    out = data.reshape(count, dim).astype(np.float32)
    if not np.isfinite(out).all():
        raise FormatError(f"{path}: non-finite value in payload")
    return out
