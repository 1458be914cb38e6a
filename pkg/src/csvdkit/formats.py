"""Binary container primitives: the FVEC dataset file and the tagged
extension sections that follow a model block.

All integers are little-endian. Every container carries a magic tag, a
format version, and a CRC-32 so that truncation and corruption surface as
typed errors instead of garbage results.
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .errors import DataError, FormatError

FVEC_MAGIC = b"FVEC"
FVEC_VERSION = 1
_FVEC_HEADER = struct.Struct("<4sIQIB")  # magic, version, M, N, dtype code

_DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_DTYPE_NAMES = {"f4": 0, "f8": 1, "float32": 0, "float64": 1}


def write_fvec(path, data, dtype: str = "f8") -> None:
    """Write a row-major matrix container: header, payload, trailing CRC-32."""
    arr = np.ascontiguousarray(data)
    if arr.ndim != 2:
        raise DataError(f"dataset must be 2-D, got ndim={arr.ndim}")
    if dtype not in _DTYPE_NAMES:
        raise DataError(f"unsupported dtype {dtype!r}")
    code = _DTYPE_NAMES[dtype]
    payload = np.asarray(arr, dtype=_DTYPE_CODES[code]).tobytes(order="C")
    header = _FVEC_HEADER.pack(FVEC_MAGIC, FVEC_VERSION, arr.shape[0], arr.shape[1], code)
    crc = zlib.crc32(header + payload)
    with open(path, "wb") as f:
        f.write(header)
        f.write(payload)
        f.write(struct.pack("<I", crc))


def read_fvec(path) -> np.ndarray:
    """Read and validate an FVEC container; returns float data as stored."""
    with open(path, "rb") as f:
        buf = f.read()
    if len(buf) < _FVEC_HEADER.size + 4:
        raise FormatError(f"{path}: truncated dataset file")
    magic, version, m, n, code = _FVEC_HEADER.unpack_from(buf, 0)
    if magic != FVEC_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {FVEC_MAGIC!r}")
    if version != FVEC_VERSION:
        raise FormatError(f"{path}: unsupported format version {version}")
    if code not in _DTYPE_CODES:
        raise FormatError(f"{path}: unknown dtype code {code}")
    dt = _DTYPE_CODES[code]
    expected = _FVEC_HEADER.size + m * n * dt.itemsize + 4
    if len(buf) != expected:
        raise FormatError(f"{path}: payload length mismatch ({len(buf)} vs {expected} bytes)")
    (stored_crc,) = struct.unpack_from("<I", buf, len(buf) - 4)
    if zlib.crc32(buf[:-4]) != stored_crc:
        raise FormatError(f"{path}: CRC mismatch")
    flat = np.frombuffer(buf, dtype=dt, count=m * n, offset=_FVEC_HEADER.size)
    return flat.reshape(m, n).copy()


# ---------------------------------------------------------------------------
# Tagged extension sections: [tag 4s][payload_len u64][payload][crc u32]
# ---------------------------------------------------------------------------

_SECTION_HEAD = struct.Struct("<4sQ")


def pack_section(tag: bytes, payload: bytes) -> bytes:
    if len(tag) != 4:
        raise ValueError("section tag must be 4 bytes")
    return _SECTION_HEAD.pack(tag, len(payload)) + payload + struct.pack("<I", zlib.crc32(payload))


def iter_sections(buf: bytes, offset: int):
    """Yield (tag, payload) pairs from ``offset`` to the end of the buffer."""
    pos = offset
    while pos < len(buf):
        if pos + _SECTION_HEAD.size > len(buf):
            raise FormatError("truncated section header")
        tag, length = _SECTION_HEAD.unpack_from(buf, pos)
        pos += _SECTION_HEAD.size
        if pos + length + 4 > len(buf):
            raise FormatError(f"truncated section {tag!r}")
        payload = buf[pos:pos + length]
        pos += length
        (crc,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        if zlib.crc32(payload) != crc:
            raise FormatError(f"section {tag!r}: CRC mismatch")
        yield tag, payload


# ---------------------------------------------------------------------------
# Studentization-statistics sidecar written next to ingested datasets
# ---------------------------------------------------------------------------

def stats_sidecar_path(dataset_path) -> Path:
    return Path(str(dataset_path) + ".stats.json")


def write_stats_sidecar(dataset_path, col_means, col_stds, degenerate) -> Path:
    path = stats_sidecar_path(dataset_path)
    doc = {
        "col_means": np.asarray(col_means, dtype=float).tolist(),
        "col_stds": np.asarray(col_stds, dtype=float).tolist(),
        "degenerate": np.asarray(degenerate, dtype=bool).astype(int).tolist(),
    }
    path.write_text(json.dumps(doc, indent=1) + "\n")
    return path
