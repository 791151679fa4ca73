"""Binary state-file format shared by the particle store and observation files.

Layout (all little-endian)::

    offset  size  field
    0       4     magic  b"EPFS"
    4       2     format version (1)
    6       2     reserved (0)
    8       8     cycle
    16      8     index
    24      8     d_x (number of float64 entries)
    32      8*d_x payload
    32+8d   4     CRC-32 of bytes [0, 32+8d)
"""

from __future__ import annotations

import struct
import zlib

import numpy as np

from .errors import ChecksumError, StateFormatError

MAGIC = b"EPFS"
VERSION = 1
_HEADER = struct.Struct("<4sHHQQQ")
HEADER_SIZE = _HEADER.size  # 32
_CRC = struct.Struct("<I")


def encode_state(cycle: int, index: int, values) -> bytes:
    arr = np.ascontiguousarray(values, dtype="<f8")
    if arr.ndim != 1:
        raise StateFormatError("state must be a vector")
    body = _HEADER.pack(MAGIC, VERSION, 0, cycle, index, arr.size) + arr.tobytes()
    return body + _CRC.pack(zlib.crc32(body))


def decode_state(blob: bytes) -> tuple[int, int, np.ndarray]:
    """Return ``(cycle, index, values)``; raises on any corruption."""
    if len(blob) < HEADER_SIZE + _CRC.size:
        raise StateFormatError("state file truncated")
    body, (crc,) = blob[:-4], _CRC.unpack(blob[-4:])
    if zlib.crc32(body) != crc:
        raise ChecksumError("state checksum mismatch")
    magic, version, _, cycle, index, d_x = _HEADER.unpack_from(body)
    if magic != MAGIC:
        raise StateFormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise StateFormatError(f"unsupported state format version {version}")
    if len(body) != HEADER_SIZE + 8 * d_x:
        raise StateFormatError("payload length does not match header")
    values = np.frombuffer(body, dtype="<f8", offset=HEADER_SIZE, count=d_x).astype(np.float64)
    return cycle, index, values
