"""Binary weight container.

Layout (little-endian)::

    "AMRI" | version u32 | count u32
    per tensor: name_len u16 | name utf-8 | dtype u8 | rank u8 | dims u64*rank | payload
    crc32 u32 over every preceding byte
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

MAGIC = b"AMRI"
VERSION = 1
DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
DTYPE_TAGS = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


class WeightFileError(ValueError):
    pass


def encode(arrays: dict[str, np.ndarray]) -> bytes:
    out = [MAGIC, struct.pack("<II", VERSION, len(arrays))]
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        if arr.dtype not in DTYPE_TAGS:
            raise WeightFileError(f"{name}: unsupported dtype {arr.dtype}")
        tag = DTYPE_TAGS[arr.dtype]
        raw_name = name.encode("utf-8")
        out.append(struct.pack("<H", len(raw_name)) + raw_name)
        out.append(struct.pack("<BB", tag, arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype=DTYPES[tag]).tobytes())
    body = b"".join(out)
    return body + struct.pack("<I", zlib.crc32(body))


def decode(blob: bytes) -> dict[str, np.ndarray]:
    if len(blob) < 16 or blob[:4] != MAGIC:
        raise WeightFileError("not an AMRI weight file")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    actual = zlib.crc32(body)
    if actual != crc:
        raise WeightFileError(f"CRC mismatch: stored {crc:08x}, computed {actual:08x}")
    version, count = struct.unpack_from("<II", body, 4)
    if version != VERSION:
        raise WeightFileError(f"unsupported format version {version}")
    pos = 12
    out: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<H", body, pos)
            pos += 2
            name = body[pos : pos + n].decode("utf-8")
            pos += n
            tag, rank = struct.unpack_from("<BB", body, pos)
            pos += 2
            dims = struct.unpack_from(f"<{rank}Q", body, pos)
            pos += 8 * rank
            dtype = DTYPES[tag]
            size = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
            if pos + size > len(body):
                raise WeightFileError(f"{name}: truncated payload")
            out[name] = np.frombuffer(body, dtype=dtype, count=size // dtype.itemsize, offset=pos).reshape(dims).astype(dtype.newbyteorder("="))
            pos += size
    except (struct.error, KeyError, UnicodeDecodeError) as e:
        raise WeightFileError(f"malformed weight file: {e}") from None
    if pos != len(body):
        raise WeightFileError("trailing bytes after last tensor")
    return out


def save(path, arrays: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(encode(arrays))


def load(path) -> dict[str, np.ndarray]:
    return decode(Path(path).read_bytes())
