"""Binary checkpoint format.

Layout (little endian)::

    b"APTM" | version u32 | entry count u32
    per entry: name length u16 | utf-8 name | dtype u8 | rank u8 | extents u32 * rank | payload
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"APTM"
VERSION = 1
DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODE_OF = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


class CheckpointError(ValueError):
    pass


def dumps(entries: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(entries))]
    for name, value in entries.items():
        arr = np.asarray(value)
        if arr.dtype not in _CODE_OF:
            arr = arr.astype(np.float32)
        code = _CODE_OF[arr.dtype]
        raw_name = name.encode("utf-8")
        if len(raw_name) > 0xFFFF:
            raise CheckpointError(f"entry name too long: {name[:40]}...")
        parts.append(struct.pack("<H", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack("<BB", code, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=DTYPE_CODES[code]).tobytes())
    return b"".join(parts)


def loads(buf: bytes) -> dict[str, np.ndarray]:
    if buf[:4] != MAGIC:
        raise CheckpointError("not an APTM checkpoint (bad magic)")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos = 12
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        name = buf[pos:pos + n].decode("utf-8")
        pos += n
        code, rank = struct.unpack_from("<BB", buf, pos)
        pos += 2
        if code not in DTYPE_CODES:
            raise CheckpointError(f"unknown dtype code {code} for {name}")
        shape = struct.unpack_from(f"<{rank}I", buf, pos)
        pos += 4 * rank
        dtype = DTYPE_CODES[code]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        if pos + nbytes > len(buf):
            raise CheckpointError(f"truncated payload for {name}")
        out[name] = np.frombuffer(buf, dtype=dtype, count=nbytes // dtype.itemsize,
                                  offset=pos).reshape(shape).astype(dtype.newbyteorder("="))
        pos += nbytes
    if pos != len(buf):
        raise CheckpointError("trailing bytes after last entry")
    return out


def save(path, entries: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(dumps(entries))


def load(path) -> dict[str, np.ndarray]:
    return loads(Path(path).read_bytes())
