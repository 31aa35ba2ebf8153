"""Raw tensor file format "ATNS".

Layout: magic ``41 54 4E 53``, version byte ``01``, dtype byte
(``01`` = float32, ``02`` = float64), rank as uint16 little-endian,
one uint32 little-endian extent per axis, then the payload as
little-endian row-major scalars.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"ATNS"
VERSION = 1
_DTYPE_CODES = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}
_CODE_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}


class AtnsFormatError(ValueError):
    """File does not conform to the ATNS layout."""


def write_atns(path, array: np.ndarray) -> None:
    arr = np.ascontiguousarray(array)
    if arr.dtype not in _DTYPE_CODES:
        arr = arr.astype(np.float32)
    header = MAGIC + struct.pack("<BB", VERSION, _DTYPE_CODES[arr.dtype])
    header += struct.pack("<H", arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape) if arr.ndim else b""
    payload = arr.astype(arr.dtype.newbyteorder("<")).tobytes(order="C")
    Path(path).write_bytes(header + payload)


def read_atns(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    if len(blob) < 8 or blob[:4] != MAGIC:
        raise AtnsFormatError(f"{path}: bad magic bytes")
    version, dtype_code = struct.unpack_from("<BB", blob, 4)
    if version != VERSION:
        raise AtnsFormatError(f"{path}: unsupported version {version}")
    if dtype_code not in _CODE_DTYPES:
        raise AtnsFormatError(f"{path}: unknown dtype code {dtype_code}")
    dtype = _CODE_DTYPES[dtype_code]
    (rank,) = struct.unpack_from("<H", blob, 6)
    offset = 8
    if len(blob) < offset + 4 * rank:
        raise AtnsFormatError(f"{path}: truncated header")
    shape = struct.unpack_from(f"<{rank}I", blob, offset) if rank else ()
    offset += 4 * rank
    count = int(np.prod(shape, dtype=np.int64)) if rank else 1
    expected = offset + count * dtype.itemsize
    if len(blob) != expected:
        raise AtnsFormatError(f"{path}: payload size {len(blob) - offset}, "
                              f"expected {count * dtype.itemsize}")
    arr = np.frombuffer(blob, dtype=dtype, count=count, offset=offset)
    return arr.reshape(shape).astype(dtype.newbyteorder("=")).copy()
