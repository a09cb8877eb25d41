"""SWQ1 tensor container.

Layout (all integers little-endian)::

    b"SWQ1"  u32 entry_count
    repeated: u16 name_len, name (UTF-8), u8 dtype, u8 rank, rank x u64 dims, payload

dtype codes: 0 = float32, 1 = int8, 2 = int32.  Payload is the raw
little-endian row-major data, ``itemsize * prod(dims)`` bytes.
"""

from __future__ import annotations

import io
import os
import struct
from typing import BinaryIO

import numpy as np

from .errors import ContainerFormatError

MAGIC = b"SWQ1"
DTYPE_CODES = {np.dtype("<f4"): 0, np.dtype("int8"): 1, np.dtype("<i4"): 2}
CODE_DTYPES = {code: dt for dt, code in DTYPE_CODES.items()}


def _normalize(name: str, value) -> np.ndarray:
    arr = np.asarray(value)
    if arr.dtype == np.float64:
        arr = arr.astype(np.float32)
    elif arr.dtype in (np.int64, np.bool_):
        arr = arr.astype(np.int32)
    arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
    if arr.dtype not in DTYPE_CODES:
        raise ContainerFormatError(f"tensor '{name}' has unsupported dtype {arr.dtype}")
    if arr.ndim > 255:
        raise ContainerFormatError(f"tensor '{name}' has rank {arr.ndim} > 255")
    return arr


def dumps(tensors: dict) -> bytes:
    buf = io.BytesIO()
    write(buf, tensors)
    return buf.getvalue()


def write(fh: BinaryIO, tensors: dict):
    fh.write(MAGIC)
    fh.write(struct.pack("<I", len(tensors)))
    for name, value in tensors.items():
        arr = _normalize(name, value)
        raw_name = name.encode("utf-8")
        if len(raw_name) > 0xFFFF:
            raise ContainerFormatError(f"tensor name too long: {name[:40]}...")
        fh.write(struct.pack("<H", len(raw_name)))
        fh.write(raw_name)
        fh.write(struct.pack("<BB", DTYPE_CODES[arr.dtype], arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        fh.write(np.ascontiguousarray(arr).tobytes())


def save(path, tensors: dict):
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        write(fh, tensors)
    os.replace(tmp, path)


def _read_exact(fh: BinaryIO, n: int, what: str) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise ContainerFormatError(f"truncated container while reading {what}")
    return data


def read(fh: BinaryIO) -> dict:
    if _read_exact(fh, 4, "magic") != MAGIC:
        raise ContainerFormatError("not an SWQ1 container (bad magic)")
    (count,) = struct.unpack("<I", _read_exact(fh, 4, "entry count"))
    tensors = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", _read_exact(fh, 2, "name length"))
        name = _read_exact(fh, name_len, "name").decode("utf-8")
        if name in tensors:
            raise ContainerFormatError(f"duplicate tensor name '{name}'")
        code, rank = struct.unpack("<BB", _read_exact(fh, 2, f"header of '{name}'"))
        if code not in CODE_DTYPES:
            raise ContainerFormatError(f"tensor '{name}' has unknown dtype code {code}")
        dims = struct.unpack(f"<{rank}Q", _read_exact(fh, 8 * rank, f"dims of '{name}'"))
        dtype = CODE_DTYPES[code]
        nbytes = dtype.itemsize * int(np.prod(dims, dtype=np.int64))
        payload = _read_exact(fh, nbytes, f"payload of '{name}'")
        tensors[name] = np.frombuffer(payload, dtype=dtype).reshape(dims).astype(dtype.newbyteorder("="))
    return tensors


def loads(data: bytes) -> dict:
    return read(io.BytesIO(data))


def load(path) -> dict:
    with open(path, "rb") as fh:
        return read(fh)
