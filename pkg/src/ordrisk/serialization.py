"""OTEN tensor files.

Layout (little-endian): ``b"OTEN"``, u32 rank, u64 dims[rank], u8 dtype tag,
then the raw row-major payload.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Union

import numpy as np

from .tensor import Tensor

MAGIC = b"OTEN"

DTYPE_TAGS = {
    np.dtype("<f4"): 1,
    np.dtype("<f8"): 2,
    np.dtype("<i4"): 3,
    np.dtype("<i8"): 4,
    np.dtype("u1"): 5,
}
TAG_DTYPES = {tag: dt for dt, tag in DTYPE_TAGS.items()}


class FormatError(ValueError):
    pass


def encode(array) -> bytes:
    if isinstance(array, Tensor):
        array = array.data
    arr = np.asarray(array)
    dt = arr.dtype.newbyteorder("<")
    if dt not in DTYPE_TAGS:
        raise FormatError(f"unsupported dtype {arr.dtype}")
    header = MAGIC + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
    header += struct.pack("<B", DTYPE_TAGS[dt])
    return header + np.ascontiguousarray(arr, dtype=dt).tobytes()


def decode(buf: bytes) -> np.ndarray:
    if buf[:4] != MAGIC:
        raise FormatError("missing OTEN magic")
    (rank,) = struct.unpack_from("<I", buf, 4)
    off = 8
    dims = struct.unpack_from(f"<{rank}Q", buf, off)
    off += 8 * rank
    (tag,) = struct.unpack_from("<B", buf, off)
    off += 1
    if tag not in TAG_DTYPES:
        raise FormatError(f"unknown dtype tag {tag}")
    dt = TAG_DTYPES[tag]
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    if len(buf) - off != count * dt.itemsize:
        raise FormatError(f"payload size {len(buf) - off} does not match shape {dims} ({dt})")
    return np.frombuffer(buf, dtype=dt, count=count, offset=off).reshape(dims).copy()


def save_tensor(path: Union[str, Path], array) -> None:
    Path(path).write_bytes(encode(array))


def load_tensor(path: Union[str, Path]) -> np.ndarray:
    return decode(Path(path).read_bytes())
