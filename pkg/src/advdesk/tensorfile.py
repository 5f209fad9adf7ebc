"""Portable binary tensor files.

Layout (all little-endian):

    magic   4 bytes  b"ATNS"
    version 1 byte   0x01
    dtype   1 byte   0x01 (64-bit float)
    rank    1 byte
    dims    rank x uint32
    payload row-major float64

Round-trips are bit-exact, including negative zero.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Union

import numpy as np

MAGIC = b"ATNS"
VERSION = 0x01
DTYPE_F64 = 0x01
MAX_DIM = 2**32 - 1


class TensorFileError(ValueError):
    """Base class for tensor-file format errors."""


class BadMagicError(TensorFileError):
    pass


class TruncatedFileError(TensorFileError):
    pass


class DimensionOverflowError(TensorFileError):
    pass


class UnsupportedFormatError(TensorFileError):
    pass


def tensor_bytes(array: np.ndarray) -> bytes:
    """Serialize a float64 array to the ATNS wire format."""
    arr = np.asarray(array, dtype=np.float64)
    if arr.ndim > 255:
        raise DimensionOverflowError(f"rank {arr.ndim} exceeds 255")
    for d in arr.shape:
        if d > MAX_DIM:
            raise DimensionOverflowError(f"dimension {d} exceeds uint32 range")
    header = MAGIC + bytes([VERSION, DTYPE_F64, arr.ndim])
    dims = b"".join(struct.pack("<I", d) for d in arr.shape)
    return header + dims + arr.astype("<f8").tobytes()


def tensor_from_bytes(blob: bytes) -> np.ndarray:
    if len(blob) < 7:
        raise TruncatedFileError(f"header needs 7 bytes, got {len(blob)}")
    if blob[:4] != MAGIC:
        raise BadMagicError(f"bad magic {blob[:4]!r}")
    version, dtype, rank = blob[4], blob[5], blob[6]
    if version != VERSION:
        raise UnsupportedFormatError(f"unsupported version {version}")
    if dtype != DTYPE_F64:
        raise UnsupportedFormatError(f"unsupported dtype byte {dtype}")
    offset = 7
    if len(blob) < offset + 4 * rank:
        raise TruncatedFileError("file ends inside the dimension list")
    dims = struct.unpack_from(f"<{rank}I", blob, offset)
    offset += 4 * rank
    count = 1
    for d in dims:
        count *= d
        if count > 2**48:
            raise DimensionOverflowError(f"element count overflow for dims {dims}")
    need = count * 8
    if len(blob) - offset < need:
        raise TruncatedFileError(f"payload needs {need} bytes, got {len(blob) - offset}")
    if len(blob) - offset > need:
        raise TruncatedFileError(f"trailing bytes after payload (expected {need})")
    arr = np.frombuffer(blob, dtype="<f8", count=count, offset=offset)
    return arr.reshape(dims).astype(np.float64)


def write_tensor_file(path: Union[str, Path], array: np.ndarray) -> None:
    Path(path).write_bytes(tensor_bytes(array))


def read_tensor_file(path: Union[str, Path]) -> np.ndarray:
    return tensor_from_bytes(Path(path).read_bytes())
