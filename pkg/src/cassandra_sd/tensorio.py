"""Raw tensor files: 4-byte magic ("BF16" or "F32 "), rank u8, dims u32 each,
then the little-endian payload."""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from . import bf16

MAGIC_BF16 = b"BF16"
MAGIC_F32 = b"F32 "


class TensorFileError(ValueError):
    """Raw tensor file is malformed."""


def encode_tensor_file(values: np.ndarray, as_f32: bool = False) -> bytes:
    arr = np.asarray(values)
    head = (MAGIC_F32 if as_f32 else MAGIC_BF16) + struct.pack("<B", arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    dtype = "<f4" if as_f32 else "<u2"
    return head + np.ascontiguousarray(arr, dtype=dtype).tobytes()


def decode_tensor_file(data: bytes) -> tuple[np.ndarray, bool]:
    """(array, is_f32). BF16 files give uint16 bit patterns, F32 files float32 values."""
    if len(data) < 5:
        raise TensorFileError("tensor file too short")
    magic = data[:4]
    if magic not in (MAGIC_BF16, MAGIC_F32):
        raise TensorFileError(f"bad tensor file magic {magic!r}")
    rank = data[4]
    end = 5 + 4 * rank
    if len(data) < end:
        raise TensorFileError("truncated tensor file header")
    dims = struct.unpack_from(f"<{rank}I", data, 5)
    is_f32 = magic == MAGIC_F32
    width = 4 if is_f32 else 2
    count = int(np.prod(dims, dtype=np.int64))
    if len(data) != end + width * count:
        raise TensorFileError(f"payload holds {len(data) - end} bytes, dims need {width * count}")
    arr = np.frombuffer(data, dtype="<f4" if is_f32 else "<u2", offset=end, count=count)
    return arr.reshape(dims).astype(np.float32 if is_f32 else np.uint16), is_f32


def read_tensor_file(path) -> tuple[np.ndarray, bool]:
    return decode_tensor_file(Path(path).read_bytes())


def read_bf16(path) -> np.ndarray:
    """bf16 bits of a raw tensor file; float32 files are rounded to nearest even."""
    arr, is_f32 = read_tensor_file(path)
    return bf16.f32_to_bf16(arr) if is_f32 else arr


def write_tensor_file(path, values: np.ndarray, as_f32: bool = False):
    Path(path).write_bytes(encode_tensor_file(values, as_f32))
