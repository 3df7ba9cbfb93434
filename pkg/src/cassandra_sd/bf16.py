"""Bit-level bfloat16 helpers.

Values are carried around as raw 16-bit patterns (``int`` for scalars,
``np.uint16`` arrays for tensors). Nothing here does arithmetic on the
values themselves; draft/target inference widens to float32 first.
"""

from __future__ import annotations

import math
import struct

import numpy as np

from .errors import NonFiniteError

EXP_BIAS = 127
EXP_MAX = 0xFF
MANT_BITS = 7
MANT_MASK = 0x7F


def decompose(b: int) -> tuple[int, int, int]:
    """Split a bf16 bit pattern into (sign, exponent, mantissa)."""
    return (b >> 15) & 1, (b >> 7) & 0xFF, b & MANT_MASK


def compose(sign: int, exponent: int, mantissa: int) -> int:
    if not (0 <= sign <= 1 and 0 <= exponent <= 0xFF and 0 <= mantissa <= MANT_MASK):
        raise ValueError(f"field out of range: {(sign, exponent, mantissa)}")
    return (sign << 15) | (exponent << 7) | mantissa


def round_f32_to_bf16(x: float) -> int:
    """Round a float32 value to bf16 with round-to-nearest-even."""
    if not math.isfinite(x):
        raise NonFiniteError()
    (u,) = struct.unpack("<I", struct.pack("<f", x))
    u += 0x7FFF + ((u >> 16) & 1)
    return (u >> 16) & 0xFFFF


def bf16_to_float(b: int) -> float:
    (x,) = struct.unpack("<f", struct.pack("<I", (b & 0xFFFF) << 16))
    return x


# -- array forms -------------------------------------------------------------


def fields(bits: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    bits = np.asarray(bits, dtype=np.uint16)
    return (
        (bits >> 15).astype(np.uint8),
        ((bits >> 7) & 0xFF).astype(np.uint8),
        (bits & MANT_MASK).astype(np.uint8),
    )


def from_fields(sign: np.ndarray, exponent: np.ndarray, mantissa: np.ndarray) -> np.ndarray:
    s = np.asarray(sign, dtype=np.uint16)
    e = np.asarray(exponent, dtype=np.uint16)
    m = np.asarray(mantissa, dtype=np.uint16)
    return ((s << 15) | (e << 7) | m).astype(np.uint16)


def f32_to_bf16(x: np.ndarray) -> np.ndarray:
    """Vectorised round-to-nearest-even float32 -> bf16 bits."""
    x = np.ascontiguousarray(x, dtype=np.float32)
    if not np.isfinite(x).all():
        raise NonFiniteError()
    u = x.view(np.uint32).astype(np.uint64)
    u = u + 0x7FFF + ((u >> 16) & 1)
    return ((u >> 16) & 0xFFFF).astype(np.uint16)


def bf16_to_f32(bits: np.ndarray) -> np.ndarray:
    b = np.ascontiguousarray(bits, dtype=np.uint16)
    return (b.astype(np.uint32) << 16).view(np.float32)


def is_finite(bits: np.ndarray) -> np.ndarray:
    return ((np.asarray(bits, dtype=np.uint16) >> 7) & 0xFF) != EXP_MAX


def flush_denormals(bits: np.ndarray) -> np.ndarray:
    """Replace subnormals (exponent 0, mantissa != 0) by a zero of the same sign."""
    b = np.asarray(bits, dtype=np.uint16)
    sub = (((b >> 7) & 0xFF) == 0) & ((b & MANT_MASK) != 0)
    if not sub.any():
        return b
    return np.where(sub, b & 0x8000, b).astype(np.uint16)
