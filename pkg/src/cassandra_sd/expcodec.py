"""Exponent compression.

Two schemes live here:

* unary coding against a per-tensor, frequency-ranked codebook (lossless):
  rank ``r`` is written as ``r`` zeros followed by a one;
* MX-style shared exponents over blocks of 32 elements (lossy), where each
  element keeps an 8-bit significand shifted right by its gap to the block
  maximum.
"""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np

from . import bf16
from .bitstream import Bitstream
from .errors import FormatError, NonFiniteError

MX_BLOCK = 32

# leading-zero count of an 8-bit field (8 for zero)
_LZC8 = np.array([8 - int(v).bit_length() for v in range(256)], dtype=np.uint8)


@dataclass(frozen=True)
class UnaryCodebook:
    ranked_symbols: tuple[int, ...]
    rank_of: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        syms = tuple(int(s) for s in self.ranked_symbols)
        if len(set(syms)) != len(syms):
            raise ValueError("duplicate symbol in codebook")
        if not syms or any(not 0 <= s <= 255 for s in syms):
            raise ValueError("codebook symbols must be distinct 8-bit values")
        object.__setattr__(self, "ranked_symbols", syms)
        lut = np.full(256, -1, dtype=np.int32)
        lut[list(syms)] = np.arange(len(syms), dtype=np.int32)
        object.__setattr__(self, "rank_of", lut)

    def __len__(self) -> int:
        return len(self.ranked_symbols)

    @property
    def symbol_lut(self) -> np.ndarray:
        return np.array(self.ranked_symbols, dtype=np.uint8)


def build_codebook(exponents: Sequence[int] | np.ndarray) -> UnaryCodebook:
    """Rank symbols by descending count; equal counts by ascending value."""
    e = np.asarray(exponents, dtype=np.int64).ravel()
    if e.size == 0:
        raise ValueError("cannot build a codebook from an empty sequence")
    counts = np.bincount(e, minlength=256)
    present = np.flatnonzero(counts)
    order = np.lexsort((present, -counts[present]))
    return UnaryCodebook(tuple(int(s) for s in present[order]))


def _ranks(exponents, codebook: UnaryCodebook) -> np.ndarray:
    e = np.asarray(exponents, dtype=np.int64).ravel()
    ranks = codebook.rank_of[e]
    if (ranks < 0).any():
        bad = int(e[np.argmax(ranks < 0)])
        raise ValueError(f"unknown symbol {bad} for codebook")
    return ranks


def unary_encode(exponents, codebook: UnaryCodebook) -> Bitstream:
    ranks = _ranks(exponents, codebook)
    if ranks.size == 0:
        return Bitstream.empty()
    ends = np.cumsum(ranks + 1) - 1
    bits = np.zeros(int(ends[-1]) + 1, dtype=np.uint8)
    bits[ends] = 1
    return Bitstream.from_bits(bits)


def unary_decode_sequential(stream: Bitstream, codebook: UnaryCodebook, count: int) -> list[int]:
    """Bit-at-a-time reference decoder."""
    out: list[int] = []
    if count == 0:
        return out
    symbols = codebook.ranked_symbols
    zeros = 0
    for bit in stream.bits().tolist():
        if bit:
            if zeros >= len(symbols):
                raise FormatError(f"rank {zeros} outside codebook")
            out.append(symbols[zeros])
            if len(out) == count:
                return out
            zeros = 0
        else:
            zeros += 1
    raise FormatError("truncated stream")


def unary_decode(stream: Bitstream, codebook: UnaryCodebook, count: int) -> np.ndarray:
    """Vectorised decode used by the container; same contract as the sequential one."""
    if count == 0:
        return np.zeros(0, dtype=np.uint8)
    ones = np.flatnonzero(stream.bits())
    if ones.size < count:
        raise FormatError("truncated stream")
    ranks = np.diff(ones[:count], prepend=-1) - 1
    if ranks.max() >= len(codebook):
        raise FormatError(f"rank {int(ranks.max())} outside codebook")
    return codebook.symbol_lut[ranks]


def unary_bit_count(exponents, codebook: UnaryCodebook) -> int:
    ranks = _ranks(exponents, codebook)
    return int(ranks.sum() + ranks.size)


def shannon_entropy(exponents) -> float:
    e = np.asarray(exponents, dtype=np.int64).ravel()
    if e.size == 0:
        raise ValueError("empty input")
    p = np.bincount(e) / e.size
    p = p[p > 0]
    return float(-(p * np.log2(p)).sum()) + 0.0


def avg_unary_bits(exponents, codebook: UnaryCodebook | None = None) -> float:
    """Mean codeword length; builds the codebook from the data if none is given."""
    e = np.asarray(exponents, dtype=np.int64).ravel()
    if codebook is None:
        codebook = build_codebook(e)
    return unary_bit_count(e, codebook) / e.size


# -- MX shared-exponent blocks -------------------------------------------------


@dataclass(frozen=True)
class MxBlock:
    shared_exponent: int
    signs: np.ndarray
    mantissas: np.ndarray  # 8-bit: explicit leading bit + 7 fraction bits, shifted


def mx_encode(values: np.ndarray, block_size: int = MX_BLOCK) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Encode a flat bf16 array into consecutive MX blocks.

    Returns ``(shared_exponents, signs, shifted_mantissas)``; the last block
    may be short.
    """
    v = np.asarray(values, dtype=np.uint16).ravel()
    if not bf16.is_finite(v).all():
        raise NonFiniteError()
    s, e, m = bf16.fields(v)
    n = v.size
    nblocks = -(-n // block_size)
    padded = np.zeros(nblocks * block_size, dtype=np.uint8)
    padded[:n] = e
    shared = padded.reshape(nblocks, block_size).max(axis=1).astype(np.uint8)
    gap = np.repeat(shared, block_size)[:n].astype(np.int32) - e
    sig = (m.astype(np.int32) | 0x80)
    shifted = np.where((e == 0) | (gap >= 8), 0, sig >> np.minimum(gap, 7))
    return shared, s, shifted.astype(np.uint8)


def mx_encode_block(values) -> MxBlock:
    v = np.asarray(values, dtype=np.uint16).ravel()
    if v.size == 0 or v.size > MX_BLOCK:
        raise ValueError(f"an MX block holds 1..{MX_BLOCK} elements")
    shared, s, m = mx_encode(v)
    return MxBlock(int(shared[0]), s, m)


def mx_decode(shared_per_element: np.ndarray, signs: np.ndarray, shifted: np.ndarray) -> tuple[np.ndarray, int]:
    """Renormalise shifted significands back to bf16.

    Returns the bf16 bits and the number of elements clamped to zero because
    their exponent would fall below 1.
    """
    shared = np.asarray(shared_per_element, dtype=np.int32)
    s = np.asarray(signs, dtype=np.uint16)
    m = np.asarray(shifted, dtype=np.uint8)
    z = _LZC8[m].astype(np.int32)
    exp = shared - z
    zero = m == 0
    under = (~zero) & (exp < 1)
    mant = (m.astype(np.int32) << np.minimum(z, 7)) & 0x7F
    out = bf16.from_fields(s, np.clip(exp, 0, 255), mant)
    out = np.where(zero | under, s << 15, out).astype(np.uint16)
    return out, int(np.count_nonzero(under))


def mx_decode_element(shared_exponent: int, sign: int, shifted_mantissa: int) -> int:
    if shifted_mantissa == 0:
        return sign << 15
    z = 8 - shifted_mantissa.bit_length()
    exponent = shared_exponent - z
    if exponent < 1:
        return sign << 15
    return bf16.compose(sign, exponent, (shifted_mantissa << z) & 0x7F)
