"""The split tensor container.

A bf16 tensor plus a keep-bitmap is turned into six byte-aligned sections::

    bitmap | spec_signs | spec_exponents | spec_mantissa_high      (speculation)
    verify_mantissa_low | verify_pruned                            (verification)

The draft view is rebuilt from the speculation sections alone, with the
missing mantissa bits and pruned elements filled by zeros. The target view
uses everything; in mode 1 (unary exponents) it is bit-exact, in mode 2 (MX
shared exponents) it carries the MX shift loss.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import bf16
from .bitstream import Bitstream, pack_fixed, unpack_fixed
from .errors import FormatError, NonFiniteError
from .expcodec import (
    MX_BLOCK,
    UnaryCodebook,
    build_codebook,
    mx_decode,
    mx_encode,
    unary_decode,
    unary_encode,
)
from .selection import KeepBitmap

MAGIC = b"CASS"
VERSION = 1
DTYPE_BF16 = 0
FLAG_PACKED = 0x01

MODE_UNARY = 1
MODE_MX = 2

SECTIONS = (
    "bitmap",
    "spec_signs",
    "spec_exponents",
    "spec_mantissa_high",
    "verify_mantissa_low",
    "verify_pruned",
)
SPEC_SECTIONS = SECTIONS[:4]
VERIFY_SECTIONS = SECTIONS[4:]


@dataclass(frozen=True)
class DraftConfig:
    """Knobs for building a draft model out of the target's own data.

    ``w_p``/``kv_p`` are prune fractions, ``w_t``/``kv_t`` the number of low
    mantissa bits moved to verification data.
    """

    mode: int = MODE_UNARY
    w_p: float = 0.4
    w_t: int = 4
    kv_p: float = 0.0
    kv_t: int = 4
    gamma: int = 4

    def __post_init__(self):
        if self.mode not in (MODE_UNARY, MODE_MX):
            raise ValueError(f"mode must be 1 or 2, got {self.mode}")
        for name in ("w_p", "kv_p"):
            p = getattr(self, name)
            if not 0.0 <= p < 1.0:
                raise ValueError(f"{name} must be in [0, 1), got {p}")
        for name in ("w_t", "kv_t"):
            t = getattr(self, name)
            if not (isinstance(t, (int, np.integer)) and 0 <= t <= 7):
                raise ValueError(f"{name} must be an integer in [0, 7], got {t}")
        if self.gamma < 1:
            raise ValueError("gamma must be >= 1")

    @property
    def is_degenerate(self) -> bool:
        """No pruning and no truncation: draft data equals target data."""
        return self.w_p == 0 and self.kv_p == 0 and self.w_t == 0 and self.kv_t == 0

    def label(self) -> str:
        return (
            f"mode={self.mode} w_p={self.w_p:g} w_t={self.w_t} "
            f"kv_p={self.kv_p:g} kv_t={self.kv_t} gamma={self.gamma}"
        )


@dataclass(frozen=True)
class TensorHeader:
    """What a decoder knows before reading any section."""

    mode: int
    dims: tuple[int, ...]
    n: int
    k: int
    m_s: int
    codebook: UnaryCodebook | None
    block_size: int

    @property
    def truncated_bits(self) -> int:
        return 7 - self.m_s

    @property
    def high_width(self) -> int:
        return self.m_s + (1 if self.mode == MODE_MX else 0)

    @property
    def exponent_blocks(self) -> int:
        return -(-self.k // self.block_size)


@dataclass(frozen=True)
class CassandraTensor:
    mode: int
    dims: tuple[int, ...]
    n: int
    k: int
    m_s: int
    codebook: UnaryCodebook | None
    block_size: int
    bitmap: Bitstream
    spec_signs: Bitstream
    spec_exponents: Bitstream
    spec_mantissa_high: Bitstream
    verify_mantissa_low: Bitstream
    verify_pruned: Bitstream

    @property
    def truncated_bits(self) -> int:
        return 7 - self.m_s

    @property
    def high_width(self) -> int:
        # MX keeps the explicit leading bit in the shifted significand
        return self.m_s + (1 if self.mode == MODE_MX else 0)

    @property
    def header(self) -> TensorHeader:
        return TensorHeader(self.mode, self.dims, self.n, self.k, self.m_s, self.codebook, self.block_size)

    def section(self, name: str) -> Bitstream:
        return getattr(self, name)

    def sections(self) -> dict[str, Bitstream]:
        return {name: getattr(self, name) for name in SECTIONS}

    def expected_bits(self) -> dict[str, int]:
        """Section bit lengths implied by N, K, m_s and the exponent stream."""
        n, k, t = self.n, self.k, self.truncated_bits
        if self.mode == MODE_UNARY:
            exp_bits = self.spec_exponents.bit_length
        else:
            exp_bits = 8 * (-(-k // self.block_size))
        return {
            "bitmap": n,
            "spec_signs": k,
            "spec_exponents": exp_bits,
            "spec_mantissa_high": k * self.high_width,
            "verify_mantissa_low": k * t,
            "verify_pruned": 16 * (n - k),
        }


class DecodeResult(NamedTuple):
    values: np.ndarray
    underflow: int


def encode_tensor(
    values: np.ndarray,
    bitmap: KeepBitmap | np.ndarray,
    mode: int = MODE_UNARY,
    truncate_bits: int = 0,
    block_size: int = MX_BLOCK,
) -> CassandraTensor:
    """Split a bf16 tensor into speculation and verification sections.

    Subnormals are flushed to signed zero first; Inf/NaN are rejected.
    """
    v = np.asarray(values, dtype=np.uint16)
    dims = tuple(int(d) for d in v.shape) or (1,)
    flat = v.ravel()
    if not bf16.is_finite(flat).all():
        raise NonFiniteError()
    flat = bf16.flush_denormals(flat)
    keep = bitmap.flat() if isinstance(bitmap, KeepBitmap) else np.asarray(bitmap, dtype=bool).ravel()
    if keep.size != flat.size:
        raise ValueError(f"bitmap mismatch: {keep.size} flags for {flat.size} elements")
    if mode not in (MODE_UNARY, MODE_MX):
        raise ValueError(f"mode must be 1 or 2, got {mode}")
    if not 0 <= truncate_bits <= 7:
        raise ValueError("truncate_bits must be in [0, 7]")
    n = int(flat.size)
    k = int(np.count_nonzero(keep))
    if k < 1:
        raise ValueError("at least one element must be kept")

    kept = flat[keep]
    pruned = flat[~keep]
    t = truncate_bits
    signs, exps, mant = bf16.fields(kept)
    codebook = None
    if mode == MODE_UNARY:
        codebook = build_codebook(exps)
        exp_stream = unary_encode(exps, codebook)
        full = mant.astype(np.uint32)
        high_width = 7 - t
    else:
        shared, signs, full = mx_encode(kept, block_size)
        exp_stream = Bitstream(shared.tobytes(), 8 * shared.size)
        full = full.astype(np.uint32)
        high_width = 8 - t
    return CassandraTensor(
        mode=mode,
        dims=dims,
        n=n,
        k=k,
        m_s=7 - t,
        codebook=codebook,
        block_size=block_size,
        bitmap=Bitstream.from_bits(keep.astype(np.uint8)),
        spec_signs=Bitstream.from_bits(signs),
        spec_exponents=exp_stream,
        spec_mantissa_high=pack_fixed(full >> t, high_width),
        verify_mantissa_low=pack_fixed(full & ((1 << t) - 1), t),
        verify_pruned=_pack_u16(pruned),
    )


def _pack_u16(values: np.ndarray) -> Bitstream:
    return Bitstream(np.asarray(values, dtype=">u2").tobytes(), 16 * int(np.size(values)))


def _unpack_u16(stream: Bitstream, count: int) -> np.ndarray:
    if len(stream.data) < 2 * count:
        raise FormatError("truncated stream")
    return np.frombuffer(stream.data[: 2 * count], dtype=">u2").astype(np.uint16)


def keep_mask(t: CassandraTensor) -> np.ndarray:
    mask = t.bitmap.bits().astype(bool)
    if mask.size != t.n:
        raise FormatError("truncated stream")
    return mask


def decode_kept_exponents(t: CassandraTensor) -> np.ndarray:
    """Per-kept-element exponent (mode 1) or shared exponent (mode 2)."""
    if t.mode == MODE_UNARY:
        return unary_decode(t.spec_exponents, t.codebook, t.k)
    nblocks = -(-t.k // t.block_size)
    if len(t.spec_exponents.data) < nblocks:
        raise FormatError("truncated stream")
    shared = np.frombuffer(t.spec_exponents.data[:nblocks], dtype=np.uint8)
    return np.repeat(shared, t.block_size)[: t.k]


def decode(t: CassandraTensor, view: str = "target") -> DecodeResult:
    if view not in ("draft", "target"):
        raise ValueError(f"view must be 'draft' or 'target', got {view!r}")
    mask = keep_mask(t)
    tb = t.truncated_bits
    signs = unpack_fixed(t.spec_signs, t.k, 1)
    exps = decode_kept_exponents(t)
    mant = unpack_fixed(t.spec_mantissa_high, t.k, t.high_width) << tb
    if view == "target":
        mant |= unpack_fixed(t.verify_mantissa_low, t.k, tb)
    underflow = 0
    if t.mode == MODE_UNARY:
        kept = bf16.from_fields(signs, exps, mant)
    else:
        kept, underflow = mx_decode(exps, signs, mant)
    out = np.zeros(t.n, dtype=np.uint16)
    out[mask] = kept
    if view == "target":
        out[~mask] = _unpack_u16(t.verify_pruned, t.n - t.k)
    return DecodeResult(out.reshape(t.dims), underflow)


def decode_draft(t: CassandraTensor) -> np.ndarray:
    return decode(t, "draft").values


def decode_target(t: CassandraTensor) -> np.ndarray:
    return decode(t, "target").values


@dataclass(frozen=True)
class CompressionStats:
    n: int
    k: int
    spec_bits: int
    verify_bits: int

    @property
    def total_bits(self) -> int:
        return self.spec_bits + self.verify_bits

    @property
    def spec_bits_per_elem(self) -> float:
        return self.spec_bits / self.n

    @property
    def total_bits_per_elem(self) -> float:
        return self.total_bits / self.n

    @property
    def compression_ratio(self) -> float:
        """Draft-side ratio against 16-bit bf16 (bitmap counted as speculation)."""
        return 16.0 / self.spec_bits_per_elem

    @property
    def draft_fraction(self) -> float:
        return self.spec_bits_per_elem / 16.0


def compression_stats(t: CassandraTensor) -> CompressionStats:
    bits = {name: t.section(name).bit_length for name in SECTIONS}
    return CompressionStats(
        n=t.n,
        k=t.k,
        spec_bits=sum(bits[s] for s in SPEC_SECTIONS),
        verify_bits=sum(bits[s] for s in VERIFY_SECTIONS),
    )


# -- .cass serialisation ------------------------------------------------------


def header_bytes(t: CassandraTensor, offsets: list[int], flags: int = 0) -> bytes:
    out = bytearray()
    out += MAGIC
    out += struct.pack("<HBBB", VERSION, t.mode, DTYPE_BF16, len(t.dims))
    out += struct.pack(f"<{len(t.dims)}I", *t.dims)
    out += struct.pack("<QQBB", t.n, t.k, t.m_s, flags)
    if t.mode == MODE_UNARY:
        out += struct.pack("<H", len(t.codebook)) + bytes(t.codebook.ranked_symbols)
    else:
        out += struct.pack("<H", t.block_size)
    out += struct.pack("<6Q", *offsets)
    return bytes(out)


def header_size(t: CassandraTensor) -> int:
    return len(header_bytes(t, [0] * 6))


def to_bytes(t: CassandraTensor, packed: bytes = b"") -> bytes:
    """Serialise to the ``.cass`` layout; ``packed`` is an optional superblock section."""
    pos = header_size(t)
    offsets = []
    for name in SECTIONS:
        offsets.append(pos)
        pos += t.section(name).nbytes
    body = b"".join(t.section(name).data for name in SECTIONS)
    flags = FLAG_PACKED if packed else 0
    return header_bytes(t, offsets, flags) + body + packed


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, fmt: str):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.data):
            raise FormatError("truncated header")
        vals = struct.unpack_from(fmt, self.data, self.pos)
        self.pos += size
        return vals


def from_bytes(data: bytes) -> tuple[CassandraTensor, bytes]:
    """Parse a ``.cass`` image; returns the container and any packed section."""
    r = _Reader(data)
    (magic,) = r.take("<4s")
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    version, mode, dtype, rank = r.take("<HBBB")
    if version != VERSION:
        raise FormatError(f"unsupported version {version}")
    if dtype != DTYPE_BF16:
        raise FormatError(f"unsupported dtype {dtype}")
    if mode not in (MODE_UNARY, MODE_MX):
        raise FormatError(f"bad mode {mode}")
    dims = r.take(f"<{rank}I")
    n, k, m_s, flags = r.take("<QQBB")
    if int(np.prod(dims)) != n or not 1 <= k <= n or m_s > 7:
        raise FormatError("inconsistent header counts")
    codebook = None
    block_size = MX_BLOCK
    if mode == MODE_UNARY:
        (ncb,) = r.take("<H")
        syms = r.take(f"<{ncb}B")
        try:
            codebook = UnaryCodebook(tuple(syms))
        except ValueError as exc:
            raise FormatError(f"bad codebook: {exc}") from None
    else:
        (block_size,) = r.take("<H")
        if block_size == 0:
            raise FormatError("bad MX block size")
    offsets = list(r.take("<6Q"))
    if offsets[0] != r.pos:
        raise FormatError("section offsets do not follow header")

    t_bits = 7 - m_s
    high_width = m_s + (1 if mode == MODE_MX else 0)
    fixed_bytes = {
        "bitmap": -(-n // 8),
        "spec_signs": -(-k // 8),
        "spec_mantissa_high": -(-(k * high_width) // 8),
        "verify_mantissa_low": -(-(k * t_bits) // 8),
        "verify_pruned": 2 * (n - k),
    }
    if mode == MODE_MX:
        fixed_bytes["spec_exponents"] = -(-k // block_size)
    bounds = offsets + [None]
    sections: dict[str, Bitstream] = {}
    for i, name in enumerate(SECTIONS):
        start = offsets[i]
        if name == "spec_exponents" and mode == MODE_UNARY:
            end = offsets[i + 1]
        else:
            end = start + fixed_bytes[name]
            if bounds[i + 1] is not None and bounds[i + 1] != end:
                raise FormatError(f"section {name} has wrong size")
        if end < start or end > len(data):
            raise FormatError(f"section {name} truncated")
        chunk = data[start:end]
        if name == "spec_exponents":
            if mode == MODE_UNARY:
                ones = np.flatnonzero(np.unpackbits(np.frombuffer(chunk, dtype=np.uint8)))
                if ones.size == 0:
                    raise FormatError("empty exponent stream")
                nbits = int(ones[-1]) + 1
            else:
                nbits = 8 * len(chunk)
        else:
            nbits = {
                "bitmap": n,
                "spec_signs": k,
                "spec_mantissa_high": k * high_width,
                "verify_mantissa_low": k * t_bits,
                "verify_pruned": 16 * (n - k),
            }[name]
        sections[name] = Bitstream(chunk, nbits)
    end = offsets[-1] + fixed_bytes["verify_pruned"]
    packed = data[end:]
    if bool(flags & FLAG_PACKED) != bool(packed):
        raise FormatError("packed-section flag does not match file contents")
    t = CassandraTensor(
        mode=mode,
        dims=tuple(dims),
        n=n,
        k=k,
        m_s=m_s,
        codebook=codebook,
        block_size=block_size,
        **sections,
    )
    if int(np.count_nonzero(t.bitmap.bits())) != k:
        raise FormatError("bitmap popcount does not match K")
    return t, packed


# -- batched rows -------------------------------------------------------------
# The online KV path encodes many short rows at a time. These give the same
# draft view and section sizes as encode_tensor + decode_draft on each row,
# without building the per-row containers.


def _kept_matrix(keep: np.ndarray) -> int:
    counts = keep.sum(axis=1)
    k = int(counts[0])
    if (counts != k).any():
        raise ValueError("batched rows need the same kept count in every row")
    if k < 1:
        raise ValueError("at least one element must be kept")
    return k


def draft_rows(rows: np.ndarray, keep: np.ndarray, mode: int, truncate_bits: int,
               block_size: int = MX_BLOCK) -> np.ndarray:
    """Draft view of every row of a 2-D bf16 array."""
    rows = bf16.flush_denormals(np.asarray(rows, dtype=np.uint16))
    keep = np.asarray(keep, dtype=bool)
    if not bf16.is_finite(rows).all():
        raise NonFiniteError()
    k = _kept_matrix(keep)
    lowmask = np.uint16((1 << truncate_bits) - 1)
    if mode == MODE_UNARY:
        return np.where(keep, rows & ~lowmask, 0).astype(np.uint16)
    r = rows.shape[0]
    kept = rows[keep].reshape(r, k)
    s, e, m = bf16.fields(kept)
    nb = -(-k // block_size)
    padded = np.zeros((r, nb * block_size), dtype=np.uint8)
    padded[:, :k] = e
    shared = np.repeat(padded.reshape(r, nb, block_size).max(axis=2), block_size, axis=1)[:, :k]
    gap = shared.astype(np.int32) - e
    sig = m.astype(np.int32) | 0x80
    shifted = np.where((e == 0) | (gap >= 8), 0, sig >> np.minimum(gap, 7))
    shifted = shifted & ~int(lowmask)
    vals, _ = mx_decode(shared, s, shifted.astype(np.uint8))
    out = np.zeros_like(rows)
    out[keep] = vals.ravel()
    return out


def row_section_bits(rows: np.ndarray, keep: np.ndarray, mode: int, truncate_bits: int,
                     block_size: int = MX_BLOCK) -> tuple[np.ndarray, np.ndarray]:
    """(speculation bits, total bits) per row, as compression_stats would report."""
    rows = bf16.flush_denormals(np.asarray(rows, dtype=np.uint16))
    keep = np.asarray(keep, dtype=bool)
    r, n = rows.shape
    k = _kept_matrix(keep)
    t = truncate_bits
    if mode == MODE_UNARY:
        e = ((rows[keep].reshape(r, k) >> 7) & 0xFF).astype(np.int64)
        counts = np.zeros((r, 256), dtype=np.int64)
        np.add.at(counts, (np.repeat(np.arange(r), k), e.ravel()), 1)
        sym = np.broadcast_to(np.arange(256), counts.shape)
        order = np.lexsort((sym, -counts), axis=1)
        rank = np.empty_like(order)
        np.put_along_axis(rank, order, np.broadcast_to(np.arange(256), order.shape), axis=1)
        exp_bits = (counts * (rank + 1)).sum(axis=1)
        spec = n + k + exp_bits + k * (7 - t)
    else:
        spec = np.full(r, n + k + 8 * (-(-k // block_size)) + k * (8 - t), dtype=np.int64)
    total = spec + k * t + 16 * (n - k)
    return spec, total
