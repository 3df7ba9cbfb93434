"""Functional model of the hardware decoder.

The unary exponent path slices the stream into 8-bit chunks, runs a
combinational zero counter on every chunk independently, stitches runs that
cross chunk boundaries in a reorganisation pass, and maps run lengths to
exponents through the codebook LUT. The MX path reuses the zero counter to
find each shifted significand's leading zeros. De-sparsification through
the bitmap is always the last stage.

Nothing here models timing.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import bf16
from .bitstream import Bitstream, unpack_fixed
from .container import MODE_UNARY, CassandraTensor, TensorHeader, decode_kept_exponents, keep_mask
from .errors import FormatError
from .expcodec import UnaryCodebook
from .superblock import BLOCK_BYTES, VIEW_TYPES, StreamType, Superblock, iter_blocks, stream_bytes

CHUNK_BITS = 8
MAX_BUFFER_BYTES = 2 * BLOCK_BYTES


class ChunkResult(NamedTuple):
    zero_run_outputs: tuple[int, ...]
    num_ones: int
    last_bit: int
    trailing_zeros: int


def parallel_zero_count(chunk: int) -> ChunkResult:
    """Zero counter for one 8-bit chunk, bit 7 (MSB) first in stream order.

    For every 1 bit, emits the number of zeros since the previous 1 inside
    the chunk. ``trailing_zeros`` is the open run handed to the next chunk.
    """
    if not 0 <= chunk <= 0xFF:
        raise ValueError("chunk must be an 8-bit value")
    outputs = []
    cnt = 0
    for j in range(CHUNK_BITS):
        if (chunk >> (CHUNK_BITS - 1 - j)) & 1:
            outputs.append(cnt)
            cnt = 0
        else:
            cnt += 1
    return ChunkResult(tuple(outputs), len(outputs), chunk & 1, cnt)


def _build_chunk_luts():
    runs = np.zeros((256, CHUNK_BITS), dtype=np.int64)
    ones = np.zeros(256, dtype=np.int64)
    trailing = np.zeros(256, dtype=np.int64)
    for v in range(256):
        r = parallel_zero_count(v)
        runs[v, : r.num_ones] = r.zero_run_outputs
        ones[v] = r.num_ones
        trailing[v] = r.trailing_zeros
    return runs, ones, trailing


_RUNS, _ONES, _TRAILING = _build_chunk_luts()


def reorganize(chunks: np.ndarray) -> np.ndarray:
    """Zeros carried into each chunk from the chunks before it.

    A chunk without any 1 passes its whole width on, so runs may span many
    chunks.
    """
    chunks = np.asarray(chunks, dtype=np.uint8)
    nchunks = chunks.size
    carry = np.zeros(nchunks, dtype=np.int64)
    if nchunks <= 1:
        return carry
    has_one = _ONES[chunks] > 0
    idx = np.arange(nchunks)
    # last chunk at or before position i that contains a 1 (-1 if none)
    last = np.maximum.accumulate(np.where(has_one, idx, -1))
    prev = last[:-1]
    trailing = _TRAILING[chunks]
    base = np.where(prev >= 0, trailing[np.maximum(prev, 0)], 0)
    span_start = np.where(prev >= 0, prev + 1, 0)
    carry[1:] = base + CHUNK_BITS * (idx[:-1] - span_start + 1)
    return carry


def parallel_unary_decode(stream: Bitstream, codebook: UnaryCodebook, count: int) -> np.ndarray:
    """Chunked unary decode: zero counting, reorganisation, codebook lookup."""
    if count == 0:
        return np.zeros(0, dtype=np.uint8)
    chunks = np.frombuffer(stream.data, dtype=np.uint8)
    nfull = stream.bit_length // CHUNK_BITS
    tail = stream.bit_length % CHUNK_BITS
    if tail:
        # clear any bits beyond bit_length in the final partial chunk
        last = int(chunks[nfull]) & (0xFF << (CHUNK_BITS - tail)) & 0xFF
        chunks = np.concatenate([chunks[:nfull], np.array([last], dtype=np.uint8)])
    else:
        chunks = chunks[:nfull]
    runs = _RUNS[chunks].copy()
    ones = _ONES[chunks]
    runs[:, 0] += reorganize(chunks)
    valid = np.arange(CHUNK_BITS)[None, :] < ones[:, None]
    ranks = runs[valid]
    if ranks.size < count:
        raise FormatError("truncated stream")
    ranks = ranks[:count]
    if ranks.max() >= len(codebook):
        raise FormatError(f"rank {int(ranks.max())} outside codebook")
    return codebook.symbol_lut[ranks]


def mx_normalize(shifted_mantissa: int) -> tuple[int | None, int | None, bool]:
    """Leading-zero count and renormalised 7-bit mantissa of a shifted significand."""
    r = parallel_zero_count(shifted_mantissa)
    if r.num_ones == 0:
        return None, None, True
    z = r.zero_run_outputs[0]
    return z, (shifted_mantissa << z) & 0x7F, False


_MX_Z = np.array([mx_normalize(v)[0] or 0 for v in range(256)], dtype=np.int64)
_MX_MANT = np.array([mx_normalize(v)[1] or 0 for v in range(256)], dtype=np.uint16)


def _assemble(header: TensorHeader, view: str, keep, signs, exps, high, low, pruned) -> np.ndarray:
    """Mantissa concatenation, exponent/MX renormalisation, bitmap scatter."""
    tb = header.truncated_bits
    mant = np.asarray(high, dtype=np.int64) << tb
    if view == "target":
        mant = mant | np.asarray(low, dtype=np.int64)
    signs = np.asarray(signs, dtype=np.uint16)
    exps = np.asarray(exps, dtype=np.int64)
    if header.mode == MODE_UNARY:
        kept = bf16.from_fields(signs, exps, mant)
    else:
        exp = exps - _MX_Z[mant]
        zero = (mant == 0) | (exp < 1)
        kept = bf16.from_fields(signs, np.clip(exp, 0, 255), _MX_MANT[mant])
        kept = np.where(zero, signs << 15, kept).astype(np.uint16)
    out = np.zeros(header.n, dtype=np.uint16)
    out[keep] = kept
    if view == "target":
        out[~keep] = pruned
    return out.reshape(header.dims)


def dataflow_decode(t: CassandraTensor, view: str = "target") -> np.ndarray:
    """Decode a whole container through the hardware stages."""
    h = t.header
    keep = keep_mask(t)
    if t.mode == MODE_UNARY:
        exps = parallel_unary_decode(t.spec_exponents, t.codebook, t.k)
    else:
        exps = decode_kept_exponents(t)
    signs = unpack_fixed(t.spec_signs, t.k, 1)
    high = unpack_fixed(t.spec_mantissa_high, t.k, t.high_width)
    low = pruned = None
    if view == "target":
        low = unpack_fixed(t.verify_mantissa_low, t.k, t.truncated_bits)
        pruned = np.frombuffer(t.verify_pruned.data, dtype=">u2").astype(np.uint16)
    return _assemble(h, view, keep, signs, exps, high, low, pruned)


# -- streaming decode over packed superblocks --------------------------------


class _BitBuffer:
    """Per-stream leftover buffer; bits are held MSB-first in a Python int."""

    __slots__ = ("acc", "nbits", "max_bits")

    def __init__(self):
        self.acc = 0
        self.nbits = 0
        self.max_bits = 0

    def feed(self, payload: bytes):
        self.acc = (self.acc << (8 * len(payload))) | int.from_bytes(payload, "big")
        self.nbits += 8 * len(payload)
        self.max_bits = max(self.max_bits, self.nbits)

    def read(self, n: int) -> int:
        rest = self.nbits - n
        val = self.acc >> rest
        self.acc &= (1 << rest) - 1
        self.nbits = rest
        return val

    def leading_zeros(self) -> int | None:
        """Zeros before the next 1, or None if no 1 is buffered."""
        if self.acc == 0:
            return None
        return self.nbits - self.acc.bit_length()


@dataclass
class StreamDecodeResult:
    values: np.ndarray
    max_buffered_bytes: dict[StreamType, int]
    blocks_read: int
    superblocks: int


class _BlockFeed:
    def __init__(self, sbs: list[Superblock]):
        self.blocks = iter(iter_blocks(sbs))
        self.read = 0
        self.buffers: dict[StreamType, _BitBuffer] = {}

    def fetch(self, ty: StreamType):
        block = next(self.blocks, None)
        if block is None or block.is_pad:
            raise FormatError(f"stream {ty.name} starved: no block left")
        if block.tag != ty:
            raise FormatError(f"out-of-order block: expected {ty.name}, got tag {block.tag}")
        self.read += 1
        buf = self.buffers[ty]
        buf.feed(block.payload)
        if buf.nbits > 8 * MAX_BUFFER_BYTES:
            raise FormatError(f"decoder buffer for {ty.name} exceeds {MAX_BUFFER_BYTES} bytes")

    def need(self, ty: StreamType, nbits: int) -> int:
        buf = self.buffers[ty]
        while buf.nbits < nbits:
            self.fetch(ty)
        return buf.read(nbits)

    def unary(self) -> int:
        buf = self.buffers[StreamType.EXPONENT]
        while True:
            z = buf.leading_zeros()
            if z is not None:
                buf.read(z + 1)
                return z
            self.fetch(StreamType.EXPONENT)


def streaming_decode(sbs: list[Superblock], header: TensorHeader, view: str = "target") -> StreamDecodeResult:
    """Decode a packed tensor consuming cache blocks strictly in arrival order.

    Each element is decoded as soon as its fields are buffered; a block is
    pulled only when the stream it belongs to runs out.
    """
    if view not in VIEW_TYPES:
        raise ValueError(f"view must be 'draft' or 'target', got {view!r}")
    types = VIEW_TYPES[view]
    feed = _BlockFeed(sbs)
    feed.buffers = {ty: _BitBuffer() for ty in types}
    sizes = stream_bytes(header, view)
    for ty in types:
        if sizes[ty]:
            feed.fetch(ty)

    n, bs = header.n, header.block_size
    hw, tb = header.high_width, header.truncated_bits
    unary = header.mode == MODE_UNARY
    target = view == "target"
    keep = np.zeros(n, dtype=bool)
    signs, exps, high, low, pruned = [], [], [], [], []
    shared = 0
    if unary:
        lut = header.codebook.ranked_symbols
    for i in range(n):
        if feed.need(StreamType.BITMAP, 1):
            keep[i] = True
            signs.append(feed.need(StreamType.SIGNS, 1))
            if unary:
                rank = feed.unary()
                if rank >= len(lut):
                    raise FormatError(f"rank {rank} outside codebook")
                exps.append(lut[rank])
            else:
                if len(signs) % bs == 1 or bs == 1:
                    shared = feed.need(StreamType.EXPONENT, 8)
                exps.append(shared)
            high.append(feed.need(StreamType.MANTISSA_HIGH, hw) if hw else 0)
            if target:
                low.append(feed.need(StreamType.MANTISSA_LOW, tb) if tb else 0)
        elif target:
            pruned.append(feed.need(StreamType.PRUNED, 16))
    if len(signs) != header.k:
        raise FormatError(f"bitmap holds {len(signs)} kept elements, header says {header.k}")
    for block in feed.blocks:
        if not block.is_pad:
            raise FormatError(f"unconsumed block of tag {block.tag}")
    values = _assemble(
        header, view, keep, signs, exps, high, low,
        np.array(pruned, dtype=np.uint16),
    )
    return StreamDecodeResult(
        values=values,
        max_buffered_bytes={ty: -(-feed.buffers[ty].max_bits // 8) for ty in types},
        blocks_read=feed.read,
        superblocks=len(sbs),
    )
