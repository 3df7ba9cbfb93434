"""Superblock packing of container streams into typed 128-byte cache blocks.

The packer replays the decoder's element-by-element consumption of every
stream and emits the next block of a stream exactly when the decoder would
otherwise run dry. The first block of every non-empty stream is sent up
front. Ties inside one element step are broken by stream order, which is
also the order the decoder reads an element's fields in.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from .container import MODE_UNARY, SECTIONS, CassandraTensor, TensorHeader, keep_mask
from .errors import FormatError

BLOCK_BYTES = 128
BLOCK_BITS = 8 * BLOCK_BYTES
DEFAULT_BLOCKS_PER_SUPERBLOCK = 8
PAD_TAG = 0xFF


class StreamType(IntEnum):
    BITMAP = 0
    SIGNS = 1
    EXPONENT = 2
    MANTISSA_HIGH = 3
    MANTISSA_LOW = 4
    PRUNED = 5

    @property
    def section(self) -> str:
        return SECTIONS[self.value]


VIEW_TYPES = {
    "draft": (StreamType.BITMAP, StreamType.SIGNS, StreamType.EXPONENT, StreamType.MANTISSA_HIGH),
    "target": tuple(StreamType),
}


@dataclass(frozen=True)
class CacheBlock:
    tag: int
    payload: bytes

    @property
    def is_pad(self) -> bool:
        return self.tag == PAD_TAG


@dataclass(frozen=True)
class Superblock:
    index: int
    blocks: tuple[CacheBlock, ...]


def stream_bytes(header: TensorHeader, view: str) -> dict[StreamType, int]:
    """Byte length of every stream a view reads, computed from the header.

    The unary exponent stream is variable, so for mode 1 this returns the
    lower bound of one byte; callers holding the container should prefer
    the real section sizes.
    """
    n, k, t = header.n, header.k, header.truncated_bits
    sizes = {
        StreamType.BITMAP: -(-n // 8),
        StreamType.SIGNS: -(-k // 8),
        StreamType.EXPONENT: 1 if header.mode == MODE_UNARY else header.exponent_blocks,
        StreamType.MANTISSA_HIGH: -(-(k * header.high_width) // 8),
        StreamType.MANTISSA_LOW: -(-(k * t) // 8),
        StreamType.PRUNED: 2 * (n - k),
    }
    return {ty: sizes[ty] for ty in VIEW_TYPES[view]}


def consumption(t: CassandraTensor, view: str) -> dict[StreamType, np.ndarray]:
    """Cumulative bits of each stream consumed after each element step."""
    keep = keep_mask(t)
    kept_idx = np.cumsum(keep) - 1
    kf = keep.astype(np.int64)
    inc = {
        StreamType.BITMAP: np.ones(t.n, dtype=np.int64),
        StreamType.SIGNS: kf,
        StreamType.MANTISSA_HIGH: kf * t.high_width,
        StreamType.MANTISSA_LOW: kf * t.truncated_bits,
        StreamType.PRUNED: (1 - kf) * 16,
    }
    if t.mode == MODE_UNARY:
        ones = np.flatnonzero(t.spec_exponents.bits())[: t.k]
        lengths = np.diff(ones, prepend=-1)
        exp_inc = np.zeros(t.n, dtype=np.int64)
        exp_inc[keep] = lengths
    else:
        exp_inc = (keep & (kept_idx % t.block_size == 0)).astype(np.int64) * 8
    inc[StreamType.EXPONENT] = exp_inc
    return {ty: np.cumsum(inc[ty]) for ty in VIEW_TYPES[view]}


def schedule(t: CassandraTensor, view: str) -> list[tuple[int, StreamType, int]]:
    """(element step, stream, block number) for every block, in send order.

    Step -1 marks the warm-up blocks.
    """
    if view not in VIEW_TYPES:
        raise ValueError(f"view must be 'draft' or 'target', got {view!r}")
    cum = consumption(t, view)
    events = []
    for ty in VIEW_TYPES[view]:
        nbytes = t.section(ty.section).nbytes
        nblocks = -(-nbytes // BLOCK_BYTES)
        if nblocks == 0:
            continue
        events.append((-1, ty, 0))
        if nblocks > 1:
            need = np.arange(1, nblocks) * BLOCK_BITS
            steps = np.searchsorted(cum[ty], need, side="right")
            events.extend((int(s), ty, b) for b, s in enumerate(steps.tolist(), start=1))
    events.sort(key=lambda e: (e[0], int(e[1]), e[2]))
    return events


def pack(
    t: CassandraTensor,
    view: str = "target",
    blocks_per_superblock: int = DEFAULT_BLOCKS_PER_SUPERBLOCK,
) -> list[Superblock]:
    if blocks_per_superblock < 1:
        raise ValueError("blocks_per_superblock must be >= 1")
    blocks = []
    for _, ty, b in schedule(t, view):
        data = t.section(ty.section).data[b * BLOCK_BYTES : (b + 1) * BLOCK_BYTES]
        blocks.append(CacheBlock(int(ty), data.ljust(BLOCK_BYTES, b"\0")))
    pad = CacheBlock(PAD_TAG, bytes(BLOCK_BYTES))
    out = []
    for i in range(0, len(blocks), blocks_per_superblock):
        group = blocks[i : i + blocks_per_superblock]
        group += [pad] * (blocks_per_superblock - len(group))
        out.append(Superblock(len(out), tuple(group)))
    return out


def iter_blocks(sbs: list[Superblock]):
    """Blocks in arrival order, checking superblock indices are 0, 1, 2, ..."""
    for expected, sb in enumerate(sbs):
        if sb.index != expected:
            kind = "duplicate" if sb.index < expected else "missing"
            raise FormatError(f"{kind} superblock index: expected {expected}, got {sb.index}")
        yield from sb.blocks


def unpack(sbs: list[Superblock], lengths: dict[StreamType, int] | None = None) -> dict[StreamType, bytes]:
    """Concatenate same-type blocks in arrival order.

    Without ``lengths`` the tail padding of each stream's last block is kept.
    """
    parts: dict[StreamType, list[bytes]] = {}
    for block in iter_blocks(sbs):
        if block.is_pad:
            continue
        try:
            ty = StreamType(block.tag)
        except ValueError:
            raise FormatError(f"unknown block tag {block.tag}") from None
        parts.setdefault(ty, []).append(block.payload)
    out = {ty: b"".join(p) for ty, p in parts.items()}
    if lengths is not None:
        for ty, size in lengths.items():
            got = out.get(ty, b"")
            if len(got) < size:
                raise FormatError(f"stream {ty.name} truncated: {len(got)} < {size} bytes")
            out[ty] = got[:size]
    return out


def section_lengths(t: CassandraTensor, view: str) -> dict[StreamType, int]:
    return {ty: t.section(ty.section).nbytes for ty in VIEW_TYPES[view] if t.section(ty.section).nbytes}


# -- serialised form (appended to a .cass file) --------------------------------

_VIEW_CODE = {"draft": 0, "target": 1}


def serialize(sbs: list[Superblock], view: str) -> bytes:
    bps = len(sbs[0].blocks) if sbs else DEFAULT_BLOCKS_PER_SUPERBLOCK
    out = bytearray(struct.pack("<BHI", _VIEW_CODE[view], bps, len(sbs)))
    for sb in sbs:
        out += struct.pack("<I", sb.index)
        for block in sb.blocks:
            out.append(block.tag)
            out += block.payload
    return bytes(out)


def deserialize(data: bytes) -> tuple[str, list[Superblock]]:
    if len(data) < 7:
        raise FormatError("truncated superblock section")
    code, bps, count = struct.unpack_from("<BHI", data, 0)
    views = {v: k for k, v in _VIEW_CODE.items()}
    if code not in views or bps == 0:
        raise FormatError("bad superblock section header")
    pos = 7
    sb_size = 4 + bps * (1 + BLOCK_BYTES)
    if len(data) != pos + count * sb_size:
        raise FormatError("superblock section has wrong size")
    sbs = []
    for _ in range(count):
        (index,) = struct.unpack_from("<I", data, pos)
        pos += 4
        blocks = []
        for _ in range(bps):
            blocks.append(CacheBlock(data[pos], bytes(data[pos + 1 : pos + 1 + BLOCK_BYTES])))
            pos += 1 + BLOCK_BYTES
        sbs.append(Superblock(index, tuple(blocks)))
    return views[code], sbs
