"""MSB-first bitstreams backed by ``bytes``."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import FormatError


@dataclass(frozen=True)
class Bitstream:
    data: bytes
    bit_length: int

    def __post_init__(self):
        if self.bit_length > 8 * len(self.data):
            raise ValueError("bit_length exceeds buffer")

    @classmethod
    def from_bits(cls, bits: np.ndarray) -> "Bitstream":
        bits = np.asarray(bits, dtype=np.uint8)
        return cls(np.packbits(bits).tobytes(), int(bits.size))

    @classmethod
    def empty(cls) -> "Bitstream":
        return cls(b"", 0)

    def bits(self) -> np.ndarray:
        """All ``bit_length`` bits as a uint8 array of 0/1."""
        arr = np.unpackbits(np.frombuffer(self.data, dtype=np.uint8))
        return arr[: self.bit_length]

    @property
    def nbytes(self) -> int:
        return len(self.data)

    def __str__(self) -> str:
        return "".join("1" if b else "0" for b in self.bits())


def pack_fixed(values: np.ndarray, width: int) -> Bitstream:
    """Concatenate ``width``-bit fields, most significant bit first."""
    values = np.asarray(values, dtype=np.uint32).ravel()
    if width == 0 or values.size == 0:
        return Bitstream.empty()
    shifts = np.arange(width - 1, -1, -1, dtype=np.uint32)
    bits = ((values[:, None] >> shifts) & 1).astype(np.uint8)
    return Bitstream.from_bits(bits.ravel())


def unpack_fixed(stream: Bitstream, count: int, width: int) -> np.ndarray:
    if width == 0 or count == 0:
        return np.zeros(count, dtype=np.uint32)
    need = count * width
    if stream.bit_length < need:
        raise FormatError("truncated stream")
    bits = stream.bits()[:need].reshape(count, width).astype(np.uint32)
    weights = (1 << np.arange(width - 1, -1, -1, dtype=np.uint32)).astype(np.uint32)
    return bits @ weights
