"""Speculation/verification tensor format, hardware decoder model and
self-speculative decoding simulator for bfloat16 weights and KV caches."""

from .container import (
    CassandraTensor,
    CompressionStats,
    DraftConfig,
    compression_stats,
    decode_draft,
    decode_target,
    encode_tensor,
    from_bytes,
    to_bytes,
)
from .errors import FormatError, NonFiniteError
from .selection import KeepBitmap

__version__ = "0.1.0"

__all__ = [
    "CassandraTensor",
    "CompressionStats",
    "DraftConfig",
    "FormatError",
    "KeepBitmap",
    "NonFiniteError",
    "compression_stats",
    "decode_draft",
    "decode_target",
    "encode_tensor",
    "from_bytes",
    "to_bytes",
]
