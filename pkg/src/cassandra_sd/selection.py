"""Choosing which elements become speculation data.

Weights are scored Wanda-style (|W| times the per-input-channel L2 norm of
calibration activations) and the top fraction of each output row is kept.
KV rows use plain per-token magnitude.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class KeepBitmap:
    """One flag per element, row-major; True means speculation data."""

    bits: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "bits", np.asarray(self.bits, dtype=bool))

    @property
    def kept_count(self) -> int:
        return int(np.count_nonzero(self.bits))

    @property
    def size(self) -> int:
        return int(self.bits.size)

    def flat(self) -> np.ndarray:
        return self.bits.ravel()

    @classmethod
    def full(cls, shape) -> "KeepBitmap":
        return cls(np.ones(shape, dtype=bool))


def keep_count(keep_fraction: float, n: int) -> int:
    """round(keep_fraction * n), halves rounded up."""
    return int(math.floor(keep_fraction * n + 0.5))


def calibration_norms(activations: np.ndarray) -> np.ndarray:
    a = np.asarray(activations, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] == 0:
        raise ValueError("calibration activations must be a non-empty [samples, channels] matrix")
    return np.sqrt(np.sum(a * a, axis=0))


def wanda_scores(weights: np.ndarray, norms: np.ndarray) -> np.ndarray:
    w = np.asarray(weights, dtype=np.float64)
    norms = np.asarray(norms, dtype=np.float64)
    if w.ndim != 2 or w.shape[1] != norms.shape[0]:
        raise ValueError(f"shape mismatch: weights {w.shape} vs norms {norms.shape}")
    return np.abs(w) * norms[None, :]


def select_topk_per_row(scores: np.ndarray, keep_fraction: float) -> KeepBitmap:
    """Keep the round(keep_fraction * cols) best entries of every row.

    Ties go to the lower column index.
    """
    if not 0.0 < keep_fraction <= 1.0:
        raise ValueError(f"keep_fraction must be in (0, 1], got {keep_fraction}")
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim != 2:
        raise ValueError("scores must be 2-D")
    rows, cols = s.shape
    k = keep_count(keep_fraction, cols)
    bits = np.zeros((rows, cols), dtype=bool)
    if k >= cols:
        bits[:] = True
    elif k > 0:
        order = np.argsort(-s, axis=1, kind="stable")[:, :k]
        np.put_along_axis(bits, order, True, axis=1)
    return KeepBitmap(bits)


def kv_select_per_token(token_vector: np.ndarray, keep_fraction: float) -> KeepBitmap:
    v = np.abs(np.asarray(token_vector, dtype=np.float64)).reshape(1, -1)
    return KeepBitmap(select_topk_per_row(v, keep_fraction).bits[0])
