"""Magnitude pruning and bitmask sparse packing."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ModelFormatError


def prune(w, threshold: float) -> np.ndarray:
    """Zero every element with ``|w| < threshold``; other elements are untouched."""
    if not np.isfinite(threshold) or threshold < 0:
        raise ValueError("threshold must be finite and non-negative")
    w = np.array(w, copy=True)
    w[np.abs(w) < threshold] = 0
    return w


def sparsity(w) -> float:
    w = np.asarray(w)
    return float(np.count_nonzero(w == 0)) / w.size


@dataclass
class SparseWeights:
    mask: np.ndarray    # bool, shape of the dense tensor
    packed: np.ndarray  # values where mask is set, row-major order
    count: int

    def nbits(self, value_bits: int = 8) -> int:
        """Logical size: 1 bit per element, the packed payload, one 32-bit count."""
        return self.mask.size + value_bits * self.count + 32


def compress(w, fill=0) -> SparseWeights:
    """Pack the elements of ``w`` that differ from ``fill``.

    ``fill`` broadcasts against ``w``; quantized weights pass their zero
    point(s) here since pruned zeros quantize to the zero point.
    """
    w = np.asarray(w)
    mask = w != np.broadcast_to(np.asarray(fill, dtype=w.dtype), w.shape)
    packed = w[mask]
    return SparseWeights(mask, packed, int(packed.size))


def decompress(s: SparseWeights, fill=0) -> np.ndarray:
    mask = np.asarray(s.mask, dtype=bool)
    if int(mask.sum()) != s.count or s.packed.size != s.count:
        raise ModelFormatError(
            f"corrupt sparse weights: mask has {int(mask.sum())} bits set, count is {s.count}, "
            f"{s.packed.size} values packed"
        )
    out = np.empty(mask.shape, dtype=s.packed.dtype)
    out[...] = np.broadcast_to(np.asarray(fill, dtype=out.dtype), mask.shape)
    out[mask] = s.packed
    return out
