"""Uniform affine (asymmetric) quantization primitives.

Scales are kept as float32-representable values so that they survive a
trip through the binary model format unchanged.  All arithmetic happens in
float64; with a float32 scale and an 8-bit integer the products ``s * q``
are exact, which is what makes the zero point dequantize to exactly 0.0.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import BiasOverflowError

INT32_MIN = -(1 << 31)
INT32_MAX = (1 << 31) - 1


def round_half_away(x):
    """Round to nearest integer, ties away from zero (works on scalars and arrays)."""
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


@dataclass(frozen=True)
class AffineParams:
    """Scale and zero point of an affine quantizer.

    The nudged range is derived, not stored: ``nudged_min = -z * s`` and
    ``nudged_max = nudged_min + (2**bits - 1) * s``.
    """

    scale: float
    zero_point: int
    bits: int = 8

    def __post_init__(self):
        if not self.scale > 0 or not math.isfinite(self.scale):
            raise ValueError(f"scale must be positive and finite, got {self.scale}")
        if not 0 <= self.zero_point <= self.qmax:
            raise ValueError(f"zero point {self.zero_point} outside [0, {self.qmax}]")

    @property
    def qmax(self) -> int:
        return (1 << self.bits) - 1

    @property
    def nudged_min(self) -> float:
        return -self.zero_point * self.scale

    @property
    def nudged_max(self) -> float:
        return self.nudged_min + self.qmax * self.scale


def nudged_range(min_raw, max_raw, bits: int = 8) -> AffineParams:
    """Affine parameters for ``[min_raw, max_raw]`` with 0.0 exactly representable.

    The range is widened to include zero first.  A range that collapses to
    ``[0, 0]`` gets ``s=1, z=0`` by convention.
    """
    lo = min(float(min_raw), 0.0)
    hi = max(float(max_raw), 0.0)
    if not (math.isfinite(lo) and math.isfinite(hi)):
        raise ValueError("range bounds must be finite")
    qmax = (1 << bits) - 1
    if hi == lo:
        return AffineParams(1.0, 0, bits)
    scale = float(np.float32((hi - lo) / qmax))
    if scale == 0.0:
        # Range narrower than the smallest float32 step.
        scale = float(np.finfo(np.float32).smallest_subnormal)
    zero_point = int(round_half_away(-lo / scale))
    return AffineParams(scale, min(max(zero_point, 0), qmax), bits)


def quantize_affine(w, p: AffineParams) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    clamped = np.clip(w, p.nudged_min, p.nudged_max)
    q = round_half_away((clamped - p.nudged_min) / p.scale)
    return np.clip(q, 0, p.qmax).astype(np.uint8 if p.bits <= 8 else np.uint32)


def dequantize(q, p: AffineParams) -> np.ndarray:
    return p.scale * np.asarray(q, dtype=np.float64) + p.nudged_min


def fake_quantize(w, bits: int = 8):
    """Quantize then dequantize ``w`` with a range taken from ``w`` itself."""
    w = np.asarray(w, dtype=np.float64)
    p = nudged_range(w.min(), w.max(), bits)
    return dequantize(quantize_affine(w, p), p), p


def quantize_bias(bias, s_in, s_w) -> np.ndarray:
    """Quantize a bias vector to int32 with scale ``s_in * s_w``.

    ``s_w`` may be a scalar or a per-channel vector.  Raises
    :class:`BiasOverflowError` if any element leaves the int32 range.
    """
    denom = np.asarray(s_in, dtype=np.float64) * np.asarray(s_w, dtype=np.float64)
    if np.any(denom <= 0):
        raise ValueError("bias scale must be positive")
    q = round_half_away(np.asarray(bias, dtype=np.float64) / denom)
    q = np.atleast_1d(q)
    bad = np.flatnonzero((q < INT32_MIN) | (q > INT32_MAX) | ~np.isfinite(q))
    if bad.size:
        i = int(bad[0])
        raise BiasOverflowError(
            f"quantized bias overflows int32 at channel {i} "
            f"(value {q[i]:.4g}, scale {np.broadcast_to(denom, q.shape)[i]:.4g})"
        )
    return q.astype(np.int32)


MANTISSA_BITS = 31
EXP_MIN, EXP_MAX = -32, 31


@dataclass(frozen=True)
class ScaleCompound:
    """Requantization multiplier ``M / 2**31 * 2**exponent`` with ``M`` in ``[2**30, 2**31)``."""

    mantissa: int
    exponent: int

    @property
    def real(self) -> float:
        return math.ldexp(self.mantissa, self.exponent - MANTISSA_BITS)


def decompose_multiplier(c):
    """Vectorized mantissa/exponent split of positive reals.

    Returns ``(M, e)`` int64 arrays with ``M`` in ``[2**30, 2**31)`` and
    ``c ~= M * 2**(e - 31)``.  Exponent range is not checked here.
    """
    c = np.asarray(c, dtype=np.float64)
    if np.any(~(c > 0)) or np.any(~np.isfinite(c)):
        raise ValueError("scale compound must be positive and finite")
    frac, exp = np.frexp(c)
    m = round_half_away(np.ldexp(frac, MANTISSA_BITS)).astype(np.int64)
    carry = m == (1 << MANTISSA_BITS)
    m = np.where(carry, 1 << (MANTISSA_BITS - 1), m)
    exp = np.where(carry, exp + 1, exp).astype(np.int64)
    return m, exp


def make_scale_compound(s_in, s_w, s_out) -> ScaleCompound:
    if not (s_in > 0 and s_w > 0 and s_out > 0):
        raise ValueError("scales must be positive")
    c = float(s_in) * float(s_w) / float(s_out)
    m, e = decompose_multiplier(c)
    m, e = int(m), int(e)
    if not EXP_MIN <= e <= EXP_MAX:
        raise OverflowError(
            f"scale compound {c:.4g} needs exponent {e}, outside [{EXP_MIN}, {EXP_MAX}]"
        )
    return ScaleCompound(m, e)
