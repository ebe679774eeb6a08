"""Weight quality metrics and parameter-size accounting."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .affine import round_half_away

MANTISSA_FIELD = 32
EXPONENT_FIELD = 6
ZERO_POINT_FIELD = 8
SHIFT_FIELD = 4
COUNT_FIELD = 32


def overlap_ratio(w) -> float:
    """Mean over channels of (channel range) / (range of the whole tensor)."""
    cols = np.asarray(w, dtype=np.float64)
    cols = cols.reshape(-1, cols.shape[-1])
    lo, hi = cols.min(axis=0), cols.max(axis=0)
    full = hi.max() - lo.min()
    if not full > 0:
        raise ValueError("overlap ratio is undefined for a constant tensor")
    return float(np.mean((hi - lo) / full))


def quant_error(w, w_star) -> float:
    w = np.asarray(w, dtype=np.float64)
    w_star = np.asarray(w_star, dtype=np.float64)
    if w.shape != w_star.shape:
        raise ValueError(f"shape mismatch {w.shape} vs {w_star.shape}")
    return float(np.mean((w - w_star) ** 2))


@dataclass(frozen=True)
class LayerGeometry:
    kh: int
    kw: int
    cin: int    # 1 for depthwise
    cout: int

    @classmethod
    def depthwise(cls, k: int, channels: int):
        return cls(k, k, 1, channels)

    @classmethod
    def conv(cls, k: int, cin: int, cout: int):
        return cls(k, k, cin, cout)

    @classmethod
    def of(cls, weights):
        kh, kw, cin, cout = np.shape(weights)
        return cls(kh, kw, cin, cout)

    @property
    def elements(self) -> int:
        return self.kh * self.kw * self.cin * self.cout


@dataclass(frozen=True)
class SchemeSizeReport:
    """Logical bit counts of one layer's quantized weight parameters."""

    scheme: str
    weight_bits: int
    compound_bits: int
    zero_point_bits: int
    shift_bits: int

    @property
    def overhead_bits(self) -> int:
        return self.compound_bits + self.zero_point_bits + self.shift_bits

    @property
    def total_bits(self) -> int:
        return self.weight_bits + self.overhead_bits

    @property
    def total_bytes(self) -> float:
        return self.total_bits / 8

    def __add__(self, other: SchemeSizeReport) -> SchemeSizeReport:
        if other.scheme != self.scheme:
            raise ValueError("cannot add size reports of different schemes")
        return SchemeSizeReport(
            self.scheme,
            self.weight_bits + other.weight_bits,
            self.compound_bits + other.compound_bits,
            self.zero_point_bits + other.zero_point_bits,
            self.shift_bits + other.shift_bits,
        )


def weight_payload_bits(elements: int, sparsity: float | None = None, value_bits: int = 8) -> int:
    """Dense: ``value_bits`` per element.  Sparse: 1-bit mask + packed nonzeros + 32-bit count."""
    if sparsity is None:
        return value_bits * elements
    if not 0 <= sparsity <= 1:
        raise ValueError("sparsity must be a fraction in [0, 1]")
    nnz = int(round_half_away(elements * (1 - sparsity)))
    return elements + value_bits * nnz + COUNT_FIELD


def param_size(geometry: LayerGeometry, scheme: str, sparsity: float | None = None) -> SchemeSizeReport:
    n = geometry.cout
    sets = n if scheme == "cwq" else 1
    if scheme not in ("lwq", "cwq", "wes"):
        raise ValueError(f"unknown scheme {scheme!r}")
    return SchemeSizeReport(
        scheme=scheme,
        weight_bits=weight_payload_bits(geometry.elements, sparsity),
        compound_bits=(MANTISSA_FIELD + EXPONENT_FIELD) * sets,
        zero_point_bits=ZERO_POINT_FIELD * sets,
        shift_bits=SHIFT_FIELD * n if scheme == "wes" else 0,
    )


def overhead(report: SchemeSizeReport, baseline: SchemeSizeReport) -> float:
    """Relative size increase of ``report`` over ``baseline`` (0.055 means +5.5 %)."""
    return (report.total_bits - baseline.total_bits) / baseline.total_bits


def model_param_size(weights, scheme: str, sparsity: float | None = None) -> SchemeSizeReport:
    """Sum of :func:`param_size` over a sequence of HWIO weight tensors."""
    reports = [param_size(LayerGeometry.of(w), scheme, sparsity) for w in weights]
    total = reports[0]
    for r in reports[1:]:
        total = total + r
    return total
