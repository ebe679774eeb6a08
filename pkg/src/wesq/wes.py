"""Weight equalizing shift scaler.

Each output channel of a weight tensor is multiplied by a power of two
``2**S_i`` (``S_i`` in 0..15) so that every channel's symmetric range lands
just below a common total range.  The tensor is then quantized layer-wise
and the integer kernel undoes the shift with a right shift.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .affine import dequantize, nudged_range, quantize_affine
from .errors import DegenerateLayerError
from .optimize import nelder_mead

log = logging.getLogger(__name__)

MAX_SHIFT = 15


@dataclass
class ChannelRanges:
    min: np.ndarray
    max: np.ndarray
    r: np.ndarray

    @property
    def n(self) -> int:
        return self.r.size


@dataclass
class WesResult:
    weights: np.ndarray
    bias: np.ndarray
    shifts: np.ndarray
    r_hat: float
    cost: float
    iterations: int
    r_hat_init: float
    cost_init: float


def _by_channel(w) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    return w.reshape(-1, w.shape[-1])


def channel_ranges(w) -> ChannelRanges:
    cols = _by_channel(w)
    lo, hi = cols.min(axis=0), cols.max(axis=0)
    return ChannelRanges(lo, hi, 2 * np.maximum(np.abs(lo), np.abs(hi)))


def init_total_range(ranges: ChannelRanges) -> float:
    r_hat = float(ranges.r.max())
    if r_hat <= 0:
        raise DegenerateLayerError("degenerate layer: every weight channel is zero")
    return r_hat


def shift_scales(r_hat: float, ranges: ChannelRanges, clamp_log=None) -> np.ndarray:
    """``floor(log2(r_hat / r_i))`` clamped to ``[0, 15]``; zero channels get 0.

    Evaluated as the largest integer ``k`` with ``r_i * 2**k <= r_hat`` using
    exact ``ldexp`` comparisons, so powers of two never round the wrong way.
    """
    if not r_hat > 0:
        raise ValueError("total range must be positive")
    r = np.asarray(ranges.r, dtype=np.float64)
    live = r > 0
    k = np.zeros(r.shape, dtype=np.int64)
    with np.errstate(divide="ignore"):
        k[live] = np.floor(np.log2(r_hat / r[live])).astype(np.int64)
    k = np.clip(k, -64, 64)
    # Fix off-by-one from the floating-point log.
    too_big = live & (np.ldexp(r, k) > r_hat)
    k[too_big] -= 1
    fits_more = live & (np.ldexp(r, k + 1) <= r_hat)
    k[fits_more] += 1
    clamped = np.clip(k, 0, MAX_SHIFT)
    if clamp_log is not None and np.any(k > MAX_SHIFT):
        clamp_log.info("%d channel shift(s) clamped to %d", int(np.sum(k > MAX_SHIFT)), MAX_SHIFT)
    return clamped.astype(np.uint8)


def apply_shift(w, b, shifts):
    """Scale channel ``i`` of ``w`` and ``b[i]`` by ``2**shifts[i]`` (exact)."""
    shifts = np.asarray(shifts, dtype=np.int64)
    w = np.asarray(w)
    if shifts.shape != (w.shape[-1],):
        raise ValueError("need one shift per output channel")
    dtype = np.result_type(w.dtype, np.float32)
    with np.errstate(over="ignore"):
        ws = np.ldexp(w.astype(dtype), shifts.astype(np.int32))
        bs = np.ldexp(np.asarray(b, dtype=dtype), shifts.astype(np.int32))
    if not (np.all(np.isfinite(ws)) and np.all(np.isfinite(bs))):
        raise OverflowError("shifted weights or bias overflow to infinity")
    return ws, bs


def _cost(cols, ranges, r_hat, bits):
    shifts = shift_scales(r_hat, ranges).astype(np.int32)
    shifted = np.ldexp(cols, shifts)
    p = nudged_range(shifted.min(), shifted.max(), bits)
    restored = np.ldexp(dequantize(quantize_affine(shifted, p), p), -shifts)
    return float(np.mean((cols - restored) ** 2))


def wes_cost(w, r_hat: float, bits: int = 8) -> float:
    """Mean squared error of shift -> layer-wise fake quantization -> inverse shift."""
    cols = _by_channel(w)
    return _cost(cols, channel_ranges(cols), r_hat, bits)


def optimize_total_range(w, tol: float = 1e-8, max_iter: int = 200, bits: int = 8):
    """Refine the total range with a one-dimensional Nelder-Mead search.

    Starts from the simplex ``{r0, 1.05 * r0}`` with ``r0`` the largest
    channel range.  Candidates at or below ``r0 / 2**16`` are rejected.
    Returns ``(r_hat, cost, iterations)``; the cost never exceeds the cost
    at ``r0``.
    """
    cols = _by_channel(w)
    ranges = channel_ranges(cols)
    r0 = init_total_range(ranges)
    floor = r0 / 2.0 ** 16

    def f(x):
        r_hat = float(x[0])
        if r_hat <= floor:
            return np.inf
        return _cost(cols, ranges, r_hat, bits)

    cost0 = f([r0])
    res = nelder_mead(f, [[r0], [1.05 * r0]], tol=tol, max_iter=max_iter)
    if res.fun < cost0:
        return float(res.x[0]), res.fun, res.nit
    return r0, cost0, res.nit


def wes(w, b, tol: float = 1e-8, max_iter: int = 200, bits: int = 8, iterative: bool = True) -> WesResult:
    """Full weight equalization of one layer: pick the total range, then shift."""
    ranges = channel_ranges(w)
    r0 = init_total_range(ranges)
    cost0 = wes_cost(w, r0, bits)
    if iterative:
        r_hat, cost, nit = optimize_total_range(w, tol, max_iter, bits)
    else:
        r_hat, cost, nit = r0, cost0, 0
    shifts = shift_scales(r_hat, ranges, clamp_log=log)
    ws, bs = apply_shift(w, b, shifts)
    return WesResult(ws, bs, shifts, r_hat, cost, nit, r0, cost0)
