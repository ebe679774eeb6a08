"""
Equalizing channel ranges with power-of-two shifts
==================================================

Depthwise convolutions are the classic trouble spot for layer-wise 8-bit
quantization.  Each output channel is an independent 3x3 filter, so the
ranges of the channels can differ by two orders of magnitude.  One shared
quantization step is then far too coarse for the narrow channels.

Per-channel quantization fixes this by giving every channel its own
scale, at the price of one (mantissa, exponent, zero point) set per
channel.  The shift-scaler approach keeps a single set and instead
multiplies each channel by ``2**S_i`` before quantizing, so every channel
fills about the same range.  The integer kernel later divides the shift
back out with a right shift.

This script walks through that on a synthetic depthwise layer.
"""
import numpy as np

from wesq.affine import fake_quantize
from wesq.metrics import LayerGeometry, overhead, overlap_ratio, param_size
from wesq.quantizer import fake_quantize_weights
from wesq.wes import channel_ranges, init_total_range, shift_scales, wes, wes_cost

rng = np.random.default_rng(2)

######################################################################
# 1. A layer with wildly different channel ranges
# -----------------------------------------------
#
# 32 channels of uniform noise, each rescaled so its symmetric range is
# drawn log-uniformly between 1/100 and 1 of the widest one.

channels = 32
r = 2.0 * np.exp(rng.uniform(-np.log(100), 0, channels))
w = rng.uniform(-1, 1, (3, 3, 1, channels))
w = w / np.abs(w).reshape(-1, channels).max(axis=0) * r / 2

ranges = channel_ranges(w)
print(f"widest channel range  {ranges.r.max():.4f}")
print(f"narrowest             {ranges.r.min():.4f}")
print(f"overlap ratio         {overlap_ratio(w):.3f}  (1.0 means every channel spans the full tensor)")

######################################################################
# 2. Deterministic shifts
# -----------------------
#
# The initial total range is the widest channel range.  Each channel gets
# the largest shift that keeps it inside that range.

r0 = init_total_range(ranges)
s = shift_scales(r0, ranges)
print("\nshift scales:", s.tolist())
print("histogram   :", np.bincount(s, minlength=16).tolist())
shifted = np.ldexp(w, s.astype(int))
print(f"overlap ratio after shifting {overlap_ratio(shifted):.3f}")

######################################################################
# 3. Searching the total range
# ----------------------------
#
# The widest channel is not necessarily the best total range.  Moving it
# up or down changes which channels earn one more shift, and how coarse
# the shared grid is.  A one-dimensional simplex search over the total
# range minimizes the weight quantization error.

res = wes(w, np.zeros(channels))
print(f"\ntotal range  {res.r_hat_init:.5f} -> {res.r_hat:.5f} after {res.iterations} iterations")
print(f"weight MSE   {res.cost_init:.3e} -> {res.cost:.3e}")
assert res.cost <= wes_cost(w, r0)

######################################################################
# 4. Comparing the three schemes
# ------------------------------

lwq = np.mean((fake_quantize(w)[0] - w) ** 2)
cwq = np.mean((fake_quantize_weights(w, "cwq") - w) ** 2)
print(f"\nweight MSE  layer-wise {lwq:.3e}   per-channel {cwq:.3e}   shift-scaled {res.cost:.3e}")
print(f"shift scaling cuts the layer-wise error by {lwq / res.cost:.1f}x")

geo = LayerGeometry.of(w)
base = param_size(geo, "lwq")
for scheme in ("lwq", "cwq", "wes"):
    size = param_size(geo, scheme)
    print(f"{scheme}: {size.total_bits:6d} bits  (+{100 * overhead(size, base):.2f}% over layer-wise)")
