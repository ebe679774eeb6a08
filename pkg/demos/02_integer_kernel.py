"""
The integer convolution kernel
==============================

At inference time everything is integer.  Each output is

    z_out + act(round(acc * M / 2**(31 - e + S_i)))

where ``acc`` is the int32 accumulator (plus bias), ``M * 2**(e - 31)`` is
the layer's real rescaling factor ``s_in * s_w / s_out`` and ``S_i`` is the
channel's shift.  Undoing the shift costs nothing extra: it just adds to
the right-shift amount.

This demo traces one output by hand, then checks the kernel against a
float reference and against an unfused two-stage version.
"""
import numpy as np

from wesq.affine import AffineParams, ScaleCompound, make_scale_compound
from wesq.fixedpoint import (
    FixedPointContext,
    conformance_bound,
    conv_fixed,
    conv_two_stage,
    dequantize_output,
    float_reference,
)
from wesq.model import QuantizedLayer

######################################################################
# 1. One multiply by hand
# -----------------------
#
# q_in=12, z_in=2, q_w=5, z_w=1 gives acc = 10 * 4 = 40.  With a unit
# compound (M = 2**30, e = 1) and z_out = 3 the output is 43.  A shift of
# 2 divides by four: 40 / 4 = 10, output 13.

unit = ScaleCompound(1 << 30, 1)
for shift in (0, 2):
    ctx = FixedPointContext(
        q_in=np.full((1, 1, 1), 12, np.uint8), z_in=2,
        q_w=np.full((1, 1, 1, 1), 5, np.uint8), z_w=np.array([1]),
        q_bias=np.array([0]), mantissa=np.array([unit.mantissa]), exponent=np.array([unit.exponent]),
        shifts=np.array([shift]), z_out=3,
    )
    print(f"S={shift}: output {conv_fixed(ctx).item()}")

######################################################################
# 2. A random depthwise layer with mixed shifts
# ---------------------------------------------

rng = np.random.default_rng(7)
n = 16
s_in, s_w, s_out = 0.02, np.float32(0.003), 0.004
layer = QuantizedLayer(
    kind="depthwise_conv2d", scheme="wes",
    q_w=rng.integers(0, 256, (3, 3, 1, n), dtype=np.uint8),
    w_scale=np.array([s_w]), w_zero=np.array([128], np.uint8),
    q_bias=rng.integers(-3000, 3000, n).astype(np.int32),
    compounds=(make_scale_compound(s_in, float(s_w), s_out),),
    in_params=AffineParams(s_in, 100), out_params=AffineParams(s_out, 128),
    shifts=rng.integers(0, 8, n).astype(np.uint8),
    padding=(1, 1, 1, 1), activation="relu6",
).validate()
q_in = rng.integers(0, 256, (6, 6, n), dtype=np.uint8)
ctx = FixedPointContext.from_layer(layer, q_in)
out = conv_fixed(ctx)
print(f"\nshifts {layer.shifts.tolist()}")
print(f"output shape {out.shape}, compound M={layer.compounds[0].mantissa} e={layer.compounds[0].exponent}")

######################################################################
# 3. Conformance
# --------------
#
# Dequantized integer outputs stay within half an output step (plus a
# hair for the 31-bit mantissa) of the float computation.

dev = np.abs(float_reference(layer, q_in) - dequantize_output(layer, out))
print(f"max deviation {dev.max() / layer.out_params.scale:.4f} output steps "
      f"(bound {conformance_bound(layer) / layer.out_params.scale:.6f})")

######################################################################
# 4. Fused versus unfused
# -----------------------
#
# The two-stage twin rescales by the compound first and divides by
# ``2**S_i`` afterwards, in exact rational arithmetic.  Byte for byte the
# result is the same.

print("identical to two-stage:", conv_two_stage(ctx).tobytes() == out.tobytes())
