"""Integer-only convolution with the inverse channel shift fused into requantization.

For every output element the kernel accumulates
``sum (q_in - z_in) * (q_w - z_w)`` in 32 bits, adds the int32 bias and
requantizes with the layer's scale compound ``M * 2**(s - 31)`` and the
channel shift ``2**-S_i``::

    out = z_out + act(round(acc * M / 2**(31 - s + S_i)))

The product ``acc * M`` is formed exactly in 64 bits and rounded once,
half away from zero.  Rounding after each partial shift would add up to
one output step of error.
"""
from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .affine import INT32_MAX, INT32_MIN, MANTISSA_BITS, ScaleCompound, round_half_away
from .errors import AccumulatorOverflowError
from .floatops import _patches, activate, conv
from .model import QuantizedLayer, QuantizedModel


@dataclass
class FixedPointContext:
    """Everything one integer conv needs, with per-layer values broadcast per channel."""

    q_in: np.ndarray
    z_in: int
    q_w: np.ndarray
    z_w: np.ndarray
    q_bias: np.ndarray
    mantissa: np.ndarray
    exponent: np.ndarray
    shifts: np.ndarray
    z_out: int
    kind: str = "conv2d"
    activation: str = "none"
    relu6_limit: int | None = None
    stride: int = 1
    padding: tuple[int, int, int, int] = (0, 0, 0, 0)

    @classmethod
    def from_layer(cls, layer: QuantizedLayer, q_in) -> FixedPointContext:
        n = layer.out_channels
        q_in = np.asarray(q_in, dtype=np.uint8)
        if layer.kind == "fully_connected":
            q_in = q_in.reshape(1, 1, -1)
        return cls(
            q_in=q_in,
            z_in=layer.in_params.zero_point,
            q_w=layer.q_w,
            z_w=np.broadcast_to(layer.w_zero.astype(np.int64), (n,)),
            q_bias=layer.q_bias.astype(np.int64),
            mantissa=np.broadcast_to(np.array([c.mantissa for c in layer.compounds], dtype=np.int64), (n,)),
            exponent=np.broadcast_to(np.array([c.exponent for c in layer.compounds], dtype=np.int64), (n,)),
            shifts=layer.channel_shifts(),
            z_out=layer.out_params.zero_point,
            kind=layer.kind,
            activation=layer.activation,
            relu6_limit=relu6_limit(layer.out_params.scale) if layer.activation == "relu6" else None,
            stride=layer.stride,
            padding=layer.padding,
        )


def relu6_limit(s_out: float) -> int:
    """Integer image of 6.0 under the output scale."""
    return int(round_half_away(6.0 / s_out))


def rounding_rshift(x, k):
    """Arithmetic right shift of int64 ``x`` by ``k >= 0`` with round-half-away-from-zero.

    ``|x|`` must stay below ``2**62``.
    """
    x = np.asarray(x, dtype=np.int64)
    k = np.minimum(np.asarray(k, dtype=np.int64), 63)
    half = np.where(k > 0, np.left_shift(np.int64(1), np.maximum(k - 1, 0)), 0)
    mag = np.right_shift(np.abs(x) + half, k)
    return np.where(x < 0, -mag, mag)


def _requantize(acc, mantissa, exponent, shifts, z_out, activation, limit):
    prod = np.asarray(acc, dtype=np.int64) * np.asarray(mantissa, dtype=np.int64)
    total = MANTISSA_BITS - np.asarray(exponent, dtype=np.int64) + np.asarray(shifts, dtype=np.int64)
    out = rounding_rshift(prod, total)
    if activation == "relu":
        out = np.maximum(out, 0)
    elif activation == "relu6":
        out = np.clip(out, 0, limit)
    return np.clip(out + z_out, 0, 255).astype(np.uint8)


def requantize(acc32, compound: ScaleCompound, shift: int, z_out: int,
               activation: str = "none", relu6_limit: int | None = None):
    """Map an int32 accumulator to uint8 for one channel (scalars or arrays)."""
    if not 0 <= int(shift) <= 15:
        raise ValueError("shift scale must be in [0, 15]")
    if activation == "relu6" and relu6_limit is None:
        raise ValueError("relu6 needs the integer clamp limit")
    return _requantize(acc32, compound.mantissa, compound.exponent, shift, z_out, activation, relu6_limit)


def check_accumulator(kind, q_w_shape):
    kh, kw, cin, _ = q_w_shape
    depth = kh * kw * (1 if kind == "depthwise_conv2d" else cin)
    if depth * 255 * 255 >= 1 << 31:
        raise AccumulatorOverflowError(
            f"receptive field of {depth} products can overflow a 32-bit accumulator"
        )


def accumulate(ctx: FixedPointContext) -> np.ndarray:
    """Int32 accumulators plus bias, shape (Ho, Wo, N), held in int64."""
    check_accumulator(ctx.kind, ctx.q_w.shape)
    kh, kw, cin, cout = ctx.q_w.shape
    x = ctx.q_in.astype(np.int64)
    if x.ndim != 3:
        raise ValueError("integer input must be (H, W, C)")
    if ctx.kind == "conv2d" and x.shape[-1] != cin:
        raise ValueError(f"input has {x.shape[-1]} channels, weights expect {cin}")
    if ctx.kind == "depthwise_conv2d" and cout % x.shape[-1]:
        raise ValueError("depthwise output channels must be a multiple of input channels")
    if ctx.kind == "fully_connected":
        x = x.reshape(1, 1, -1)
        if x.shape[-1] != cin:
            raise ValueError(f"input has {x.shape[-1]} values, weights expect {cin}")
    wd = ctx.q_w.astype(np.int64) - ctx.z_w  # broadcasts over the output axis
    xd = (x - ctx.z_in)[None]
    # Padding with zeros after subtracting z_in skips out-of-bounds taps.
    if ctx.kind == "fully_connected":
        acc = np.tensordot(xd[0], wd, axes=([0, 1, 2], [0, 1, 2]))[None, None]
    else:
        p = _patches(xd, kh, kw, ctx.stride, ctx.padding)[0]
        if ctx.kind == "conv2d":
            acc = np.tensordot(p, wd, axes=([2, 3, 4], [0, 1, 2]))
        else:
            p = np.repeat(p, cout // x.shape[-1], axis=-1)
            acc = np.einsum("hwijc,ijc->hwc", p, wd[:, :, 0, :])
    acc = acc + ctx.q_bias
    if acc.size and (acc.min() < INT32_MIN or acc.max() > INT32_MAX):
        raise AccumulatorOverflowError("accumulator plus bias leaves the int32 range")
    return acc


def conv_fixed(ctx: FixedPointContext) -> np.ndarray:
    acc = accumulate(ctx)
    return _requantize(acc, ctx.mantissa, ctx.exponent, ctx.shifts, ctx.z_out,
                       ctx.activation, ctx.relu6_limit)


def conv_two_stage(ctx: FixedPointContext) -> np.ndarray:
    """Unfused twin of :func:`conv_fixed` in exact rational arithmetic.

    Stage one rescales the accumulator by the compound alone; stage two
    divides by ``2**S_i`` as a separate per-channel step.  One rounding at
    the end, same mode as the fused kernel.
    """
    acc = accumulate(ctx)
    out = np.empty(acc.shape, dtype=np.uint8)
    n = acc.shape[-1]
    for idx in np.ndindex(acc.shape):
        ch = idx[-1] % n
        stage1 = Fraction(int(acc[idx]) * int(ctx.mantissa[ch]), 1 << MANTISSA_BITS)
        e = int(ctx.exponent[ch])
        stage1 = stage1 * (1 << e) if e >= 0 else stage1 / (1 << -e)
        stage2 = stage1 / (1 << int(ctx.shifts[ch]))
        mag = abs(stage2)
        r = int(mag.numerator * 2 + mag.denominator) // (2 * mag.denominator)
        v = -r if stage2 < 0 else r
        if ctx.activation == "relu":
            v = max(v, 0)
        elif ctx.activation == "relu6":
            v = min(max(v, 0), ctx.relu6_limit)
        out[idx] = min(max(v + ctx.z_out, 0), 255)
    return out


def float_reference(layer: QuantizedLayer, q_in) -> np.ndarray:
    """Float64 evaluation of the layer from dequantized inputs and weights.

    The result is clamped to the range representable by the output
    quantizer, so it can be compared directly with
    ``s_out * (conv_fixed - z_out)``.
    """
    ip, op = layer.in_params, layer.out_params
    x = ip.scale * (np.asarray(q_in, dtype=np.float64) - ip.zero_point)
    s_w = layer.w_scale.astype(np.float64)
    w = s_w * (layer.q_w.astype(np.float64) - layer.w_zero.astype(np.float64))
    y = conv(x[None], w, layer.kind, layer.stride, layer.padding)[0]
    y = y + layer.q_bias.astype(np.float64) * ip.scale * s_w
    y = np.ldexp(y, -layer.channel_shifts())
    y = activate(y, layer.activation)
    return np.clip(y, op.nudged_min, op.nudged_max)


def dequantize_output(layer: QuantizedLayer, q_out) -> np.ndarray:
    op = layer.out_params
    return op.scale * (np.asarray(q_out, dtype=np.float64) - op.zero_point)


def conformance_bound(layer: QuantizedLayer) -> float:
    return layer.out_params.scale * (0.5 + 2.0 ** -20)


def simulate(model: QuantizedModel, q_in, collect: bool = False):
    """Run the integer model on one (H, W, C) uint8 input."""
    x = np.asarray(q_in, dtype=np.uint8)
    outs = []
    for layer in model.layers:
        x = conv_fixed(FixedPointContext.from_layer(layer, x))
        outs.append(x)
    return outs if collect else x
