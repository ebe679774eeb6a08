from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from _corpus import corpus, random_layer, rep_inputs, tiny_model
from wesq.affine import AffineParams, ScaleCompound, make_scale_compound
from wesq.errors import AccumulatorOverflowError
from wesq.fixedpoint import (
    FixedPointContext,
    accumulate,
    conformance_bound,
    conv_fixed,
    conv_two_stage,
    dequantize_output,
    float_reference,
    relu6_limit,
    requantize,
    rounding_rshift,
    simulate,
)
from wesq.model import QuantizedLayer
from wesq.quantizer import quantize_input, quantize_model

UNIT = ScaleCompound(1 << 30, 1)  # exactly 1.0


def one_by_one(q_in=12, z_in=2, q_w=5, z_w=1, shift=0, z_out=3, bias=0, compound=UNIT, activation="none"):
    return FixedPointContext(
        q_in=np.full((1, 1, 1), q_in, dtype=np.uint8), z_in=z_in,
        q_w=np.full((1, 1, 1, 1), q_w, dtype=np.uint8), z_w=np.array([z_w]),
        q_bias=np.array([bias]), mantissa=np.array([compound.mantissa]),
        exponent=np.array([compound.exponent]), shifts=np.array([shift]), z_out=z_out,
        activation=activation, relu6_limit=relu6_limit(0.1) if activation == "relu6" else None,
    )


def test_hand_trace():
    ctx = one_by_one()
    assert accumulate(ctx).item() == 40
    assert conv_fixed(ctx).item() == 43


def test_hand_trace_with_shift():
    assert conv_fixed(one_by_one(shift=2)).item() == 13


def test_zero_signal():
    rng = np.random.default_rng(0)
    ctx = FixedPointContext(
        q_in=np.full((5, 5, 4), 77, dtype=np.uint8), z_in=77,
        q_w=rng.integers(0, 256, (3, 3, 4, 8), dtype=np.uint8), z_w=np.full(8, 128),
        q_bias=np.zeros(8, dtype=np.int64), mantissa=np.full(8, 1 << 30), exponent=np.ones(8, dtype=np.int64),
        shifts=rng.integers(0, 16, 8), z_out=9, padding=(1, 1, 1, 1),
    )
    assert not accumulate(ctx).any()
    assert (conv_fixed(ctx) == 9).all()
    assert np.array_equal(conv_two_stage(ctx), conv_fixed(ctx))


@pytest.mark.parametrize("shift", [0, 7, 15])
def test_requantize_zero_accumulator(shift):
    assert requantize(0, make_scale_compound(0.3, 1, 1), shift, 42) == 42


def test_requantize_examples():
    assert requantize(40, UNIT, 2, 3) == 13
    assert requantize(-5, UNIT, 0, 10, "relu") == 10
    assert requantize(-5, UNIT, 0, 10) == 5
    assert requantize(100, UNIT, 0, 10, "relu6", relu6_limit=60) == 70
    assert requantize(10_000, UNIT, 0, 10) == 255
    assert requantize(-10_000, UNIT, 0, 10) == 0


def test_requantize_rejects_bad_shift():
    with pytest.raises(ValueError):
        requantize(1, UNIT, 16, 0)


def test_relu6_limit():
    assert relu6_limit(0.1) == 60
    assert relu6_limit(6 / 255) == 255


@pytest.mark.parametrize("x, k, expected", [(5, 1, 3), (-5, 1, -3), (4, 1, 2), (7, 2, 2), (-6, 2, -2), (9, 0, 9)])
def test_rounding_rshift(x, k, expected):
    assert rounding_rshift(x, k) == expected


@settings(max_examples=300, deadline=None)
@given(acc=st.integers(-(2**31), 2**31 - 1), c=st.floats(2.0**-20, 4.0), shift=st.integers(0, 15))
def test_requantize_matches_rational_oracle(acc, c, shift):
    sc = make_scale_compound(c, 1.0, 1.0)
    exact = Fraction(acc) * Fraction(sc.mantissa, 1 << 31) * Fraction(2) ** sc.exponent / (1 << shift)
    mag = abs(exact)
    r = int(mag + Fraction(1, 2))
    r = -r if exact < 0 else r
    assert requantize(acc, sc, shift, 100) == min(max(r + 100, 0), 255)


def test_accumulator_depth_precondition():
    ctx = one_by_one()
    ctx.q_w = np.zeros((3, 3, 4000, 1), dtype=np.uint8)
    ctx.q_in = np.zeros((3, 3, 4000), dtype=np.uint8)
    with pytest.raises(AccumulatorOverflowError):
        accumulate(ctx)


def test_accumulator_plus_bias_overflow():
    with pytest.raises(AccumulatorOverflowError):
        accumulate(one_by_one(bias=2**31 - 10))


def test_random_conv_conformance():
    rng = np.random.default_rng(11)
    s_in, s_out = 0.02, 0.05
    s_w = np.float32(0.004)
    layer = QuantizedLayer(
        kind="conv2d", scheme="lwq", q_w=rng.integers(0, 256, (3, 3, 4, 8), dtype=np.uint8),
        w_scale=np.array([s_w]), w_zero=np.array([131], dtype=np.uint8),
        q_bias=rng.integers(-5000, 5000, 8).astype(np.int32),
        compounds=(make_scale_compound(s_in, float(s_w), s_out),),
        in_params=AffineParams(s_in, 120), out_params=AffineParams(s_out, 90),
    ).validate()
    q_in = rng.integers(0, 256, (5, 5, 4), dtype=np.uint8)
    out = conv_fixed(FixedPointContext.from_layer(layer, q_in))
    assert out.shape == (3, 3, 8)
    dev = np.abs(float_reference(layer, q_in) - dequantize_output(layer, out))
    assert dev.max() <= conformance_bound(layer)


@pytest.fixture(scope="module")
def layers():
    return corpus(seed=2024, n=150)


def test_corpus_covers_configurations(layers):
    seen = {(l.kind, l.activation, l.scheme) for l, _ in layers}
    assert len(seen) == 27


def test_conformance_on_random_layers(layers):
    for layer, q_in in layers:
        out = conv_fixed(FixedPointContext.from_layer(layer, q_in))
        dev = np.abs(float_reference(layer, q_in) - dequantize_output(layer, out))
        assert dev.max() <= conformance_bound(layer)


def test_fused_matches_two_stage(layers):
    for layer, q_in in layers[:60]:
        ctx = FixedPointContext.from_layer(layer, q_in)
        assert conv_fixed(ctx).tobytes() == conv_two_stage(ctx).tobytes()


def test_depthwise_with_mixed_shifts():
    rng = np.random.default_rng(12)
    for _ in range(20):
        layer, q_in = random_layer(rng, kind="depthwise_conv2d", scheme="wes")
        ctx = FixedPointContext.from_layer(layer, q_in)
        assert conv_fixed(ctx).tobytes() == conv_two_stage(ctx).tobytes()


def test_simulate_is_deterministic():
    rng = np.random.default_rng(13)
    qm = quantize_model(tiny_model(rng), "wes", reps := rep_inputs(rng))
    x = quantize_input(reps[0], qm.input_params)
    runs = [simulate(qm, x, collect=True) for _ in range(2)]
    assert all(a.tobytes() == b.tobytes() for a, b in zip(*runs))
    assert runs[0][-1].shape == (1, 1, 5)
