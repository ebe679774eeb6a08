"""Post-training quantization of a float model under a chosen weight scheme."""
from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field

import numpy as np

from .affine import (
    AffineParams,
    dequantize,
    make_scale_compound,
    nudged_range,
    quantize_affine,
    quantize_bias,
)
from .bnfold import fold_model
from .errors import DegenerateLayerError, LayerError
from .floatops import forward
from .model import SCHEMES, LayerSpec, ModelGraph, QuantizedLayer, QuantizedModel
from .optimize import nelder_mead
from .pruning import prune, sparsity
from .wes import wes

log = logging.getLogger(__name__)

CLIP_MAX_FRACTION = 0.1


def clip_cost(w, lo: float, hi: float, bits: int = 8) -> float:
    """Squared clipping error outside ``[lo, hi]`` plus squared quantization error inside."""
    w = np.asarray(w, dtype=np.float64).ravel()
    p = nudged_range(lo, hi, bits)
    inside = (w >= lo) & (w <= hi)
    clip_err = np.sum((w[~inside] - np.clip(w[~inside], lo, hi)) ** 2)
    wi = w[inside]
    quant_err = np.sum((wi - dequantize(quantize_affine(wi, p), p)) ** 2)
    return float(clip_err + quant_err)


def clip_optimize(w, bits: int = 8, tol: float = 1e-8, max_iter: int = 200):
    """Search the clipping range ``[min + a*span, max - b*span]``, ``a, b`` in ``[0, 0.1]``.

    Returns the ``(clip_min, clip_max)`` with the lowest :func:`clip_cost`;
    falls back to the full range when no clipping helps.
    """
    w = np.asarray(w, dtype=np.float64)
    lo0, hi0 = float(w.min()), float(w.max())
    span = hi0 - lo0
    if span <= 0:
        raise ValueError("cannot clip a constant tensor")

    def edges(a):
        return lo0 + a[0] * span, hi0 - a[1] * span

    def f(a):
        if np.any(a < 0) or np.any(a > CLIP_MAX_FRACTION):
            return np.inf
        lo, hi = edges(a)
        if hi <= lo:
            return np.inf
        return clip_cost(w, lo, hi, bits)

    base = f(np.zeros(2))
    step = CLIP_MAX_FRACTION / 4
    res = nelder_mead(f, [[0, 0], [step, 0], [0, step]], tol=tol, max_iter=max_iter)
    if res.fun < base:
        return edges(res.x)
    return lo0, hi0


@dataclass
class CalibrationStats:
    """Per-sample minima and maxima of the network input and every layer output."""

    percentile: float = 0.01
    mins: list[list[float]] = field(default_factory=list)
    maxs: list[list[float]] = field(default_factory=list)

    @property
    def count(self) -> int:
        return len(self.mins[0]) if self.mins else 0

    def update(self, model: ModelGraph, batch):
        batch = np.asarray(batch, dtype=np.float64)
        if batch.ndim == 3:
            batch = batch[None]
        outs = [batch] + forward(model, batch, collect=True)
        if not self.mins:
            self.mins = [[] for _ in outs]
            self.maxs = [[] for _ in outs]
        for k, y in enumerate(outs):
            flat = y.reshape(y.shape[0], -1)
            self.mins[k].extend(flat.min(axis=1).tolist())
            self.maxs[k].extend(flat.max(axis=1).tolist())
        return self

    def merge(self, other: CalibrationStats) -> CalibrationStats:
        if not self.mins:
            return CalibrationStats(self.percentile, [list(m) for m in other.mins], [list(m) for m in other.maxs])
        if not other.mins:
            return CalibrationStats(self.percentile, [list(m) for m in self.mins], [list(m) for m in self.maxs])
        return CalibrationStats(
            self.percentile,
            [a + b for a, b in zip(self.mins, other.mins)],
            [a + b for a, b in zip(self.maxs, other.maxs)],
        )

    def ranges(self):
        if self.count < 1:
            raise ValueError("calibration needs at least one representative input")
        q = 100.0 * self.percentile
        return [
            (float(np.percentile(lo, q)), float(np.percentile(hi, 100.0 - q)))
            for lo, hi in zip(self.mins, self.maxs)
        ]

    def finalize(self, bits: int = 8) -> list[AffineParams]:
        return [nudged_range(lo, hi, bits) for lo, hi in self.ranges()]


def calibrate_activations(model: ModelGraph, rep_inputs, percentile: float = 0.01, bits: int = 8):
    """Activation quantizers from representative inputs.

    Returns ``len(model.layers) + 1`` parameter sets: the network input
    first, then each layer's post-activation output.
    """
    rep_inputs = np.asarray(rep_inputs, dtype=np.float64)
    if rep_inputs.size == 0 or len(rep_inputs) == 0:
        raise ValueError("calibration needs at least one representative input")
    stats = CalibrationStats(percentile).update(model, rep_inputs)
    return stats.finalize(bits)


def _weight_params(w, scheme, clip, bits, tol, max_iter):
    """Per-layer (one entry) or per-channel AffineParams for ``w`` and the clip ranges used."""
    cols = np.asarray(w, dtype=np.float64).reshape(-1, w.shape[-1])
    groups = [cols[:, i] for i in range(cols.shape[1])] if scheme == "cwq" else [cols]
    params, clips = [], []
    for g in groups:
        lo, hi = float(g.min()), float(g.max())
        if clip and hi > lo:
            lo, hi = clip_optimize(g, bits, tol, max_iter)
        clips.append((lo, hi))
        params.append(nudged_range(lo, hi, bits))
    return params, clips


def quantize_layer(layer: LayerSpec, scheme: str, in_params: AffineParams, out_params: AffineParams,
                   clip=False, tol=1e-8, max_iter=200, bits=8, sparse=False) -> QuantizedLayer:
    """Quantize one BN-folded layer given its input and output activation quantizers."""
    w, b = layer.weights, layer.bias
    info = {}
    shifts = None
    if scheme == "wes":
        try:
            res = wes(w, b, tol, max_iter, bits)
            w, b, shifts = res.weights, res.bias, res.shifts
            info.update(r_hat=res.r_hat, cost=res.cost, cost_init=res.cost_init,
                        r_hat_init=res.r_hat_init, iterations=res.iterations)
        except DegenerateLayerError:
            shifts = np.zeros(w.shape[-1], dtype=np.uint8)
            log.warning("all-zero weights, using zero shift scales")
        info["shift_histogram"] = np.bincount(shifts, minlength=16).tolist()

    params, clips = _weight_params(w, scheme, clip, bits, tol, max_iter)
    if clip:
        info["clip"] = clips if scheme == "cwq" else clips[0]
    if scheme == "cwq":
        q_w = np.stack(
            [quantize_affine(w[..., i], p) for i, p in enumerate(params)], axis=-1
        ).astype(np.uint8)
    else:
        q_w = quantize_affine(w, params[0])
    w_scale = np.array([p.scale for p in params], dtype=np.float32)
    w_zero = np.array([p.zero_point for p in params], dtype=np.uint8)
    s_w = w_scale.astype(np.float64) if scheme == "cwq" else float(w_scale[0])
    q_bias = quantize_bias(b, in_params.scale, s_w)
    compounds = tuple(make_scale_compound(in_params.scale, float(s), out_params.scale) for s in w_scale)
    return QuantizedLayer(
        kind=layer.kind,
        scheme=scheme,
        q_w=q_w,
        w_scale=w_scale,
        w_zero=w_zero,
        q_bias=q_bias,
        compounds=compounds,
        in_params=in_params,
        out_params=out_params,
        shifts=shifts,
        stride=layer.stride,
        padding=layer.padding,
        activation=layer.activation,
        sparse=sparse,
        info=info,
    ).validate()


def prepare_float_model(model: ModelGraph, prune_threshold=None) -> ModelGraph:
    """BN folding, then optional magnitude pruning of the folded weights."""
    folded = fold_model(model)
    if prune_threshold is None:
        return folded
    layers = [dataclasses.replace(l, weights=prune(l.weights, prune_threshold)) for l in folded.layers]
    return ModelGraph(folded.input_shape, layers, folded.name)


def quantize_model(model: ModelGraph, scheme: str, rep_inputs, *, clip=False, prune_threshold=None,
                   tol=1e-8, max_iter=200, percentile=0.01, bits=8) -> QuantizedModel:
    if scheme not in SCHEMES:
        raise ValueError(f"scheme must be one of {SCHEMES}, got {scheme!r}")
    model.validate()
    prepared = prepare_float_model(model, prune_threshold)
    acts = calibrate_activations(prepared, rep_inputs, percentile, bits)
    layers = []
    for i, layer in enumerate(prepared.layers):
        try:
            q = quantize_layer(layer, scheme, acts[i], acts[i + 1], clip, tol, max_iter, bits,
                               sparse=prune_threshold is not None)
        except (ValueError, OverflowError) as exc:
            raise LayerError(i, exc) from exc
        if prune_threshold is not None:
            q.info["sparsity"] = sparsity(layer.weights)
        layers.append(q)
    return QuantizedModel(tuple(model.input_shape), layers, model.name)


def quantize_input(x, params: AffineParams) -> np.ndarray:
    return quantize_affine(x, params)


def fake_quantize_weights(w, scheme: str, bits: int = 8, tol=1e-8, max_iter=200, clip=False):
    """Weights after the scheme's quantize/dequantize round trip, in the original domain."""
    w = np.asarray(w, dtype=np.float64)
    shifts = np.zeros(w.shape[-1], dtype=np.int64)
    target = w
    if scheme == "wes":
        try:
            res = wes(w, np.zeros(w.shape[-1]), tol, max_iter, bits)
            target, shifts = res.weights, res.shifts.astype(np.int64)
        except DegenerateLayerError:
            pass
    params, _ = _weight_params(target, scheme, clip, bits, tol, max_iter)
    if scheme == "cwq":
        out = np.stack([dequantize(quantize_affine(target[..., i], p), p) for i, p in enumerate(params)], axis=-1)
    else:
        out = dequantize(quantize_affine(target, params[0]), params[0])
    return np.ldexp(out, -shifts)
