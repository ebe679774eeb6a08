"""Fold a trailing batch norm into the preceding convolution."""
from __future__ import annotations

import dataclasses

import numpy as np

from .model import BNParams, LayerSpec, ModelGraph


def bn_fold(w, b, bn: BNParams):
    """Return ``(w_folded, b_folded)``.

    With ``f = gamma / sqrt(var + eps)`` per output channel, weights become
    ``w * f`` and the bias ``(b - mean) * f + beta``.
    """
    w = np.asarray(w, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.asarray(bn.var, dtype=np.float64) + bn.eps
    if np.any(~(denom > 0)):
        raise ValueError("batch norm variance + eps must be positive")
    f = np.asarray(bn.gamma, dtype=np.float64) / np.sqrt(denom)
    w_folded = (w * f).astype(np.float32)
    b_folded = ((b - bn.mean) * f + bn.beta).astype(np.float32)
    return w_folded, b_folded


def fold_layer(layer: LayerSpec) -> LayerSpec:
    if layer.bn is None:
        return layer
    w, b = bn_fold(layer.weights, layer.bias, layer.bn)
    return dataclasses.replace(layer, weights=w, bias=b, bn=None)


def fold_model(model: ModelGraph) -> ModelGraph:
    return ModelGraph(model.input_shape, [fold_layer(l) for l in model.layers], model.name)
