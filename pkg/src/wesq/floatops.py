"""Float64 reference layers on NHWC batches."""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _patches(x, kh, kw, stride, padding, pad_value=0.0):
    """(N, Ho, Wo, kh, kw, C) view of the receptive fields of ``x``."""
    top, bottom, left, right = padding
    x = np.pad(x, ((0, 0), (top, bottom), (left, right), (0, 0)), constant_values=pad_value)
    win = sliding_window_view(x, (kh, kw), axis=(1, 2))  # N, Ho', Wo', C, kh, kw
    win = win[:, ::stride, ::stride]
    return win.transpose(0, 1, 2, 4, 5, 3)


def conv(x, w, kind, stride=1, padding=(0, 0, 0, 0), pad_value=0.0):
    """Convolution without bias or activation.  ``x`` is (N, H, W, C), ``w`` HWIO."""
    x = np.asarray(x)
    if kind == "fully_connected":
        flat = x.reshape(x.shape[0], -1)
        return (flat @ w.reshape(-1, w.shape[-1])).reshape(x.shape[0], 1, 1, -1)
    kh, kw, _, cout = w.shape
    p = _patches(x, kh, kw, stride, padding, pad_value)
    if kind == "conv2d":
        return np.tensordot(p, w, axes=([3, 4, 5], [0, 1, 2]))
    mult = cout // x.shape[-1]
    # Output channel o reads input channel o // mult.
    p = np.repeat(p, mult, axis=-1)
    return np.einsum("nhwijc,ijc->nhwc", p, w[:, :, 0, :])


def activate(y, activation, relu6_max=6.0):
    if activation == "relu":
        return np.maximum(y, 0)
    if activation == "relu6":
        return np.clip(y, 0, relu6_max)
    return y


def layer_forward(x, layer):
    y = conv(np.asarray(x, dtype=np.float64), layer.weights.astype(np.float64), layer.kind,
             layer.stride, layer.padding)
    return activate(y + layer.bias.astype(np.float64), layer.activation)


def forward(model, x, collect=False):
    """Run a float model on an (N, H, W, C) batch; optionally return every layer's output."""
    outs = []
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        x = x[None]
    for layer in model.layers:
        x = layer_forward(x, layer)
        outs.append(x)
    return outs if collect else x
