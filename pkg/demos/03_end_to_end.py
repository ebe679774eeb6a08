"""
From a float model to integer-only inference
============================================

A four-layer network (conv, depthwise, pointwise, fully connected) with
batch norm goes through the full post-training pipeline:

* fold batch norm into the convolutions,
* optionally prune small weights,
* calibrate activation ranges on representative inputs,
* quantize weights under each scheme,
* save the packed model and run it from disk in integer arithmetic.
"""
import tempfile
from pathlib import Path

import numpy as np

from wesq.bnfold import fold_model
from wesq.fixedpoint import simulate
from wesq.floatops import forward
from wesq.model import BNParams, LayerSpec, ModelGraph, load_quantized, save_quantized
from wesq.quantizer import quantize_input, quantize_model

rng = np.random.default_rng(0)


def bn(n):
    return BNParams(rng.uniform(0.5, 2, n), rng.normal(0, 0.1, n), rng.normal(0, 0.1, n), rng.uniform(0.2, 2, n))


# depthwise filters with channel ranges spread over 100x
dw = rng.uniform(-1, 1, (3, 3, 1, 8)) * np.exp(rng.uniform(-np.log(100), 0, 8))

model = ModelGraph((8, 8, 3), [
    LayerSpec("conv2d", rng.normal(0, 0.3, (3, 3, 3, 8)), padding=(1, 1, 1, 1), activation="relu6", bn=bn(8)),
    LayerSpec("depthwise_conv2d", dw, stride=2, padding=(0, 1, 0, 1), activation="relu6", bn=bn(8)),
    LayerSpec("conv2d", rng.normal(0, 0.3, (1, 1, 8, 6)), activation="relu"),
    LayerSpec("fully_connected", rng.normal(0, 0.2, (96, 5))),
], name="demo").validate()
print("layer output shapes:", model.shapes())

reps = rng.uniform(-1, 1, (64, 8, 8, 3))
test = rng.uniform(-1, 1, (32, 8, 8, 3))
reference = forward(fold_model(model), test)

######################################################################
# Quantize under each scheme and measure the end-to-end error
# -----------------------------------------------------------

out_dir = Path(tempfile.mkdtemp())
for scheme, prune in [("lwq", None), ("cwq", None), ("wes", None), ("wes", 0.05)]:
    qm = quantize_model(model, scheme, reps, prune_threshold=prune)
    path = out_dir / f"{scheme}{'-sparse' if prune else ''}.bin"
    nbytes = save_quantized(qm, path)
    loaded = load_quantized(path)

    last = loaded.layers[-1].out_params
    outs = np.stack([simulate(loaded, quantize_input(x, loaded.input_params)) for x in test])
    y = last.scale * (outs.astype(np.float64) - last.zero_point)
    err = np.sqrt(np.mean((y.reshape(reference.shape) - reference) ** 2))
    label = f"{scheme}{' +prune' if prune else ''}"
    print(f"{label:11s} {nbytes:5d} bytes on disk, output RMS error {err:.4f} "
          f"(output step {last.scale:.4f})")
    if scheme == "wes":
        print("            depthwise shifts:", loaded.layers[1].shifts.tolist())

######################################################################
# Determinism
# -----------
#
# Integer inference has no floating point in it, so repeated runs agree
# to the byte.

x = quantize_input(test[0], loaded.input_params)
print("\nrepeat runs identical:", simulate(loaded, x).tobytes() == simulate(loaded, x).tobytes())
