"""
Driving the pipeline from the command line
==========================================

The ``wesq`` program wraps the library in three subcommands.  This script
writes a small float model and a folder of representative inputs to a
temporary directory, then calls the same entry point the console script
uses.  Every command prints ``key=value`` records.
"""
import tempfile
from pathlib import Path

import numpy as np

from wesq.cli import main
from wesq.model import LayerSpec, ModelGraph, save_model, save_tensor_dir

rng = np.random.default_rng(1)
work = Path(tempfile.mkdtemp())

dw = rng.uniform(-1, 1, (3, 3, 1, 16)) * np.exp(rng.uniform(-np.log(100), 0, 16))
model = ModelGraph((10, 10, 16), [
    LayerSpec("depthwise_conv2d", dw, padding=(1, 1, 1, 1), activation="relu6"),
    LayerSpec("conv2d", rng.normal(0, 0.2, (1, 1, 16, 32)), activation="relu6"),
])
save_model(model, work / "model")
save_tensor_dir(work / "reps", rng.uniform(-1, 1, (32, 10, 10, 16)))
rng.uniform(-1, 1, (10, 10, 16)).astype("<f4").tofile(work / "input.f32")


def run(*argv):
    print("\n$ wesq " + " ".join(str(a) for a in argv))
    return main([str(a) for a in argv])


######################################################################
# Inspect ranges and per-scheme size before quantizing

run("report", "--model", work / "model", "--schemes", "lwq,cwq,wes")

######################################################################
# Quantize with shift scaling

run("quantize", "--scheme", "wes", "--model", work / "model", "--rep-data", work / "reps",
    "--out", work / "model.wesq")

######################################################################
# Run integer inference and check every layer against the float reference

run("simulate", "--model", work / "model.wesq", "--input", work / "input.f32", "--float-input",
    "--check", "--out", work / "output.u8")
