"""Command-line front end: ``wesq quantize | simulate | report``.

All output is line-oriented ``key=value`` records, one per layer, in layer
order.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import metrics
from .affine import quantize_affine
from .errors import DegenerateLayerError, WesqError
from .fixedpoint import (
    FixedPointContext,
    conformance_bound,
    conv_fixed,
    dequantize_output,
    float_reference,
)
from .model import load_model, load_quantized, load_tensor_dir, save_quantized
from .quantizer import fake_quantize_weights, prepare_float_model, quantize_model
from .wes import wes


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.6g}"
    if isinstance(v, (list, tuple)):
        return ",".join(_fmt(x) for x in v)
    return str(v)


def record(out, **fields):
    print(" ".join(f"{k}={_fmt(v)}" for k, v in fields.items()), file=out)


def cmd_quantize(args, out):
    model = load_model(args.model)
    if args.rep_data is None:
        raise WesqError("activation calibration needs --rep-data")
    reps = load_tensor_dir(args.rep_data)
    rng = np.random.default_rng(args.seed)
    reps = reps[rng.permutation(len(reps))]
    if args.max_samples:
        reps = reps[: args.max_samples]
    qm = quantize_model(
        model, args.scheme, reps, clip=args.clip, prune_threshold=args.prune_threshold,
        tol=args.tol, max_iter=args.max_iter, percentile=args.percentile,
    )
    nbytes = save_quantized(qm, args.out)
    for i, layer in enumerate(qm.layers):
        fields = dict(layer=i, kind=layer.kind, scheme=layer.scheme, channels=layer.out_channels,
                      s_w=float(layer.w_scale[0]) if layer.scheme != "cwq" else "per-channel",
                      s_in=layer.in_params.scale, s_out=layer.out_params.scale)
        info = layer.info
        if "r_hat" in info:
            fields.update(r_hat=info["r_hat"], r_hat_init=info["r_hat_init"], phi=info["cost"],
                          phi_init=info["cost_init"], iterations=info["iterations"])
        if "shift_histogram" in info:
            fields["shift_hist"] = info["shift_histogram"]
        if "clip" in info and layer.scheme != "cwq":
            fields["clip"] = list(info["clip"])
        if "sparsity" in info:
            fields["sparsity"] = info["sparsity"]
        record(out, **fields)
    record(out, written=str(args.out), bytes=nbytes)
    return 0


def cmd_simulate(args, out):
    qm = load_quantized(args.model)
    if args.float_input:
        x = np.fromfile(args.input, dtype="<f4")
        q_in = quantize_affine(x, qm.input_params)
    else:
        q_in = np.fromfile(args.input, dtype=np.uint8)
    expected = int(np.prod(qm.input_shape))
    if q_in.size != expected:
        raise WesqError(f"input holds {q_in.size} values, model expects {expected}")
    x = q_in.reshape(qm.input_shape)
    failed = False
    for i, layer in enumerate(qm.layers):
        y = conv_fixed(FixedPointContext.from_layer(layer, x))
        if args.check:
            dev = float(np.max(np.abs(float_reference(layer, x) - dequantize_output(layer, y))))
            bound = conformance_bound(layer)
            ok = dev <= bound
            failed |= not ok
            record(out, layer=i, max_dev=dev, bound=bound, ok=ok)
        x = y
    x.astype(np.uint8).tofile(args.out)
    record(out, written=str(args.out), shape=list(x.shape))
    return 2 if (failed and args.strict) else 0


def cmd_report(args, out):
    model = prepare_float_model(load_model(args.model))
    schemes = [s for s in (args.schemes or "").split(",") if s]
    for i, layer in enumerate(model.layers):
        w = layer.weights
        lo = w.reshape(-1, w.shape[-1]).min(axis=0)
        hi = w.reshape(-1, w.shape[-1]).max(axis=0)
        fields = dict(layer=i, kind=layer.kind, channels=w.shape[-1],
                      min=float(lo.min()), max=float(hi.max()),
                      narrowest=float((hi - lo).min()), widest=float((hi - lo).max()))
        try:
            fields["overlap"] = metrics.overlap_ratio(w)
        except ValueError:
            fields["overlap"] = "undefined"
        if schemes:
            try:
                fields["overlap_wes"] = metrics.overlap_ratio(wes(w, layer.bias, args.tol, args.max_iter).weights)
            except (DegenerateLayerError, ValueError):
                fields["overlap_wes"] = "undefined"
        record(out, **fields)
        if not schemes:
            continue
        geo = metrics.LayerGeometry.of(w)
        base = metrics.param_size(geo, "lwq", args.sparsity)
        for scheme in schemes:
            size = metrics.param_size(geo, scheme, args.sparsity)
            mse = metrics.quant_error(w, fake_quantize_weights(w, scheme, tol=args.tol, max_iter=args.max_iter))
            record(out, layer=i, scheme=scheme, mse=mse, weight_bits=size.weight_bits,
                   param_bits=size.overhead_bits, total_bits=size.total_bits,
                   vs_lwq_pct=100 * metrics.overhead(size, base))
    for path in args.quantized or []:
        qm = load_quantized(path)
        record(out, file=str(path), layers=len(qm.layers), bytes_on_disk=Path(path).stat().st_size,
               schemes=sorted({l.scheme for l in qm.layers}))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="wesq", description="Post-training quantization with weight equalizing shift scalers.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    q = sub.add_parser("quantize", help="quantize a float model")
    q.add_argument("--model", required=True, type=Path, help="model directory or manifest.json")
    q.add_argument("--rep-data", type=Path, help="directory of representative inputs")
    q.add_argument("--out", required=True, type=Path)
    q.add_argument("--scheme", choices=("lwq", "cwq", "wes"), default="wes")
    q.add_argument("--clip", action="store_true", help="search a weight clipping range per layer")
    q.add_argument("--prune-threshold", type=float, default=None)
    q.add_argument("--percentile", type=float, default=0.01)
    q.add_argument("--tol", type=float, default=1e-8)
    q.add_argument("--max-iter", type=int, default=200)
    q.add_argument("--max-samples", type=int, default=0, help="use at most this many representative inputs")
    q.add_argument("--seed", type=int, default=0)
    q.set_defaults(func=cmd_quantize)

    s = sub.add_parser("simulate", help="run integer-only inference")
    s.add_argument("--model", required=True, type=Path, help="quantized model file")
    s.add_argument("--input", required=True, type=Path, help="raw uint8 (H, W, C) blob")
    s.add_argument("--float-input", action="store_true", help="input blob is float32; quantize it first")
    s.add_argument("--out", required=True, type=Path)
    s.add_argument("--check", action="store_true", help="compare every layer with the float reference")
    s.add_argument("--strict", action="store_true", help="with --check, exit 2 on any bound violation")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_simulate)

    r = sub.add_parser("report", help="ranges, overlap ratio, error and size per scheme")
    r.add_argument("--model", required=True, type=Path)
    r.add_argument("--schemes", default="", help="comma-separated subset of lwq,cwq,wes")
    r.add_argument("--sparsity", type=float, default=None, help="assume this weight sparsity for sizes")
    r.add_argument("--quantized", type=Path, nargs="*")
    r.add_argument("--tol", type=float, default=1e-8)
    r.add_argument("--max-iter", type=int, default=200)
    r.add_argument("--seed", type=int, default=0)
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None, out=None) -> int:
    out = out or sys.stdout
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args, out)
    except (WesqError, OSError, ValueError, OverflowError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
