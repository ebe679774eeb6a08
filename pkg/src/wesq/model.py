"""Float and quantized model graphs and their on-disk formats.

Float models are a JSON manifest plus raw little-endian tensor blobs::

    {
      "name": "tiny",
      "input_shape": [8, 8, 3],
      "layers": [
        {"kind": "conv2d", "stride": 1, "padding": [1, 1, 1, 1],
         "activation": "relu6",
         "weights": {"path": "l0.w", "shape": [3, 3, 3, 8]},
         "bias": {"path": "l0.b", "shape": [8]},
         "bn": {"gamma": {...}, "beta": {...}, "mean": {...}, "var": {...},
                "eps": 0.001}}
      ]
    }

Tensor references take an optional ``"dtype"`` (default ``float32``) and
``"layout"`` tag (``HWIO``, ``NHWC`` or ``flat``).  Weights are HWIO.  For
depthwise layers the input axis has length 1 and the output axis holds
``in_channels * multiplier`` filters.  Fully-connected weights may be given
either as ``[in, out]`` or as ``[1, 1, in, out]``.

Quantized models use a packed binary layout, see :func:`save_quantized`.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .affine import AffineParams, ScaleCompound
from .errors import ModelFormatError

KINDS = ("conv2d", "depthwise_conv2d", "fully_connected")
ACTIVATIONS = ("none", "relu", "relu6")
SCHEMES = ("lwq", "cwq", "wes")

DTYPES = {
    "float32": np.dtype("<f4"),
    "uint8": np.dtype("u1"),
    "int32": np.dtype("<i4"),
}
LAYOUTS = ("HWIO", "NHWC", "flat")


@dataclass
class BNParams:
    gamma: np.ndarray
    beta: np.ndarray
    mean: np.ndarray
    var: np.ndarray
    eps: float = 1e-3

    def __post_init__(self):
        for name in ("gamma", "beta", "mean", "var"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float32))

    def validate(self, channels: int):
        for name in ("gamma", "beta", "mean", "var"):
            v = getattr(self, name)
            if v.shape != (channels,):
                raise ModelFormatError(
                    f"bn {name} has shape {v.shape}, expected ({channels},)"
                )
            if not np.all(np.isfinite(v)):
                raise ModelFormatError(f"bn {name} contains non-finite values")
        if np.any(self.var < 0):
            raise ModelFormatError("bn variance must be non-negative")


@dataclass
class LayerSpec:
    kind: str
    weights: np.ndarray
    bias: np.ndarray | None = None
    stride: int = 1
    padding: tuple[int, int, int, int] = (0, 0, 0, 0)
    activation: str = "none"
    bn: BNParams | None = None

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float32)
        if self.kind == "fully_connected" and self.weights.ndim == 2:
            self.weights = self.weights.reshape(1, 1, *self.weights.shape)
        if self.bias is None:
            self.bias = np.zeros(self.weights.shape[-1], dtype=np.float32)
        self.bias = np.asarray(self.bias, dtype=np.float32)
        self.padding = tuple(int(p) for p in self.padding)

    @property
    def out_channels(self) -> int:
        return self.weights.shape[-1]

    @property
    def kernel(self) -> tuple[int, int]:
        return self.weights.shape[0], self.weights.shape[1]

    def validate(self):
        if self.kind not in KINDS:
            raise ModelFormatError(f"unknown layer kind {self.kind!r}")
        if self.activation not in ACTIVATIONS:
            raise ModelFormatError(f"unknown activation {self.activation!r}")
        if self.weights.ndim != 4:
            raise ModelFormatError(f"weights must be HWIO, got shape {self.weights.shape}")
        if self.bias.shape != (self.out_channels,):
            raise ModelFormatError(
                f"bias length {self.bias.shape} does not match {self.out_channels} output channels"
            )
        if not (np.all(np.isfinite(self.weights)) and np.all(np.isfinite(self.bias))):
            raise ModelFormatError("non-finite weight values")
        if self.stride < 1 or len(self.padding) != 4 or min(self.padding) < 0:
            raise ModelFormatError("stride must be >= 1 and padding non-negative")
        if self.kind == "depthwise_conv2d" and self.weights.shape[2] != 1:
            raise ModelFormatError("depthwise weights must have input axis of length 1")
        if self.kind == "fully_connected" and self.kernel != (1, 1):
            raise ModelFormatError("fully-connected weights must be [in, out]")
        if self.bn is not None:
            self.bn.validate(self.out_channels)


def output_shape(layer: LayerSpec, in_shape):
    """(H, W, C) produced by ``layer`` from an (H, W, C) input; raises on mismatch."""
    h, w, c = in_shape
    if layer.kind == "fully_connected":
        if layer.weights.shape[2] != h * w * c:
            raise ModelFormatError(
                f"fully-connected layer expects {layer.weights.shape[2]} inputs, got {h * w * c}"
            )
        return 1, 1, layer.out_channels
    if layer.kind == "conv2d" and layer.weights.shape[2] != c:
        raise ModelFormatError(f"conv expects {layer.weights.shape[2]} input channels, got {c}")
    if layer.kind == "depthwise_conv2d" and layer.out_channels % c:
        raise ModelFormatError(
            f"depthwise output channels {layer.out_channels} not a multiple of {c} inputs"
        )
    kh, kw = layer.kernel
    top, bottom, left, right = layer.padding
    ho = (h + top + bottom - kh) // layer.stride + 1
    wo = (w + left + right - kw) // layer.stride + 1
    if ho < 1 or wo < 1:
        raise ModelFormatError(f"kernel {kh}x{kw} does not fit input {h}x{w}")
    return ho, wo, layer.out_channels


@dataclass
class ModelGraph:
    input_shape: tuple[int, int, int]
    layers: list[LayerSpec]
    name: str = "model"

    def validate(self):
        shape = tuple(self.input_shape)
        if len(shape) != 3 or min(shape) < 1:
            raise ModelFormatError(f"input shape must be (H, W, C), got {shape}")
        for i, layer in enumerate(self.layers):
            try:
                layer.validate()
                shape = output_shape(layer, shape)
            except ModelFormatError as exc:
                raise ModelFormatError(f"layer {i}: {exc}") from None
        return self

    def shapes(self):
        """Input shape followed by every layer's output shape."""
        out = [tuple(self.input_shape)]
        for layer in self.layers:
            out.append(output_shape(layer, out[-1]))
        return out


# -- float manifest -----------------------------------------------------------

def _read_tensor(root: Path, ref, what: str) -> np.ndarray:
    try:
        path = root / ref["path"]
        shape = [int(d) for d in ref["shape"]]
    except (KeyError, TypeError) as exc:
        raise ModelFormatError(f"{what}: tensor reference needs path and shape") from exc
    dtype = DTYPES.get(ref.get("dtype", "float32"))
    if dtype is None:
        raise ModelFormatError(f"{what}: unsupported dtype {ref.get('dtype')!r}")
    if ref.get("layout", "HWIO") not in LAYOUTS:
        raise ModelFormatError(f"{what}: unknown layout {ref['layout']!r}")
    if any(d < 1 for d in shape):
        raise ModelFormatError(f"{what}: dimensions must be positive")
    if not path.is_file():
        raise ModelFormatError(f"missing blob {path}")
    data = np.fromfile(path, dtype=dtype)
    if data.size != int(np.prod(shape)):
        raise ModelFormatError(
            f"{what}: shape mismatch, {path.name} holds {data.size} values, shape {shape} needs {int(np.prod(shape))}"
        )
    return data.reshape(shape).astype(dtype.newbyteorder("="))


def load_model(manifest_path) -> ModelGraph:
    manifest_path = Path(manifest_path)
    if manifest_path.is_dir():
        manifest_path = manifest_path / "manifest.json"
    try:
        doc = json.loads(manifest_path.read_text())
    except FileNotFoundError:
        raise ModelFormatError(f"manifest not found: {manifest_path}") from None
    except json.JSONDecodeError as exc:
        raise ModelFormatError(f"manifest is not valid JSON: {exc}") from None
    root = manifest_path.parent
    layers = []
    for i, entry in enumerate(doc.get("layers", [])):
        kind = entry.get("kind")
        if kind not in KINDS:
            raise ModelFormatError(f"layer {i}: unknown layer kind {kind!r}")
        weights = _read_tensor(root, entry["weights"], f"layer {i} weights")
        bias = _read_tensor(root, entry["bias"], f"layer {i} bias") if entry.get("bias") else None
        bn = None
        if entry.get("bn"):
            b = entry["bn"]
            bn = BNParams(
                *(_read_tensor(root, b[k], f"layer {i} bn {k}") for k in ("gamma", "beta", "mean", "var")),
                eps=float(b.get("eps", 1e-3)),
            )
        layers.append(
            LayerSpec(
                kind=kind,
                weights=weights,
                bias=bias,
                stride=int(entry.get("stride", 1)),
                padding=tuple(entry.get("padding", (0, 0, 0, 0))),
                activation=entry.get("activation", "none"),
                bn=bn,
            )
        )
    model = ModelGraph(tuple(doc["input_shape"]), layers, doc.get("name", manifest_path.parent.name))
    return model.validate()


def save_model(model: ModelGraph, directory) -> Path:
    """Write ``model`` as ``directory/manifest.json`` plus one blob per tensor."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)

    def put(arr, name, layout="HWIO"):
        arr = np.ascontiguousarray(arr, dtype="<f4")
        arr.tofile(directory / name)
        return {"path": name, "shape": list(arr.shape), "dtype": "float32", "layout": layout}

    entries = []
    for i, layer in enumerate(model.layers):
        entry = {
            "kind": layer.kind,
            "stride": layer.stride,
            "padding": list(layer.padding),
            "activation": layer.activation,
            "weights": put(layer.weights, f"layer{i}.weights"),
            "bias": put(layer.bias, f"layer{i}.bias", "flat"),
        }
        if layer.bn is not None:
            entry["bn"] = {
                k: put(getattr(layer.bn, k), f"layer{i}.bn_{k}", "flat")
                for k in ("gamma", "beta", "mean", "var")
            }
            entry["bn"]["eps"] = layer.bn.eps
        entries.append(entry)
    doc = {"name": model.name, "input_shape": list(model.input_shape), "layers": entries}
    path = directory / "manifest.json"
    path.write_text(json.dumps(doc, indent=2))
    return path


# -- quantized model ----------------------------------------------------------

@dataclass
class QuantizedLayer:
    """Integer weights and requantization parameters of one layer.

    Parameter-set fields hold one entry for LWQ and WES and one entry per
    output channel for CWQ.  ``shifts`` is only set for WES.
    """

    kind: str
    scheme: str
    q_w: np.ndarray
    w_scale: np.ndarray
    w_zero: np.ndarray
    q_bias: np.ndarray
    compounds: tuple[ScaleCompound, ...]
    in_params: AffineParams
    out_params: AffineParams
    shifts: np.ndarray | None = None
    stride: int = 1
    padding: tuple[int, int, int, int] = (0, 0, 0, 0)
    activation: str = "none"
    sparse: bool = False
    info: dict = field(default_factory=dict, compare=False, repr=False)

    @property
    def out_channels(self) -> int:
        return self.q_w.shape[-1]

    def validate(self):
        n = self.out_channels
        per = n if self.scheme == "cwq" else 1
        if self.scheme not in SCHEMES:
            raise ModelFormatError(f"unknown scheme {self.scheme!r}")
        if len(self.compounds) != per or self.w_zero.shape != (per,) or self.w_scale.shape != (per,):
            raise ModelFormatError(f"{self.scheme} layer needs {per} (M, s, z) sets")
        if self.q_bias.shape != (n,):
            raise ModelFormatError("bias length does not match output channels")
        if self.scheme == "wes":
            if self.shifts is None or self.shifts.shape != (n,):
                raise ModelFormatError("wes layer needs one shift scale per channel")
            if self.shifts.min() < 0 or self.shifts.max() > 15:
                raise ModelFormatError("shift scales must fit in 4 bits")
        elif self.shifts is not None:
            raise ModelFormatError(f"{self.scheme} layer must not carry shift scales")
        return self

    def channel_shifts(self) -> np.ndarray:
        if self.shifts is None:
            return np.zeros(self.out_channels, dtype=np.int64)
        return self.shifts.astype(np.int64)


@dataclass
class QuantizedModel:
    input_shape: tuple[int, int, int]
    layers: list[QuantizedLayer]
    name: str = "model"

    @property
    def input_params(self) -> AffineParams:
        return self.layers[0].in_params


MAGIC = b"WESQ"
VERSION = 1
_KIND_CODE = {k: i for i, k in enumerate(KINDS)}
_SCHEME_CODE = {"lwq": 0, "cwq": 1, "wes": 2}
_ACT_CODE = {a: i for i, a in enumerate(ACTIVATIONS)}


def _pack_nibbles(values) -> bytes:
    v = np.asarray(values, dtype=np.uint8)
    if v.size % 2:
        v = np.append(v, 0)
    return (v[0::2] | (v[1::2] << 4)).astype(np.uint8).tobytes()


def _unpack_nibbles(buf: bytes, n: int) -> np.ndarray:
    b = np.frombuffer(buf, dtype=np.uint8)
    out = np.empty(b.size * 2, dtype=np.uint8)
    out[0::2] = b & 0x0F
    out[1::2] = b >> 4
    return out[:n]


def save_quantized(model: QuantizedModel, path) -> int:
    """Serialize ``model``; returns the number of bytes written.

    Layout, all little-endian::

        "WESQ" | version u16 | layer count u16 | input H, W, C u16
        per layer:
          kind u8 | scheme u8 (lwq=0, cwq=1, wes=2) | activation u8 | flags u8 (bit0 sparse)
          kh, kw, cin, cout u16 | stride u8 | pad top, bottom, left, right u8
          s_w f32 x P | z_w u8 x P | M u32 x P | s i8 x P        (P = N for cwq, else 1)
          shift scales, 4-bit packed low nibble first, ceil(N/2) bytes (wes only)
          in scale f32 | in zero u8 | out scale f32 | out zero u8
          q_B i32 x N
          dense:  q_w u8 x (kh*kw*cin*cout), HWIO order
          sparse: count u32 | mask bits ceil(n/8) bytes, LSB first | count packed u8
    """
    from .pruning import compress

    out = bytearray(MAGIC)
    out += struct.pack("<HH3H", VERSION, len(model.layers), *model.input_shape)
    for layer in model.layers:
        layer.validate()
        kh, kw, cin, cout = layer.q_w.shape
        out += struct.pack(
            "<4B4H5B",
            _KIND_CODE[layer.kind], _SCHEME_CODE[layer.scheme], _ACT_CODE[layer.activation],
            int(layer.sparse), kh, kw, cin, cout, layer.stride, *layer.padding,
        )
        out += np.asarray(layer.w_scale, dtype="<f4").tobytes()
        out += np.asarray(layer.w_zero, dtype=np.uint8).tobytes()
        out += np.array([c.mantissa for c in layer.compounds], dtype="<u4").tobytes()
        out += np.array([c.exponent for c in layer.compounds], dtype="i1").tobytes()
        if layer.scheme == "wes":
            out += _pack_nibbles(layer.shifts)
        for p in (layer.in_params, layer.out_params):
            out += struct.pack("<fB", p.scale, p.zero_point)
        out += np.asarray(layer.q_bias, dtype="<i4").tobytes()
        if layer.sparse:
            fill = np.broadcast_to(layer.w_zero, (cout,)) if layer.scheme == "cwq" else layer.w_zero[0]
            sw = compress(layer.q_w, fill=fill)
            out += struct.pack("<I", sw.count)
            out += np.packbits(sw.mask.ravel(), bitorder="little").tobytes()
            out += sw.packed.astype(np.uint8).tobytes()
        else:
            out += np.ascontiguousarray(layer.q_w, dtype=np.uint8).tobytes()
    Path(path).write_bytes(bytes(out))
    return len(out)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise ModelFormatError("quantized model file is truncated")
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def array(self, dtype, n: int) -> np.ndarray:
        dtype = np.dtype(dtype)
        return np.frombuffer(self.take(dtype.itemsize * n), dtype=dtype).copy()


def load_quantized(path) -> QuantizedModel:
    from .pruning import SparseWeights, decompress

    r = _Reader(Path(path).read_bytes())
    if r.take(4) != MAGIC:
        raise ModelFormatError("bad magic, not a WESQ model file")
    version, count, h, w, c = r.unpack("<HH3H")
    if version != VERSION:
        raise ModelFormatError(f"unsupported version {version}")
    kinds = {v: k for k, v in _KIND_CODE.items()}
    schemes = {v: k for k, v in _SCHEME_CODE.items()}
    acts = {v: k for k, v in _ACT_CODE.items()}
    layers = []
    for _ in range(count):
        kind, scheme, act, flags, kh, kw, cin, cout, stride, *pad = r.unpack("<4B4H5B")
        try:
            kind, scheme, act = kinds[kind], schemes[scheme], acts[act]
        except KeyError:
            raise ModelFormatError("unknown enum code in layer header") from None
        per = cout if scheme == "cwq" else 1
        w_scale = r.array("<f4", per).astype(np.float32)
        w_zero = r.array(np.uint8, per)
        mant = r.array("<u4", per)
        expo = r.array("i1", per)
        shifts = _unpack_nibbles(r.take((cout + 1) // 2), cout) if scheme == "wes" else None
        s_in, z_in, s_out, z_out = r.unpack("<fB") + r.unpack("<fB")
        q_bias = r.array("<i4", cout).astype(np.int32)
        n = kh * kw * cin * cout
        sparse = bool(flags & 1)
        if sparse:
            (nnz,) = r.unpack("<I")
            mask = np.unpackbits(r.array(np.uint8, (n + 7) // 8), bitorder="little")[:n]
            packed = r.array(np.uint8, nnz)
            fill = np.broadcast_to(w_zero, (cout,)) if scheme == "cwq" else w_zero[0]
            q_w = decompress(SparseWeights(mask.reshape(kh, kw, cin, cout).astype(bool), packed, nnz), fill=fill)
        else:
            q_w = r.array(np.uint8, n).reshape(kh, kw, cin, cout)
        layer = QuantizedLayer(
            kind=kind,
            scheme=scheme,
            q_w=q_w.astype(np.uint8),
            w_scale=w_scale,
            w_zero=w_zero,
            q_bias=q_bias,
            compounds=tuple(ScaleCompound(int(m), int(e)) for m, e in zip(mant, expo)),
            in_params=AffineParams(float(s_in), int(z_in)),
            out_params=AffineParams(float(s_out), int(z_out)),
            shifts=shifts,
            stride=stride,
            padding=tuple(pad),
            activation=act,
            sparse=sparse,
        )
        layers.append(layer.validate())
    if r.pos != len(r.buf):
        raise ModelFormatError("trailing bytes after last layer")
    return QuantizedModel((h, w, c), layers, name=Path(path).stem)


def load_tensor_dir(directory) -> np.ndarray:
    """Stack of same-shaped tensors listed in ``directory/manifest.json``.

    Manifest: ``{"shape": [H, W, C], "dtype": "float32", "files": [...]}``.
    """
    directory = Path(directory)
    path = directory / "manifest.json"
    if not path.is_file():
        raise ModelFormatError(f"no manifest.json in {directory}")
    doc = json.loads(path.read_text())
    files = doc.get("files", [])
    if not files:
        raise ModelFormatError(f"{path} lists no tensors")
    ref = {"shape": doc["shape"], "dtype": doc.get("dtype", "float32"), "layout": "NHWC"}
    return np.stack([_read_tensor(directory, dict(ref, path=f), f) for f in files])


def save_tensor_dir(directory, tensors, dtype="float32") -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    tensors = np.asarray(tensors)
    names = []
    for i, t in enumerate(tensors):
        name = f"sample{i:05d}.bin"
        np.ascontiguousarray(t, dtype=DTYPES[dtype]).tofile(directory / name)
        names.append(name)
    doc = {"shape": list(tensors.shape[1:]), "dtype": dtype, "files": names}
    path = directory / "manifest.json"
    path.write_text(json.dumps(doc, indent=2))
    return path
