"""Post-training quantization with weight equalizing shift scalers (WES).

Per-channel power-of-two weight rescaling ahead of layer-wise affine
quantization, and a bit-exact integer convolution that undoes the shift
inside requantization.
"""
from .affine import (
    AffineParams,
    ScaleCompound,
    dequantize,
    fake_quantize,
    make_scale_compound,
    nudged_range,
    quantize_affine,
    quantize_bias,
)
from .bnfold import bn_fold, fold_model
from .errors import (
    AccumulatorOverflowError,
    BiasOverflowError,
    DegenerateLayerError,
    LayerError,
    ModelFormatError,
)
from .fixedpoint import FixedPointContext, conv_fixed, float_reference, requantize, simulate
from .metrics import LayerGeometry, overlap_ratio, param_size, quant_error
from .model import (
    BNParams,
    LayerSpec,
    ModelGraph,
    QuantizedLayer,
    QuantizedModel,
    load_model,
    load_quantized,
    save_model,
    save_quantized,
)
from .pruning import SparseWeights, compress, decompress, prune
from .quantizer import calibrate_activations, clip_optimize, quantize_model
from .wes import (
    apply_shift,
    channel_ranges,
    init_total_range,
    optimize_total_range,
    shift_scales,
    wes_cost,
)

__version__ = "0.1.0"
