"""Exception types raised by wesq."""


class WesqError(Exception):
    pass


class ModelFormatError(WesqError, ValueError):
    """A model file or tensor blob is malformed."""


class DegenerateLayerError(WesqError, ValueError):
    """Every weight channel of a layer is identically zero."""


class BiasOverflowError(WesqError, OverflowError):
    """Quantized bias does not fit into a signed 32-bit integer."""


class AccumulatorOverflowError(WesqError, OverflowError):
    """Integer accumulation could leave the signed 32-bit range."""


class LayerError(WesqError):
    """Wraps a failure with the index of the layer it happened in."""

    def __init__(self, index, cause):
        super().__init__(f"layer {index}: {cause}")
        self.index = index
        self.cause = cause
