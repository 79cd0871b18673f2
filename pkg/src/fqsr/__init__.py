"""Fully quantized image super-resolution: learned-interval quantizers,
bit-serial integer convolution, quantized skips, cost accounting, training
and evaluation."""

from .errors import ConfigError, NumericError, ParameterError, RangeError, ShapeError, StateError
from .netgraph import BitConfig, ModelSpec, Weights, build_model, forward, init_weights
from .quantizer import QuantParams, integer_code, quantize

__version__ = "0.1.0"

__all__ = [
    "BitConfig",
    "ConfigError",
    "ModelSpec",
    "NumericError",
    "ParameterError",
    "QuantParams",
    "RangeError",
    "ShapeError",
    "StateError",
    "Weights",
    "build_model",
    "forward",
    "init_weights",
    "integer_code",
    "quantize",
]
