"""Quantized zeroth-order fine-tuning on numpy."""

from .errors import ConfigurationError, InputError, IntegrityError, QuzoError, RunError
from .quant import (QuantFormat, QuantScheme, QuantTensor, dequantize, enumerate_grid, fit_scale,
                    qmatmul, quantize, quantize_nearest, quantize_stochastic)
from .rng import RngStream

__version__ = "0.1.0"
