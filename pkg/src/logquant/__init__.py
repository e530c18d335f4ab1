"""Logarithmic (power-of-two) quantization toolkit."""

from .codec import (
    LinearQuantizedTensor,
    QuantConfig,
    QuantizedTensor,
    ScaleStrategy,
    decode,
    encode,
    linear_encode,
    nearest_pow2_exponent,
    quantization_sse,
)
from .container import (
    CompressionReport,
    ModelContainer,
    dequantize_model,
    pack,
    read_model,
    unpack,
    write_model,
)
from .errors import (
    CapacityError,
    DataError,
    DegenerateError,
    DomainError,
    FormatError,
    IoError,
    LogQuantError,
    TrainingError,
    ValidationError,
)
from .qdot import ActQuantConfig, qdot_reference, qdot_shift, quantize_activations, ste_backward
from .scale import ScaleFitReport, em_fit_scale, max_scale, refit_scale
from .tensor_store import Tensor, TensorArchive, TensorStats, load_archive, save_archive, tensor_stats

__version__ = "0.1.0"

__all__ = [
    "ActQuantConfig",
    "CapacityError",
    "CompressionReport",
    "DataError",
    "decode",
    "DegenerateError",
    "dequantize_model",
    "DomainError",
    "em_fit_scale",
    "encode",
    "FormatError",
    "IoError",
    "linear_encode",
    "LinearQuantizedTensor",
    "load_archive",
    "LogQuantError",
    "max_scale",
    "ModelContainer",
    "nearest_pow2_exponent",
    "pack",
    "qdot_reference",
    "qdot_shift",
    "QuantConfig",
    "quantization_sse",
    "quantize_activations",
    "QuantizedTensor",
    "read_model",
    "refit_scale",
    "save_archive",
    "ScaleFitReport",
    "ScaleStrategy",
    "ste_backward",
    "Tensor",
    "tensor_stats",
    "TensorArchive",
    "TensorStats",
    "TrainingError",
    "unpack",
    "ValidationError",
    "write_model",
]
