"""Weights-only k-quant toolkit: codecs, mixed-precision recipes, GGUF I/O
and deployment size estimates."""

__version__ = "0.1.0"

from .analysis import ErrorReport, analyze, compare
from .arch import ModelArch, TensorSpec
from .container import ContainerFile, format_type_codes, read_container, write_container
from .estimate import DeploymentReport, DeviceProfile, RuntimeOverheadModel, fit_matrix, report, tensor_bytes
from .kquant import (
    BlockFormat,
    BlockParams,
    QuantizedTensor,
    dequantize_block,
    dequantize_tensor,
    fit_block_params,
    get_format,
    quantize_block,
    quantize_tensor,
)
from .quantize import quantize_model
from .recipes import AllocationPlan, QuantRecipe, builtin_recipes, get_recipe, plan_allocation, split_to_counts
from .toy import make_toy_model, toy_arch

__all__ = [
    "AllocationPlan",
    "BlockFormat",
    "BlockParams",
    "ContainerFile",
    "DeploymentReport",
    "DeviceProfile",
    "ErrorReport",
    "ModelArch",
    "QuantRecipe",
    "QuantizedTensor",
    "RuntimeOverheadModel",
    "TensorSpec",
    "analyze",
    "builtin_recipes",
    "compare",
    "dequantize_block",
    "dequantize_tensor",
    "fit_block_params",
    "fit_matrix",
    "format_type_codes",
    "get_format",
    "get_recipe",
    "make_toy_model",
    "plan_allocation",
    "quantize_block",
    "quantize_model",
    "quantize_tensor",
    "read_container",
    "report",
    "split_to_counts",
    "tensor_bytes",
    "toy_arch",
    "write_container",
]
