"""Super-block k-quant codecs."""

from .codec import (
    METHODS,
    BlockSizeError,
    NonFiniteWeightError,
    QuantError,
    QuantizedTensor,
    RowNotBlockAlignedError,
    decode_payload,
    dequantize_block,
    dequantize_tensor,
    fit_block_params,
    naive_block_params,
    quantize_block,
    quantize_tensor,
    set_threads,
)
from .formats import FORMATS, PRECISION_ORDER, BlockFormat, FormatId, get_format, precision_rank
from .packing import BlockParams, pack, reconstruct, unpack

__all__ = [
    "METHODS",
    "FORMATS",
    "PRECISION_ORDER",
    "BlockFormat",
    "BlockParams",
    "BlockSizeError",
    "FormatId",
    "NonFiniteWeightError",
    "QuantError",
    "QuantizedTensor",
    "RowNotBlockAlignedError",
    "decode_payload",
    "dequantize_block",
    "dequantize_tensor",
    "fit_block_params",
    "get_format",
    "naive_block_params",
    "pack",
    "precision_rank",
    "quantize_block",
    "quantize_tensor",
    "reconstruct",
    "set_threads",
    "unpack",
]
