"""Activation-aware weight-only quantization toolkit with packed kernels."""

from awqkit.quant import GroupQuant, QuantConfig, dequantize, quant_error, quantize_group_rtn
from awqkit.search import (
    QuantizedLayer,
    ScaleSearchResult,
    awq_loss,
    quantize_layer_awq,
    search_clip,
    search_scales,
)
from awqkit.salient import CalibStats, collect_calib_stats

__version__ = "0.1.0"

__all__ = [
    "CalibStats",
    "GroupQuant",
    "QuantConfig",
    "QuantizedLayer",
    "ScaleSearchResult",
    "awq_loss",
    "collect_calib_stats",
    "dequantize",
    "quant_error",
    "quantize_group_rtn",
    "quantize_layer_awq",
    "search_clip",
    "search_scales",
]
