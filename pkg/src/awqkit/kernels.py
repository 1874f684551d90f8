"""Fused dequantize-and-multiply kernels over packed weights, plus a benchmark."""

from __future__ import annotations

import os
import platform
import statistics
import time
from dataclasses import asdict, dataclass, field

import numpy as np
from threadpoolctl import threadpool_limits

from awqkit.packing import PackedWeights, check_layout, pack, unpack, unpack_cols
from awqkit.quant import EPS, GroupQuant, dequantize
from awqkit.tensor import DTYPE, DimensionError, matmul

SPEEDUP_TARGET = 1.2


def inverse_scale(s, n: int) -> np.ndarray:
    """``1 / s`` with the epsilon floor; all ones when ``s`` is None."""
    if s is None:
        return np.ones(n, dtype=DTYPE)
    return (DTYPE(1.0) / np.maximum(np.asarray(s, dtype=DTYPE), DTYPE(EPS))).astype(DTYPE)


@dataclass(frozen=True, eq=False)
class LinearLayerPacked:
    """A quantized linear layer ready for fused inference.

    ``awq_scale_inv`` multiplies incoming activations before the product.
    """

    packed: PackedWeights
    scales: np.ndarray
    zeros: np.ndarray | None
    awq_scale_inv: np.ndarray
    group_size: int
    awq_scale: np.ndarray | None = None

    @property
    def out_features(self) -> int:
        return self.packed.shape[0]

    @property
    def in_features(self) -> int:
        return self.packed.shape[1]

    @property
    def bits(self) -> int:
        return self.packed.bits

    @property
    def layout(self) -> str:
        return self.packed.layout

    @classmethod
    def from_group_quant(cls, gq: GroupQuant, s=None, layout: str = "linear") -> "LinearLayerPacked":
        check_layout(gq.bits, layout)
        n = gq.qvals.shape[1]
        if s is not None:
            s = np.asarray(s, dtype=DTYPE)
        signed = gq.zeros is None
        return cls(
            packed=pack(gq.qvals, gq.bits, layout, signed=signed),
            scales=np.ascontiguousarray(gq.scales, dtype=DTYPE),
            zeros=None if gq.zeros is None else np.ascontiguousarray(gq.zeros, dtype=np.int32),
            awq_scale_inv=inverse_scale(s, n),
            group_size=gq.group_size,
            awq_scale=s,
        )

    @classmethod
    def from_quantized(cls, layer, layout: str = "linear") -> "LinearLayerPacked":
        return cls.from_group_quant(layer.gq, layer.s, layout)

    def forward(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=DTYPE)
        return gemv_fused(self, x) if x.ndim == 1 else gemm_fused(self, x)


def gemv_fused(layer: LinearLayerPacked, x) -> np.ndarray:
    """``y = W_hat @ (s_inv * x)`` decoding one weight group at a time.

    Per-group partial sums are accumulated in float32 in group order.
    """
    x = np.asarray(x, dtype=DTYPE)
    n = layer.in_features
    if x.shape != (n,):
        raise DimensionError(f"gemv expects x of shape ({n},), got {x.shape}")
    xs = x * layer.awq_scale_inv
    acc = np.zeros(layer.out_features, dtype=DTYPE)
    g_size = layer.group_size
    for g, c0 in enumerate(range(0, n, g_size)):
        c1 = min(c0 + g_size, n)
        xg = xs[c0:c1].copy()
        # decode only this group's columns; never the whole matrix
        partial = unpack_cols(layer.packed, c0, c1).astype(DTYPE) @ xg
        if layer.zeros is not None:
            partial -= layer.zeros[:, g].astype(DTYPE) * xg.sum(dtype=DTYPE)
        acc += layer.scales[:, g] * partial
    return acc


def gemm_fused(layer: LinearLayerPacked, x) -> np.ndarray:
    """Batched :func:`gemv_fused`; row ``t`` is bit-identical to ``gemv_fused(x[t])``."""
    x = np.asarray(x, dtype=DTYPE)
    if x.ndim != 2 or x.shape[1] != layer.in_features:
        raise DimensionError(f"gemm expects x of shape (tokens, {layer.in_features}), got {x.shape}")
    out = np.empty((x.shape[0], layer.out_features), dtype=DTYPE)
    for t in range(x.shape[0]):
        out[t] = gemv_fused(layer, x[t])
    return out


def dequantize_packed(layer: LinearLayerPacked) -> np.ndarray:
    """Materialize the full float32 weight matrix (reference path only)."""
    q = unpack(layer.packed)
    gq = GroupQuant(q, layer.scales, layer.zeros, layer.group_size, layer.bits,
                    "asymmetric" if layer.zeros is not None else "symmetric")
    return dequantize(gq)


def reference_forward(layer: LinearLayerPacked, x) -> np.ndarray:
    """Unpack, dequantize, then dense matmul. The oracle for the fused path."""
    x = np.asarray(x, dtype=DTYPE)
    x2 = x.reshape(1, -1) if x.ndim == 1 else x
    y = matmul(dequantize_packed(layer), x2 * layer.awq_scale_inv)
    return y.reshape(-1) if x.ndim == 1 else y


def weight_traffic_bytes(out_features: int, in_features: int, bits: int, group_size: int,
                         scale_bytes: int = 4, with_zeros: bool = False) -> int:
    """Bytes read for one pass over a packed weight: payload plus per-group metadata."""
    n_groups = -(-in_features // group_size)
    meta = out_features * n_groups * scale_bytes * (2 if with_zeros else 1)
    return -(-out_features * in_features * bits // 8) + meta


def machine_info() -> dict:
    return {
        "platform": platform.platform(),
        "machine": platform.machine(),
        "python": platform.python_version(),
        "numpy": np.__version__,
        "cpu_count": os.cpu_count(),
    }


@dataclass
class BenchRecord:
    layout: str
    bits: int
    group_size: int
    out_features: int
    in_features: int
    tokens: int
    repeats: int
    median_s: float
    baseline_median_s: float
    speedup_vs_baseline: float
    meets_speedup_target: bool
    weight_bytes: int
    weight_bytes_fp16_scales: int
    fp32_weight_bytes: int
    fp16_weight_bytes: int
    reduction_vs_fp32: float
    reduction_vs_fp16: float
    activation_bytes: int
    output_bytes: int
    flops: int
    arithmetic_intensity: float
    achieved_gbps: float
    machine: dict = field(default_factory=dict)

    def to_record(self) -> dict:
        return asdict(self)


def as_linear_layout(layer: LinearLayerPacked) -> LinearLayerPacked:
    """Same layer repacked as a conventional bit stream."""
    if layer.layout == "linear":
        return layer
    p = layer.packed
    return LinearLayerPacked(pack(unpack(p), p.bits, "linear", signed=p.signed),
                             layer.scales, layer.zeros, layer.awq_scale_inv, layer.group_size, layer.awq_scale)


def _median_time(fn, repeats: int) -> float:
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def bench_kernel(layer: LinearLayerPacked, tokens: int = 1, repeats: int = 5, seed: int = 0,
                 threads: int = 1) -> BenchRecord:
    """Time the fused kernel against the naive baseline and account for memory traffic."""
    if repeats < 3:
        raise ValueError(f"repeats must be >= 3, got {repeats}")
    out, n = layer.out_features, layer.in_features
    x = np.random.default_rng(seed).standard_normal((tokens, n)).astype(DTYPE)
    xv = x[0] if tokens == 1 else x

    # baseline: conventional packing, whole matrix unpacked to a buffer, then matmul
    base_layer = as_linear_layout(layer)

    with threadpool_limits(limits=threads):
        fused = (lambda: gemv_fused(layer, xv)) if tokens == 1 else (lambda: gemm_fused(layer, x))
        fused()
        median = _median_time(fused, repeats)
        baseline = _median_time(lambda: reference_forward(base_layer, x), repeats)

    with_zeros = layer.zeros is not None
    wbytes = weight_traffic_bytes(out, n, layer.bits, layer.group_size, 4, with_zeros)
    wbytes16 = weight_traffic_bytes(out, n, layer.bits, layer.group_size, 2, with_zeros)
    act = tokens * n * 4
    outb = tokens * out * 4
    flops = 2 * out * n * tokens
    moved = wbytes + act + outb
    speedup = baseline / median if median > 0 else float("inf")
    return BenchRecord(
        layout=layer.layout,
        bits=layer.bits,
        group_size=layer.group_size,
        out_features=out,
        in_features=n,
        tokens=tokens,
        repeats=repeats,
        median_s=median,
        baseline_median_s=baseline,
        speedup_vs_baseline=speedup,
        meets_speedup_target=speedup >= SPEEDUP_TARGET,
        weight_bytes=wbytes,
        weight_bytes_fp16_scales=wbytes16,
        fp32_weight_bytes=out * n * 4,
        fp16_weight_bytes=out * n * 2,
        reduction_vs_fp32=out * n * 4 / wbytes,
        reduction_vs_fp16=out * n * 2 / wbytes16,
        activation_bytes=act,
        output_bytes=outb,
        flops=flops,
        arithmetic_intensity=flops / moved,
        achieved_gbps=moved / median / 1e9 if median > 0 else float("inf"),
        machine=machine_info(),
    )


def traffic_breakdown(out_features: int, in_features: int, tokens: int, bits: int, group_size: int) -> dict:
    """Weight vs activation bytes for one linear layer at a given token count."""
    weight = weight_traffic_bytes(out_features, in_features, bits, group_size, 4)
    activation = tokens * (in_features + out_features) * 4
    return {
        "out_features": out_features,
        "in_features": in_features,
        "tokens": tokens,
        "weight_bytes": weight,
        "fp32_weight_bytes": out_features * in_features * 4,
        "activation_bytes": activation,
        "weight_to_activation": weight / activation,
    }
