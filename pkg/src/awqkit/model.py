"""A stack of residual MLP blocks used as a stand-in for an LLM's linear layers."""

from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from awqkit.kernels import LinearLayerPacked, gemm_fused
from awqkit.quant import QuantConfig, fake_quantize
from awqkit.salient import collect_calib_stats, n_protected, select_channels
from awqkit.search import quantize_layer_awq, quantize_layer_rtn
from awqkit.tensor import DTYPE, DimensionError, as_tensor, frobenius_norm, matmul

log = logging.getLogger(__name__)

METHODS = ("rtn", "awq", "mixed-fp16")


def gelu(x: np.ndarray) -> np.ndarray:
    x = x.astype(DTYPE, copy=False)
    c = DTYPE(np.sqrt(2.0 / np.pi))
    return DTYPE(0.5) * x * (DTYPE(1.0) + np.tanh(c * (x + DTYPE(0.044715) * x * x * x)))


def layer_names(n_blocks: int) -> list[str]:
    return [f"blocks.{b}.{fc}" for b in range(n_blocks) for fc in ("fc1", "fc2")]


@dataclass
class TinyModel:
    """Residual blocks ``x + fc2(gelu(fc1(x)))``; ``fc1`` maps dim to hidden.

    A layer is either a dense ``[out, in]`` float32 array or a
    :class:`LinearLayerPacked`.
    """

    dim: int
    hidden: int
    n_blocks: int
    layers: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in layer_names(self.n_blocks):
            if name not in self.layers:
                raise KeyError(f"model is missing layer {name!r}")
            want = (self.hidden, self.dim) if name.endswith("fc1") else (self.dim, self.hidden)
            got = _layer_shape(self.layers[name])
            if got != want:
                raise DimensionError(f"layer {name} has shape {got}, expected {want}")

    @classmethod
    def random(cls, dim: int = 256, n_blocks: int = 4, seed: int = 0, expansion: int = 4,
               hot_fraction: float = 0.01, hot_gain: float = 8.0) -> "TinyModel":
        """Gaussian weights; a few ``fc1`` rows are amplified so some hidden
        units carry large activations, as in trained transformers."""
        rng = np.random.default_rng(seed)
        hidden = expansion * dim
        layers = {}
        for b in range(n_blocks):
            w1 = rng.standard_normal((hidden, dim)) / np.sqrt(dim)
            hot = rng.choice(hidden, size=max(1, int(round(hot_fraction * hidden))), replace=False)
            w1[hot] *= hot_gain
            w2 = rng.standard_normal((dim, hidden)) / np.sqrt(hidden) * 0.5
            layers[f"blocks.{b}.fc1"] = w1.astype(DTYPE)
            layers[f"blocks.{b}.fc2"] = w2.astype(DTYPE)
        return cls(dim=dim, hidden=hidden, n_blocks=n_blocks, layers=layers)

    @property
    def names(self) -> list[str]:
        return layer_names(self.n_blocks)

    def linear(self, name: str, x: np.ndarray) -> np.ndarray:
        layer = self.layers[name]
        if isinstance(layer, LinearLayerPacked):
            return gemm_fused(layer, x)
        return matmul(layer, x)

    def forward(self, x, capture: dict | None = None) -> np.ndarray:
        """Run the stack on ``[tokens, dim]`` inputs.

        When ``capture`` is a dict it receives each layer's input batch.
        """
        x = as_tensor(x, name="inputs")
        if x.shape[1] != self.dim:
            raise DimensionError(f"inputs have {x.shape[1]} features, model dim is {self.dim}")
        for b in range(self.n_blocks):
            n1, n2 = f"blocks.{b}.fc1", f"blocks.{b}.fc2"
            if capture is not None:
                capture[n1] = x
            h = gelu(self.linear(n1, x))
            if capture is not None:
                capture[n2] = h
            x = x + self.linear(n2, h)
        return x


def _layer_shape(layer) -> tuple[int, int]:
    if isinstance(layer, LinearLayerPacked):
        return (layer.out_features, layer.in_features)
    return tuple(np.asarray(layer).shape)


def synthetic_inputs(tokens: int, dim: int, seed: int = 0, outlier_fraction: float = 0.01,
                     outlier_scale: float = 20.0, outlier_seed: int = 1234) -> np.ndarray:
    """Gaussian embeddings with a fixed set of high-magnitude channels.

    ``outlier_seed`` fixes which channels are outliers so calibration and
    held-out draws share them.
    """
    x = np.random.default_rng(seed).standard_normal((tokens, dim))
    n_out = max(1, int(round(outlier_fraction * dim)))
    chans = np.random.default_rng(outlier_seed).choice(dim, size=n_out, replace=False)
    x[:, chans] *= outlier_scale
    return x.astype(DTYPE)


def capture_activations(model: TinyModel, x) -> dict[str, np.ndarray]:
    """Inputs seen by every linear layer of the full-precision model."""
    acts: dict[str, np.ndarray] = {}
    model.forward(x, capture=acts)
    return acts


@dataclass
class LayerReport:
    name: str
    method: str
    rtn_loss: float
    loss: float
    alpha: float
    mean_clip_ratio: float

    def to_record(self) -> dict:
        return dict(self.__dict__)


def _quantize_one(name, w, x, cfg, method, mixed_fraction):
    if method == "rtn":
        ql = quantize_layer_rtn(w, cfg, x)
        return ql, LayerReport(name, method, ql.rtn_loss, ql.loss, 0.0, 1.0)
    if method == "awq":
        ql = quantize_layer_awq(w, collect_calib_stats(x), cfg)
        return ql, LayerReport(name, method, ql.rtn_loss, ql.loss, ql.alpha, float(np.mean(ql.clip_ratios)))
    if method == "mixed-fp16":
        ids = select_channels(w, x, "activation", n_protected(mixed_fraction, w.shape[1]))
        w_hat = fake_quantize(w, cfg)
        w_hat[:, ids] = w[:, ids]
        ref = matmul(w, x)
        rtn = frobenius_norm(matmul(fake_quantize(w, cfg), x) - ref)
        return w_hat, LayerReport(name, method, rtn, frobenius_norm(matmul(w_hat, x) - ref), 0.0, 1.0)
    raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("AWQKIT_THREADS", "1")))
    except ValueError:
        return 1


def quantize_model(model: TinyModel, calib: dict[str, np.ndarray], cfg: QuantConfig,
                   method: str = "awq", layout: str = "linear", mixed_fraction: float = 0.01,
                   threads: int | None = None) -> tuple[TinyModel, list[LayerReport]]:
    """Quantize every linear layer; returns the new model and per-layer reports sorted by name.

    ``mixed-fp16`` yields dense simulated weights instead of packed layers.
    """
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")
    missing = [n for n in model.names if n not in calib]
    if missing:
        raise KeyError(f"calibration has no activations for layer {missing[0]!r}")
    threads = threads or worker_count()

    def work(name):
        w = model.layers[name]
        if isinstance(w, LinearLayerPacked):
            raise TypeError(f"layer {name} is already quantized")
        return name, _quantize_one(name, w, as_tensor(calib[name], name=name), cfg, method, mixed_fraction)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(work, model.names))
    else:
        results = [work(n) for n in model.names]

    layers, reports = {}, []
    for name, (q, report) in sorted(results, key=lambda r: r[0]):
        layers[name] = q if method == "mixed-fp16" else LinearLayerPacked.from_quantized(q, layout)
        reports.append(report)
        log.info("%s: rtn=%.4g loss=%.4g alpha=%.3f", name, report.rtn_loss, report.loss, report.alpha)
    return TinyModel(model.dim, model.hidden, model.n_blocks, layers), reports


def relative_error(y, ref) -> float:
    denom = frobenius_norm(ref)
    return frobenius_norm(np.asarray(y) - np.asarray(ref)) / denom if denom > 0 else frobenius_norm(y)


def layer_errors(fp: TinyModel, quant: TinyModel, x) -> dict[str, float]:
    """Relative output error of each quantized layer on the FP model's layer inputs."""
    acts = capture_activations(fp, x)
    return {name: relative_error(quant.linear(name, acts[name]), fp.linear(name, acts[name]))
            for name in fp.names}

