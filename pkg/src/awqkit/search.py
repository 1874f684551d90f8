"""Activation-aware scale search and weight clipping for one linear layer."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from awqkit.quant import EPS, GroupQuant, QuantConfig, dequantize, fake_quantize, quantize_group_rtn
from awqkit.salient import CalibStats
from awqkit.tensor import DTYPE, DimensionError, as_tensor, frobenius_norm, matmul

log = logging.getLogger(__name__)


@dataclass(eq=False)
class ScaleSearchResult:
    alpha: float
    s: np.ndarray
    loss: float
    rtn_loss: float
    clip_ratios: np.ndarray | None = None
    losses: list[float] = field(default_factory=list)
    warning: str | None = None


@dataclass(eq=False)
class QuantizedLayer:
    """Quantized ``W * diag(s)`` plus the scale ``s`` to divide activations by."""

    gq: GroupQuant
    s: np.ndarray
    cfg: QuantConfig
    alpha: float = 0.0
    loss: float = 0.0
    rtn_loss: float = 0.0
    clip_ratios: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.gq.shape

    def forward(self, x) -> np.ndarray:
        """Reference forward: dense dequantized weights on ``x / s``."""
        x = as_tensor(x, name="x")
        return matmul(dequantize(self.gq), x / np.maximum(self.s, DTYPE(EPS)))

    def equals(self, other: "QuantizedLayer") -> bool:
        return (
            self.gq.equals(other.gq)
            and self.s.tobytes() == other.s.tobytes()
            and self.alpha == other.alpha
            and self.loss == other.loss
        )


def alpha_grid(size: int) -> list[float]:
    """``size`` evenly spaced exponents covering [0, 1]; just ``[0]`` for size 1."""
    if size <= 1:
        return [0.0]
    return [i / (size - 1) for i in range(size)]


def scales_for_alpha(per_channel_mag: np.ndarray, alpha: float) -> np.ndarray:
    # a dead input channel (zero magnitude) keeps scale 1
    base = np.where(per_channel_mag > 0, per_channel_mag, 1.0).astype(np.float64)
    return (base ** alpha).astype(DTYPE)


def _check_scales(s: np.ndarray, in_features: int) -> np.ndarray:
    s = np.asarray(s, dtype=DTYPE).reshape(-1)
    if s.shape[0] != in_features:
        raise DimensionError(f"scale vector has {s.shape[0]} entries, layer has {in_features} inputs")
    bad = np.flatnonzero(~(s > 0))
    if bad.size:
        raise ValueError(f"scale for input channel {int(bad[0])} is not positive: {s[bad[0]]}")
    return s


def _scaled_loss(w, x, ref, s, cfg, clip_ratios=None) -> float:
    s_safe = np.maximum(s, DTYPE(EPS))
    w_hat = fake_quantize(w * s, cfg, clip_ratios)
    return frobenius_norm(matmul(w_hat, x / s_safe) - ref)


def awq_loss(w, x, s, cfg: QuantConfig, clip_ratios=None) -> float:
    """``|| Q(W diag(s)) (diag(s)^-1 X) - W X ||`` in Frobenius norm."""
    w = as_tensor(w, name="w")
    x = as_tensor(x, name="x")
    s = _check_scales(s, w.shape[1])
    return _scaled_loss(w, x, matmul(w, x), s, cfg, clip_ratios)


def search_scales(w, calib: CalibStats, cfg: QuantConfig) -> ScaleSearchResult:
    """Grid-search the exponent ``alpha`` of ``s = s_X ** alpha``.

    Ties resolve to the smaller ``alpha``.
    """
    w = as_tensor(w, name="w")
    if calib.in_features != w.shape[1]:
        raise DimensionError(
            f"calibration has {calib.in_features} channels, layer has {w.shape[1]} inputs"
        )
    x = calib.activations
    ref = matmul(w, x)
    mag = calib.per_channel_mag

    if not np.any(mag > 0):
        s = np.ones(w.shape[1], dtype=DTYPE)
        loss = _scaled_loss(w, x, ref, s, cfg)
        log.warning("all calibration magnitudes are zero; scaling disabled")
        return ScaleSearchResult(0.0, s, loss, loss, losses=[loss], warning="zero activations: alpha forced to 0")

    best_alpha, best_s, best_loss = None, None, np.inf
    losses = []
    for alpha in alpha_grid(cfg.alpha_grid_size):
        s = scales_for_alpha(mag, alpha)
        loss = _scaled_loss(w, x, ref, s, cfg)
        losses.append(loss)
        if loss < best_loss:
            best_alpha, best_s, best_loss = alpha, s, loss
    return ScaleSearchResult(best_alpha, best_s, best_loss, losses[0], losses=losses)


def clip_errors(w_scaled, x_scaled, cfg: QuantConfig, ratios) -> np.ndarray:
    """Activation-weighted squared error ``||(w_hat - w) X^T||^2`` per row and ratio.

    Returns a ``[len(ratios), out]`` float64 array.
    """
    w = as_tensor(w_scaled, name="w")
    x = np.asarray(x_scaled, dtype=np.float64)
    out, n = w.shape
    gram = x.T @ x if x.shape[0] > n else None
    w64 = w.astype(np.float64)
    errs = np.empty((len(ratios), out))
    for k, r in enumerate(ratios):
        d = fake_quantize(w, cfg, np.full(out, r, dtype=DTYPE)).astype(np.float64) - w64
        if gram is not None:
            errs[k] = np.einsum("oi,oi->o", d @ gram, d)
        else:
            e = d @ x.T
            errs[k] = np.einsum("ot,ot->o", e, e)
    return errs


def search_clip(w_scaled, x_scaled, cfg: QuantConfig) -> np.ndarray:
    """Per-row max-shrink ratio minimizing the activation-weighted weight error.

    A ratio of 1.0 is always a candidate and wins ties, then grid order.
    """
    ratios = list(cfg.clip_grid)
    if 1.0 not in ratios:
        ratios.insert(0, 1.0)
    ratios.sort(reverse=True)
    errs = clip_errors(w_scaled, x_scaled, cfg, ratios)
    return np.asarray(ratios, dtype=DTYPE)[np.argmin(errs, axis=0)]


def quantize_layer_awq(w, calib: CalibStats, cfg: QuantConfig) -> QuantizedLayer:
    """Scale, clip, then quantize one layer."""
    w = as_tensor(w, name="w")
    res = search_scales(w, calib, cfg)
    x = calib.activations
    s = res.s
    w_s = w * s
    x_s = x / np.maximum(s, DTYPE(EPS))
    clip = search_clip(w_s, x_s, cfg)
    gq = quantize_group_rtn(w_s, cfg, clip)
    loss = frobenius_norm(matmul(dequantize(gq), x_s) - matmul(w, x))
    if loss > res.loss:
        # float32 replay disagreed with the float64 clip objective; keep unclipped
        clip = np.ones(w.shape[0], dtype=DTYPE)
        gq = quantize_group_rtn(w_s, cfg)
        loss = res.loss
    return QuantizedLayer(gq=gq, s=s, cfg=cfg, alpha=res.alpha, loss=loss, rtn_loss=res.rtn_loss, clip_ratios=clip)


def quantize_layer_rtn(w, cfg: QuantConfig, x=None) -> QuantizedLayer:
    """Plain round-to-nearest with unit scales; losses filled in when ``x`` is given."""
    w = as_tensor(w, name="w")
    gq = quantize_group_rtn(w, cfg)
    s = np.ones(w.shape[1], dtype=DTYPE)
    loss = 0.0
    if x is not None:
        x = as_tensor(x, name="x")
        loss = frobenius_norm(matmul(dequantize(gq), x) - matmul(w, x))
    return QuantizedLayer(gq=gq, s=s, cfg=cfg, alpha=0.0, loss=loss, rtn_loss=loss, clip_ratios=np.ones(w.shape[0], dtype=DTYPE))
