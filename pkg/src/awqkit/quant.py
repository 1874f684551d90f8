"""Group-wise round-to-nearest weight quantization."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from awqkit.tensor import DTYPE, DimensionError, as_tensor, frobenius_norm, matmul

EPS = 1e-8

SYMMETRIC = "symmetric"
ASYMMETRIC = "asymmetric"

DEFAULT_CLIP_GRID = tuple(round(1.0 - 0.05 * i, 2) for i in range(11))


@dataclass(frozen=True)
class QuantConfig:
    """Quantizer hyperparameters.

    ``bits`` above 8 is accepted so tests can run a near-lossless quantizer
    through the same code path.
    """

    bits: int = 4
    group_size: int = 128
    mode: str = SYMMETRIC
    clip_grid: tuple[float, ...] = DEFAULT_CLIP_GRID
    alpha_grid_size: int = 20

    def __post_init__(self):
        if not 2 <= self.bits <= 16:
            raise ValueError(f"bits must be in [2, 16], got {self.bits}")
        if self.group_size < 1:
            raise ValueError(f"group_size must be >= 1, got {self.group_size}")
        if self.mode not in (SYMMETRIC, ASYMMETRIC):
            raise ValueError(f"mode must be symmetric or asymmetric, got {self.mode!r}")
        object.__setattr__(self, "clip_grid", tuple(float(r) for r in self.clip_grid))
        if not self.clip_grid:
            raise ValueError("clip_grid must not be empty")
        for r in self.clip_grid:
            if not 0.0 < r <= 1.0:
                raise ValueError(f"clip ratio {r} outside (0, 1]")
        if self.alpha_grid_size < 1:
            raise ValueError(f"alpha_grid_size must be >= 1, got {self.alpha_grid_size}")

    @property
    def qmin(self) -> int:
        return -(1 << (self.bits - 1)) if self.mode == SYMMETRIC else 0

    @property
    def qmax(self) -> int:
        return (1 << (self.bits - 1)) - 1 if self.mode == SYMMETRIC else (1 << self.bits) - 1

    def n_groups(self, in_features: int) -> int:
        return -(-in_features // self.group_size)


@dataclass(frozen=True, eq=False)
class GroupQuant:
    """Integer codes plus per-group scales (and zero points when asymmetric).

    ``qvals`` is ``[out, in]``; ``scales`` and ``zeros`` are ``[out, n_groups]``.
    """

    qvals: np.ndarray
    scales: np.ndarray
    zeros: np.ndarray | None
    group_size: int
    bits: int
    mode: str = SYMMETRIC

    @property
    def shape(self) -> tuple[int, int]:
        return tuple(self.qvals.shape)

    def equals(self, other: "GroupQuant") -> bool:
        """Bit-level equality of codes, scales and zero points."""
        same_zeros = (self.zeros is None and other.zeros is None) or (
            self.zeros is not None
            and other.zeros is not None
            and np.array_equal(self.zeros, other.zeros)
        )
        return (
            self.group_size == other.group_size
            and self.bits == other.bits
            and self.mode == other.mode
            and np.array_equal(self.qvals, other.qvals)
            and self.scales.tobytes() == other.scales.tobytes()
            and same_zeros
        )


def round_half_away(v: np.ndarray) -> np.ndarray:
    """Round to nearest integer, ties away from zero."""
    a = np.abs(v)
    f = np.floor(a)
    # a - f is exact, so the tie test never suffers from a + 0.5 rounding up
    r = f + (a - f >= 0.5)
    return np.copysign(r, v)


def group_starts(in_features: int, group_size: int) -> np.ndarray:
    return np.arange(0, in_features, group_size)


def expand_groups(per_group: np.ndarray, group_size: int, in_features: int) -> np.ndarray:
    """Broadcast ``[out, n_groups]`` values to ``[out, in_features]``."""
    return np.repeat(per_group, group_size, axis=1)[:, :in_features]


def _group_params(w: np.ndarray, cfg: QuantConfig, clip_ratios) -> tuple[np.ndarray, np.ndarray | None]:
    starts = group_starts(w.shape[1], cfg.group_size)
    ratios = None
    if clip_ratios is not None:
        ratios = np.asarray(clip_ratios, dtype=DTYPE).reshape(-1, 1)
        if ratios.shape[0] != w.shape[0]:
            raise DimensionError(
                f"clip_ratios has {ratios.shape[0]} entries for {w.shape[0]} rows"
            )
    if cfg.mode == SYMMETRIC:
        amax = np.maximum.reduceat(np.abs(w), starts, axis=1)
        if ratios is not None:
            amax = amax * ratios
        delta = amax / DTYPE(1 << (cfg.bits - 1))
        delta = np.where(amax == 0, DTYPE(1.0), np.maximum(delta, DTYPE(EPS)))
        return delta.astype(DTYPE), None

    wmax = np.maximum.reduceat(w, starts, axis=1)
    wmin = np.minimum.reduceat(w, starts, axis=1)
    if ratios is not None:
        wmax = wmax * ratios
        wmin = wmin * ratios
    rng = wmax - wmin
    delta = rng / DTYPE((1 << cfg.bits) - 1)
    # constant group: step equal to its magnitude reproduces it exactly
    flat = np.where(np.abs(wmax) > 0, np.abs(wmax), DTYPE(1.0))
    delta = np.where(rng == 0, flat, np.maximum(delta, DTYPE(EPS))).astype(DTYPE)
    zeros = (-round_half_away(wmin / delta)).astype(np.int32)
    return delta, zeros


def group_scales(w, cfg: QuantConfig, clip_ratios=None) -> np.ndarray:
    """Per-group quantization steps ``[out, n_groups]`` for ``w``."""
    return _group_params(as_tensor(w, name="w"), cfg, clip_ratios)[0]


def quantize_group_rtn(w, cfg: QuantConfig, clip_ratios=None) -> GroupQuant:
    """Quantize each row of ``w`` in groups of ``cfg.group_size`` input channels.

    Symmetric: ``delta = max|w_g| / 2**(bits-1)``, ``q = clamp(round(w / delta))``.
    Asymmetric: ``delta = (max - min) / (2**bits - 1)``, ``zero = -round(min / delta)``.
    ``clip_ratios`` optionally shrinks the per-row group extrema before the
    step is derived. An all-zero group gets ``delta = 1`` and zero codes.
    """
    w = as_tensor(w, name="w")
    delta, zeros = _group_params(w, cfg, clip_ratios)
    n = w.shape[1]
    d_full = expand_groups(delta, cfg.group_size, n)
    v = round_half_away(w / d_full)
    if zeros is not None:
        v = v + expand_groups(zeros, cfg.group_size, n)
    q = np.clip(v, cfg.qmin, cfg.qmax).astype(np.int32)
    return GroupQuant(
        qvals=q, scales=delta, zeros=zeros, group_size=cfg.group_size, bits=cfg.bits, mode=cfg.mode
    )


def dequantize(gq: GroupQuant) -> np.ndarray:
    """Reconstruct float32 weights: ``delta * q`` or ``delta * (q - zero)``."""
    n = gq.qvals.shape[1]
    q = gq.qvals.astype(DTYPE)
    if gq.zeros is not None:
        q = q - expand_groups(gq.zeros, gq.group_size, n).astype(DTYPE)
    return expand_groups(gq.scales, gq.group_size, n) * q


def fake_quantize(w, cfg: QuantConfig, clip_ratios=None) -> np.ndarray:
    return dequantize(quantize_group_rtn(w, cfg, clip_ratios))


def quant_error(w, x, cfg: QuantConfig) -> float:
    """Frobenius norm of the layer output change caused by RTN quantization."""
    w = as_tensor(w, name="w")
    x = as_tensor(x, name="x")
    return frobenius_norm(matmul(fake_quantize(w, cfg), x) - matmul(w, x))
