"""Saliency analyses: mixed-precision channel protection and salient scaling.

Both analyses work on a single linear layer ``y = x @ w.T`` with a cached
calibration batch ``x``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from awqkit.quant import QuantConfig, fake_quantize, group_scales, quant_error
from awqkit.tensor import DTYPE, DimensionError, as_tensor, frobenius_norm, matmul

CRITERIA = ("activation", "weight", "random", "none")


@dataclass(frozen=True, eq=False)
class CalibStats:
    """Per-input-channel mean activation magnitude plus the raw batch."""

    per_channel_mag: np.ndarray
    activations: np.ndarray
    token_count: int

    @property
    def in_features(self) -> int:
        return int(self.per_channel_mag.shape[0])


def collect_calib_stats(x) -> CalibStats:
    """Mean of ``|x|`` over tokens for each input channel."""
    x = as_tensor(x, name="calibration activations")
    if x.shape[0] == 0:
        raise ValueError("calibration set is empty (0 tokens)")
    mag = np.mean(np.abs(x), axis=0, dtype=np.float64).astype(DTYPE)
    return CalibStats(per_channel_mag=mag, activations=x, token_count=int(x.shape[0]))


def n_protected(fraction: float, in_features: int) -> int:
    # round half up; Python's round() is banker's rounding
    return int(np.floor(fraction * in_features + 0.5))


def select_channels(w, x, criterion: str, count: int, seed: int = 0) -> np.ndarray:
    """Pick ``count`` input channels to protect, most salient first."""
    n = w.shape[1]
    if criterion == "activation":
        score = collect_calib_stats(x).per_channel_mag.astype(np.float64)
    elif criterion == "weight":
        score = np.linalg.norm(np.asarray(w, dtype=np.float64), axis=0)
    elif criterion == "random":
        return np.sort(np.random.default_rng(seed).choice(n, size=count, replace=False))
    elif criterion == "none":
        return np.zeros(0, dtype=np.int64)
    else:
        raise ValueError(f"unknown criterion {criterion!r}; expected one of {CRITERIA}")
    # stable sort on -score: ties go to the lower channel index
    return np.argsort(-score, kind="stable")[:count]


@dataclass
class SaliencyReport:
    criterion: str
    protected_fraction: float
    protected_channel_ids: list[int]
    layer_error_protected: float
    layer_error_rtn: float
    seed: int | None = None
    degenerate: bool = False

    def to_record(self) -> dict:
        return asdict(self)


def mixed_precision_eval(w, x, cfg: QuantConfig, criterion: str, fraction: float, seed: int = 0) -> SaliencyReport:
    """Quantize ``w`` but keep a fraction of its input channels at full precision.

    Group steps are derived from the whole group, protected channels included;
    the protected columns are then restored to their original values.
    """
    w = as_tensor(w, name="w")
    x = as_tensor(x, name="x")
    if w.shape[1] != x.shape[1]:
        raise DimensionError(f"w{w.shape} and x{x.shape} disagree on in_features")
    if not 0.0 <= fraction <= 1.0:
        raise ValueError(f"fraction must be in [0, 1], got {fraction}")
    k = n_protected(fraction, w.shape[1]) if criterion != "none" else 0
    ids = select_channels(w, x, criterion, k, seed)
    w_hat = fake_quantize(w, cfg)
    w_hat[:, ids] = w[:, ids]
    ref = matmul(w, x)
    err = frobenius_norm(matmul(w_hat, x) - ref)
    return SaliencyReport(
        criterion=criterion,
        protected_fraction=float(fraction),
        protected_channel_ids=[int(i) for i in ids],
        layer_error_protected=err,
        layer_error_rtn=quant_error(w, x, cfg),
        seed=seed if criterion == "random" else None,
        degenerate=(k == 0 and fraction > 0 and criterion != "none"),
    )


@dataclass
class ScaleStats:
    """Step-size statistics after multiplying salient channels by ``s``.

    ``frac_delta_changed`` counts every group of the layer;
    ``frac_delta_changed_salient`` only groups holding a salient channel.
    The two ratio means are taken over salient groups.
    """

    s: float
    frac_delta_changed: float
    frac_delta_changed_salient: float
    mean_delta_ratio: float
    mean_error_ratio: float
    layer_error: float
    layer_error_rtn: float
    salient_channel_ids: list[int] = field(default_factory=list)

    def to_record(self) -> dict:
        return asdict(self)


def scale_salient_stats(w, x, cfg: QuantConfig, salient_fraction: float = 0.01, s: float = 2.0) -> ScaleStats:
    """Scale the top activation channels of ``w`` by ``s`` and ``x`` by ``1/s``."""
    if s < 1:
        raise ValueError(f"s must be >= 1, got {s}")
    w = as_tensor(w, name="w")
    x = as_tensor(x, name="x")
    if w.shape[1] != x.shape[1]:
        raise DimensionError(f"w{w.shape} and x{x.shape} disagree on in_features")
    ids = select_channels(w, x, "activation", n_protected(salient_fraction, w.shape[1]))

    w_s = w.copy()
    w_s[:, ids] *= DTYPE(s)
    x_s = x.copy()
    x_s[:, ids] /= DTYPE(s)

    delta = group_scales(w, cfg)
    delta_s = group_scales(w_s, cfg)
    changed = delta_s != delta
    sal_groups = np.unique(ids // cfg.group_size)
    ratio = (delta_s[:, sal_groups] / delta[:, sal_groups]).astype(np.float64)

    if sal_groups.size:
        frac_sal = float(changed[:, sal_groups].mean())
        mean_ratio = float(ratio.mean())
        mean_err = float((ratio / s).mean())
    else:
        frac_sal, mean_ratio, mean_err = 0.0, 1.0, 1.0

    ref = matmul(w, x)
    return ScaleStats(
        s=float(s),
        frac_delta_changed=float(changed.mean()),
        frac_delta_changed_salient=frac_sal,
        mean_delta_ratio=mean_ratio,
        mean_error_ratio=mean_err,
        layer_error=frobenius_norm(matmul(fake_quantize(w_s, cfg), x_s) - ref),
        layer_error_rtn=quant_error(w, x, cfg),
        salient_channel_ids=[int(i) for i in ids],
    )
