"""Dense float32 tensors and the reference linear algebra.

Tensors are plain 2-D ``numpy.ndarray`` objects of dtype float32. Weights are
``[out_features, in_features]``, activations ``[tokens, in_features]``, so a
per-input-channel scale is a per-column scale of the weight.
"""

from __future__ import annotations

import numpy as np

DTYPE = np.float32


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


def as_tensor(data, *, ndim: int | None = 2, name: str = "tensor") -> np.ndarray:
    """Convert ``data`` to a contiguous float32 array and validate it.

    Rejects non-finite values, reporting the flat index of the first one.
    """
    arr = np.ascontiguousarray(np.asarray(data, dtype=DTYPE))
    if ndim is not None and arr.ndim != ndim:
        raise DimensionError(f"{name} must be {ndim}-D, got shape {arr.shape}")
    bad = ~np.isfinite(arr)
    if bad.any():
        idx = int(np.flatnonzero(bad)[0])
        raise ValueError(f"{name} has non-finite value at flat index {idx}")
    return arr


def matmul(w: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Return ``y[t, o] = sum_i w[o, i] * x[t, i]`` as a ``[tokens, out]`` tensor."""
    w = np.asarray(w)
    x = np.asarray(x)
    if w.ndim != 2 or x.ndim != 2 or w.shape[1] != x.shape[1]:
        raise DimensionError(
            f"matmul shape mismatch: w{tuple(w.shape)} vs x{tuple(x.shape)}"
        )
    return np.matmul(x.astype(DTYPE, copy=False), w.astype(DTYPE, copy=False).T)


def frobenius_norm(a: np.ndarray) -> float:
    """Square root of the sum of squared entries, accumulated in float64."""
    a = np.asarray(a, dtype=np.float64)
    return float(np.sqrt(np.sum(a * a)))
