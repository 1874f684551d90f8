"""Seeded synthetic layers with LLM-like activation outliers."""

from __future__ import annotations

import numpy as np

from awqkit.tensor import DTYPE


def salient_layer(out_features: int = 256, in_features: int = 2048, n_salient: int = 2,
                  boost: float = 100.0, tokens: int = 128, seed: int = 0):
    """Layer whose weight columns all have unit L2 norm, so weight magnitude
    carries no saliency signal, while ``n_salient`` activation channels are
    ``boost`` times larger than the rest.

    Returns ``(w, x, salient_ids)``.
    """
    rng = np.random.default_rng(seed)
    w = rng.standard_normal((out_features, in_features))
    w /= np.linalg.norm(w, axis=0, keepdims=True)
    mag = np.ones(in_features)
    sal = np.sort(rng.choice(in_features, size=n_salient, replace=False))
    mag[sal] = boost
    x = rng.standard_normal((tokens, in_features)) * mag
    return w.astype(DTYPE), x.astype(DTYPE), sal


def opt_like_layer(size: int = 512, tokens: int = 256, n_salient: int = 5, salient_gain: float = 20.0,
                   df: float = 3.0, seed: int = 0):
    """Gaussian square weight with Student-t activations and log-normal channel
    magnitudes; ``n_salient`` channels get an extra ``salient_gain``.

    Returns ``(w, x)``.
    """
    rng = np.random.default_rng(seed)
    w = rng.standard_normal((size, size))
    mag = np.exp(rng.normal(0.0, 0.5, size))
    mag[rng.choice(size, size=n_salient, replace=False)] *= salient_gain
    x = rng.standard_t(df, (tokens, size)) * mag
    return w.astype(DTYPE), x.astype(DTYPE)
