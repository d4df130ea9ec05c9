"""PSNR and Monte-Carlo dropout uncertainty maps."""

from __future__ import annotations

import math

import numpy as np

from .models import Model, predict

PSNR_CAP_DB = 99.0


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    """PSNR over all channels jointly; zero MSE returns the 99 dB cap."""
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"psnr: shape mismatch {a.shape} vs {b.shape}")
    if peak <= 0:
        raise ValueError(f"psnr: peak must be positive, got {peak}")
    d = (a.astype(np.float64) - b.astype(np.float64)).ravel()
    mse = float(np.dot(d, d)) / d.size
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * math.log10(peak * peak / mse))


def uncertainty_map(model: Model, y: np.ndarray, passes: int = 50,
                    rng: np.random.Generator = None) -> np.ndarray:
    """Per-pixel unbiased variance over stochastic forward passes, channel-averaged.

    Returns an (N, 1, H, W) float32 map at the output resolution.
    """
    if passes < 2:
        raise ValueError(f"need at least 2 passes, got {passes}")
    if rng is None:
        rng = np.random.default_rng(0)
    first = predict(model, y, rng).astype(np.float64)
    # Welford accumulation keeps memory at two output-sized buffers
    mean = first
    m2 = np.zeros_like(first)
    for k in range(2, passes + 1):
        out = predict(model, y, rng).astype(np.float64)
        delta = out - mean
        mean = mean + delta / k
        m2 += delta * (out - mean)
    var = m2 / (passes - 1)
    return var.mean(axis=1, keepdims=True).astype(np.float32)


def render_variance(vmap: np.ndarray) -> np.ndarray:
    """Min-max normalize and invert: high variance renders black, low renders white."""
    v = np.asarray(vmap, dtype=np.float64)
    if (v < 0).any():
        raise ValueError("variance map must be non-negative")
    lo, hi = v.min(), v.max()
    if hi == lo:
        return np.ones_like(v, dtype=np.float32)
    return (1.0 - (v - lo) / (hi - lo)).astype(np.float32)
