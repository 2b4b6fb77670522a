"""PSNR and single-scale SSIM on ``[0, peak]`` images.

SSIM uses the usual constants: 11x11 Gaussian window with sigma 1.5,
``C1 = (0.01 peak)^2``, ``C2 = (0.03 peak)^2``. Only windows lying fully
inside the image are scored, and the map is averaged over every channel
and batch entry.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ContractError

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5


@dataclass(frozen=True)
class QualityScore:
    psnr: float
    ssim: float


def _as4(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        return x[None, None]
    if x.ndim == 3:
        return x[None]
    if x.ndim != 4:
        raise ContractError(f"expected an image or Tensor4, got shape {x.shape}")
    return x


def psnr(a, b, peak=1.0):
    """Peak signal-to-noise ratio in dB; identical inputs give ``inf``."""
    a, b = _as4(a), _as4(b)
    if a.shape != b.shape:
        raise ContractError(f"psnr shapes differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return float("inf")
    return float(10.0 * np.log10(peak * peak / mse))


def gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    r = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(r * r) / (2 * sigma * sigma))
    return g / g.sum()


def _filter_valid(x, g):
    # separable valid-mode weighted average over the last two axes
    k = g.size
    x = sliding_window_view(x, k, axis=-1) @ g
    x = np.moveaxis(sliding_window_view(x, k, axis=-2), -1, -2)
    return np.einsum("...kw,k->...w", x, g)


def ssim_map(a, b, peak=1.0):
    a, b = _as4(a), _as4(b)
    if a.shape != b.shape:
        raise ContractError(f"ssim shapes differ: {a.shape} vs {b.shape}")
    if min(a.shape[2:]) < SSIM_WINDOW:
        raise ContractError(f"image {a.shape[2:]} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    g = gaussian_window()
    c1 = (0.01 * peak) ** 2
    c2 = (0.03 * peak) ** 2
    mu_a = _filter_valid(a, g)
    mu_b = _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a * mu_a
    var_b = _filter_valid(b * b, g) - mu_b * mu_b
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return num / den


def ssim(a, b, peak=1.0):
    """Mean SSIM over channels and valid window positions."""
    return float(np.mean(ssim_map(a, b, peak)))


def score(pred, target, peak=1.0):
    return QualityScore(psnr(pred, target, peak), ssim(pred, target, peak))
