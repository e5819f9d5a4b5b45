"""Reference-based quality metrics: PSNR, SSIM, ERGAS and SAM.

All metrics are evaluated in float64 on (h, w, b) arrays.
"""

from __future__ import annotations

import numpy as np
from scipy.signal import correlate2d

from .core import DimensionError

PSNR_CAP = 100.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


def _pair(ref, est):
    ref = np.ascontiguousarray(ref, dtype=np.float64)
    est = np.ascontiguousarray(est, dtype=np.float64)
    if ref.shape != est.shape:
        raise DimensionError(f"shape mismatch: {ref.shape} vs {est.shape}")
    if ref.ndim == 2:
        ref, est = ref[:, :, None], est[:, :, None]
    return ref, est


def psnr(ref, est) -> float:
    """Global PSNR with peak 1.0, capped at 100 dB for (near) identical inputs."""
    ref, est = _pair(ref, est)
    mse = np.mean((ref - est) ** 2)
    if mse < 1e-10:
        return PSNR_CAP
    return float(10.0 * np.log10(1.0 / mse))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    g /= g.sum()
    return np.outer(g, g)


def _ssim_band(x: np.ndarray, y: np.ndarray, win: np.ndarray) -> float:
    def filt(a):
        return correlate2d(a, win, mode="valid")

    mu_x, mu_y = filt(x), filt(y)
    sxx = filt(x * x) - mu_x ** 2
    syy = filt(y * y) - mu_y ** 2
    sxy = filt(x * y) - mu_x * mu_y
    num = (2 * mu_x * mu_y + SSIM_C1) * (2 * sxy + SSIM_C2)
    den = (mu_x ** 2 + mu_y ** 2 + SSIM_C1) * (sxx + syy + SSIM_C2)
    return float(np.mean(num / den))


def ssim(ref, est) -> float:
    """Band-averaged single-scale SSIM (11x11 Gaussian window, valid region)."""
    ref, est = _pair(ref, est)
    if min(ref.shape[:2]) < SSIM_WINDOW:
        raise DimensionError(f"SSIM needs spatial dims >= {SSIM_WINDOW}, got {ref.shape[:2]}")
    win = gaussian_window()
    return float(np.mean([_ssim_band(ref[:, :, i], est[:, :, i], win) for i in range(ref.shape[2])]))


def ergas(ref, est, s: float = 4) -> float:
    ref, est = _pair(ref, est)
    b = ref.shape[2]
    mu = ref.reshape(-1, b).mean(axis=0)
    zero = np.flatnonzero(mu == 0)
    if zero.size:
        raise ValueError(f"ERGAS undefined: reference band {int(zero[0])} has zero mean")
    rmse = np.sqrt(((ref - est) ** 2).reshape(-1, b).mean(axis=0))
    return float(100.0 / s * np.sqrt(np.mean((rmse / mu) ** 2)))


def sam(ref, est, return_skipped: bool = False):
    """Mean spectral angle in degrees over pixels where both spectra are non-degenerate."""
    ref, est = _pair(ref, est)
    b = ref.shape[2]
    if b < 2:
        raise DimensionError("SAM needs at least 2 bands")
    x = ref.reshape(-1, b)
    y = est.reshape(-1, b)
    nx = np.linalg.norm(x, axis=1)
    ny = np.linalg.norm(y, axis=1)
    ok = (nx > 1e-8) & (ny > 1e-8)
    skipped = int(ok.size - ok.sum())
    if ok.any():
        cos = np.sum(x[ok] * y[ok], axis=1) / (nx[ok] * ny[ok])
        angle = float(np.degrees(np.arccos(np.clip(cos, -1.0, 1.0))).mean())
    else:
        angle = 0.0
    return (angle, skipped) if return_skipped else angle


def evaluate(ref, est, s: float = 4) -> dict:
    """All four metrics plus the SAM skip count, as a JSON-ready dict."""
    angle, skipped = sam(ref, est, return_skipped=True)
    return {
        "psnr": psnr(ref, est),
        "ssim": ssim(ref, est),
        "ergas": ergas(ref, est, s),
        "sam": angle,
        "skipped_pixels": skipped,
    }
