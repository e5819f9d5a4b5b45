"""Detail maps and SVD energy curves for the detail low-rank prior."""

from __future__ import annotations

import numpy as np

from .core import DimensionError, singular_values
from .degrade import downsample, upsample


def detail_map(H: np.ndarray, s: int) -> np.ndarray:
    """High-frequency content lost by area downsampling then bicubic upsampling."""
    H = np.asarray(H, dtype=np.float32)
    return (H.astype(np.float64) - upsample(downsample(H, s), s).astype(np.float64)).astype(np.float32)


def noisy_detail_map(H: np.ndarray, N: np.ndarray, s: int) -> np.ndarray:
    """Detail map measured against a noisy LR observation ``N``."""
    H = np.asarray(H, dtype=np.float32)
    N = np.asarray(N, dtype=np.float32)
    if N.shape[0] * s != H.shape[0] or N.shape[1] * s != H.shape[1] or N.shape[2:] != H.shape[2:]:
        raise DimensionError(f"N {N.shape} is not H {H.shape} reduced by {s}")
    return (H.astype(np.float64) - upsample(N, s).astype(np.float64)).astype(np.float32)


def energy_curve(cube: np.ndarray) -> np.ndarray:
    """Cumulative normalized singular values E_k, k = 1..bands."""
    cube = np.asarray(cube)
    if cube.ndim != 3 or cube.shape[2] < 2:
        raise DimensionError("energy curve needs a cube with at least 2 bands")
    lam = singular_values(cube)
    total = lam.sum()
    if total <= 0:
        raise ValueError("energy curve undefined for an all-zero map")
    E = np.ones(cube.shape[2])
    E[: lam.size] = np.cumsum(lam) / total
    E[-1] = 1.0
    return E
