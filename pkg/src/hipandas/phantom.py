"""Deterministic textured HRHS phantom used for desk-scale experiments."""

from __future__ import annotations

import numpy as np
from scipy.ndimage import gaussian_filter

# Fine texture is kept faint; the piecewise-constant blocks carry most of the
# edges that the PAN image can hand to the super-resolution step.
TEXTURE_AMPLITUDE = 0.15
BLOCK_AMPLITUDE = 2.5


def make_phantom(height: int, width: int, bands: int, rank: int, seed: int) -> np.ndarray:
    """Rank-``rank`` spectral mixture of smooth gradients plus texture.

    Abundance maps are positive and sum to one at each pixel, endmember
    spectra lie in [0.05, 0.95], so every voxel is a convex combination of
    values inside [0, 1] and the mode-3 rank is exactly ``rank``.
    """
    if not 1 <= rank < bands:
        raise ValueError(f"rank must satisfy 1 <= rank < bands, got rank={rank}, bands={bands}")
    rng = np.random.default_rng(seed)
    yy, xx = np.meshgrid(np.linspace(0, 1, height), np.linspace(0, 1, width), indexing="ij")

    # Texture shared by all abundances (band-correlated) plus a per-map part.
    shared = gaussian_filter(rng.standard_normal((height, width)), 1.0, mode="wrap")
    shared /= shared.std()
    logits = np.empty((rank, height, width))
    for k in range(rank):
        a, b, c = rng.uniform(-2, 2, size=3)
        fx, fy = rng.uniform(1, 4, size=2)
        phase = rng.uniform(0, 2 * np.pi)
        smooth = a * xx + b * yy + c * xx * yy + np.sin(2 * np.pi * (fx * xx + fy * yy) + phase)
        own = gaussian_filter(rng.standard_normal((height, width)), 0.8, mode="wrap")
        own /= own.std()
        # Sharp-edged blocks give the PAN image structure worth transferring.
        blocks = np.kron(rng.standard_normal((height // 8 + 1, width // 8 + 1)), np.ones((8, 8)))
        blocks = blocks[:height, :width]
        weight = rng.uniform(0.6, 1.0)
        logits[k] = smooth + weight * TEXTURE_AMPLITUDE * (0.8 * shared * rng.choice([-1, 1]) + 0.6 * own)
        logits[k] += BLOCK_AMPLITUDE * blocks
    abundances = np.exp(logits - logits.max(axis=0))
    abundances /= abundances.sum(axis=0)

    wl = np.linspace(0, 1, bands)
    spectra = np.empty((rank, bands))
    for k in range(rank):
        centre, width_ = rng.uniform(0, 1), rng.uniform(0.2, 0.6)
        base = rng.uniform(0.15, 0.4)
        spectra[k] = base + rng.uniform(0.3, 0.5) * np.exp(-((wl - centre) ** 2) / (2 * width_ ** 2))
    spectra = np.clip(spectra, 0.05, 0.95)

    cube = np.einsum("khw,kb->hwb", abundances, spectra)
    return np.clip(cube, 0.0, 1.0).astype(np.float32)
