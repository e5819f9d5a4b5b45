"""Forward observation model: spatial degradation, PAN synthesis and noise.

Noise intensities are given on the 0-255 scale and divided by 255 before
being applied to unit-scaled data.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from functools import lru_cache

import numpy as np

from .core import DimensionError

GAUSSIAN_KINDS = ("gaussian_iid", "gaussian_noniid")
NOISE_KINDS = GAUSSIAN_KINDS + ("mixture",)
STRIPE_AMPLITUDE = 0.25
# Non-Gaussian bands of a mixture are dealt out in this order.
MIXTURE_ORDER = ("impulse", "stripe", "deadline")


@dataclass(frozen=True)
class NoiseSpec:
    kind: str = "gaussian_iid"
    sigma: float = 0.0
    sigma_range: tuple[float, float] = (10.0, 50.0)
    p: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in NOISE_KINDS:
            raise ValueError(f"unknown noise kind {self.kind!r}; expected one of {NOISE_KINDS}")
        lo, hi = self.sigma_range
        object.__setattr__(self, "sigma_range", (float(lo), float(hi)))
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")
        if not 0 <= lo <= hi:
            raise ValueError(f"sigma_range must satisfy 0 <= lo <= hi, got {self.sigma_range}")
        if not 0 <= self.p <= 1:
            raise ValueError(f"p must lie in [0, 1], got {self.p}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["sigma_range"] = list(self.sigma_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseSpec":
        d = dict(d)
        if "sigma_range" in d:
            d["sigma_range"] = tuple(d["sigma_range"])
        return cls(**d)

    @property
    def label(self) -> str:
        if self.kind == "gaussian_iid":
            return f"iid_sigma{self.sigma:g}"
        lo, hi = self.sigma_range
        if self.kind == "gaussian_noniid":
            return f"noniid_sigma{lo:g}-{hi:g}"
        return f"mixture_p{self.p:g}"


@dataclass(frozen=True)
class SpectralResponse:
    """Nonnegative band weights summing to one; P = sum_i w_i * H[..., i]."""

    weights: np.ndarray = field(default_factory=lambda: np.ones(1))

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64).ravel()
        if w.size < 1 or np.any(w < 0) or not np.all(np.isfinite(w)):
            raise ValueError("spectral response weights must be finite and nonnegative")
        if abs(w.sum() - 1.0) > 1e-6:
            raise ValueError(f"spectral response weights must sum to 1, got {w.sum():.8f}")
        object.__setattr__(self, "weights", w)

    @classmethod
    def uniform(cls, bands: int) -> "SpectralResponse":
        return cls(np.full(bands, 1.0 / bands))

    @classmethod
    def normalized(cls, weights) -> "SpectralResponse":
        w = np.asarray(weights, dtype=np.float64)
        return cls(w / w.sum())

    @property
    def bands(self) -> int:
        return self.weights.size


def _check_ratio(s) -> int:
    if int(s) != s or s < 2:
        raise ValueError(f"ratio must be an integer >= 2, got {s}")
    return int(s)


def downsample(cube: np.ndarray, s: int) -> np.ndarray:
    """Mean over non-overlapping s x s blocks.  Accepts (h, w) or (h, w, b)."""
    s = _check_ratio(s)
    cube = np.asarray(cube)
    h, w = cube.shape[:2]
    if h % s or w % s:
        raise DimensionError(f"spatial dims {h}x{w} are not divisible by {s}")
    blocks = cube.reshape(h // s, s, w // s, s, *cube.shape[2:])
    return blocks.mean(axis=(1, 3), dtype=np.float64).astype(cube.dtype, copy=False)


def cubic_weight(t: np.ndarray, a: float = -0.5) -> np.ndarray:
    """Keys cubic convolution kernel; a = -0.5 is Catmull-Rom."""
    t = np.abs(t)
    w = np.zeros_like(t)
    near = t <= 1
    far = (t > 1) & (t < 2)
    w[near] = (a + 2) * t[near] ** 3 - (a + 3) * t[near] ** 2 + 1
    w[far] = a * t[far] ** 3 - 5 * a * t[far] ** 2 + 8 * a * t[far] - 4 * a
    return w


@lru_cache(maxsize=64)
def bicubic_matrix(n_in: int, s: int) -> np.ndarray:
    """(n_in*s, n_in) interpolation matrix along one axis.

    Pixel centres are aligned (half-pixel convention) and out-of-range taps are
    clamped to the edge sample.
    """
    n_out = n_in * s
    src = (np.arange(n_out) + 0.5) / s - 0.5
    base = np.floor(src).astype(int)
    M = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    for offset in (-1, 0, 1, 2):
        idx = base + offset
        w = cubic_weight(src - idx)
        np.add.at(M, (rows, np.clip(idx, 0, n_in - 1)), w)
    M.setflags(write=False)
    return M


def upsample(cube: np.ndarray, s: int) -> np.ndarray:
    """Separable Catmull-Rom bicubic upsampling by ``s`` with edge replication."""
    s = _check_ratio(s)
    cube = np.asarray(cube)
    h, w = cube.shape[:2]
    Mh = bicubic_matrix(h, s)
    Mw = bicubic_matrix(w, s)
    x = cube.astype(np.float64)
    if x.ndim == 2:
        out = Mh @ x @ Mw.T
    else:
        out = np.einsum("Hh,hwb,Ww->HWb", Mh, x, Mw)
    return out.astype(cube.dtype if cube.dtype.kind == "f" else np.float64, copy=False)


def synthesize_pan(H: np.ndarray, phi: SpectralResponse | None = None) -> np.ndarray:
    """PAN image as a weighted band sum; uniform weights by default."""
    H = np.asarray(H)
    if phi is None:
        phi = SpectralResponse.uniform(H.shape[2])
    if phi.bands != H.shape[2]:
        raise DimensionError(f"spectral response has {phi.bands} weights but cube has {H.shape[2]} bands")
    return np.tensordot(H.astype(np.float64), phi.weights, axes=([2], [0])).astype(np.float32)


def add_gaussian_noise(cube: np.ndarray, spec: NoiseSpec) -> np.ndarray:
    cube = np.asarray(cube, dtype=np.float32)
    if spec.kind not in GAUSSIAN_KINDS:
        raise ValueError(f"add_gaussian_noise needs a Gaussian spec, got {spec.kind!r}")
    rng = np.random.default_rng(spec.seed)
    bands = cube.shape[2]
    if spec.kind == "gaussian_iid":
        sigmas = np.full(bands, spec.sigma)
    else:
        sigmas = rng.uniform(*spec.sigma_range, size=bands)
    if not np.any(sigmas):
        return cube.copy()
    noise = rng.standard_normal(cube.shape) * (sigmas / 255.0)
    return (cube + noise).astype(np.float32)


def mixture_band_assignment(bands: int, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Split bands into a Gaussian subset (ceil(2b/3)) and round-robin sparse kinds."""
    perm = rng.permutation(bands)
    n_gauss = math.ceil(2 * bands / 3)
    rest = perm[n_gauss:]
    out = {"gaussian": np.sort(perm[:n_gauss])}
    for j, kind in enumerate(MIXTURE_ORDER):
        out[kind] = np.sort(rest[j::3])
    return out


def add_mixture_noise(cube: np.ndarray, spec: NoiseSpec) -> np.ndarray:
    cube = np.asarray(cube, dtype=np.float32)
    if spec.kind != "mixture":
        raise ValueError(f"add_mixture_noise needs a mixture spec, got {spec.kind!r}")
    h, w, bands = cube.shape
    if bands < 3:
        raise DimensionError("mixture noise needs at least 3 bands")
    rng = np.random.default_rng(spec.seed)
    groups = mixture_band_assignment(bands, rng)
    out = cube.astype(np.float64)

    for band in groups["gaussian"]:
        sigma = rng.uniform(*spec.sigma_range) / 255.0
        out[:, :, band] += sigma * rng.standard_normal((h, w))

    n_pix = int(round(spec.p * h * w))
    n_cols = int(round(spec.p * w))
    for band in groups["impulse"]:
        idx = rng.choice(h * w, size=n_pix, replace=False)
        flat = out[:, :, band].reshape(-1)
        flat[idx] = rng.integers(0, 2, size=n_pix).astype(np.float64)
        out[:, :, band] = flat.reshape(h, w)
    for band in groups["stripe"]:
        cols = rng.choice(w, size=n_cols, replace=False)
        out[:, cols, band] += rng.uniform(-STRIPE_AMPLITUDE, STRIPE_AMPLITUDE, size=n_cols)
    for band in groups["deadline"]:
        cols = rng.choice(w, size=n_cols, replace=False)
        out[:, cols, band] = 0.0
    return out.astype(np.float32)


def add_noise(cube: np.ndarray, spec: NoiseSpec) -> np.ndarray:
    if spec.kind == "mixture":
        return add_mixture_noise(cube, spec)
    return add_gaussian_noise(cube, spec)


def simulate_observation(H: np.ndarray, s: int, phi: SpectralResponse | None, spec: NoiseSpec):
    """Return (N, P, Q): noisy LR cube, HR PAN and LR PAN."""
    H = np.asarray(H, dtype=np.float32)
    L = downsample(H, s)
    N = add_noise(L, spec)
    P = synthesize_pan(H, phi)
    Q = downsample(P, s)
    return N, P, Q
