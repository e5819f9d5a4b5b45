"""GDN, GSRN and PRN networks.

GDN and GSRN share one architecture: a guided low-rank factorization network
whose output is ``V x3 U``.  The U-branch (two stride-2 convolutions, adaptive
pooling to an r x 1 grid, softmax over r) yields per-band convex weights; the
V-branch fuses HS and PAN features through HPF layers and ends in a sigmoid
tail producing r base images.  For GSRN the base images are shifted by -0.5
so the predicted detail map is signed.

Tensors inside this module are (n, channels, h, w).  The ``*_forward``
helpers take and return (h, w, b) numpy arrays.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .degrade import bicubic_matrix


@dataclass(frozen=True)
class ArchConfig:
    channels: int = 128
    rank_gdn: int = 3
    rank_gsrn: int = 12
    hpf_layers: int = 5
    prn_depth: int = 5
    kernel: int = 3
    leaky_slope: float = 0.2
    # False replaces the factorized head by a direct b-channel tail.
    lowrank: bool = True

    def __post_init__(self):
        for name in ("channels", "rank_gdn", "rank_gsrn", "hpf_layers", "prn_depth", "kernel"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.kernel % 2 == 0:
            raise ValueError("kernel size must be odd")

    def validate_bands(self, bands: int) -> None:
        if bands <= max(self.rank_gdn, self.rank_gsrn):
            raise ValueError(
                f"ranks ({self.rank_gdn}, {self.rank_gsrn}) must be smaller than the band count {bands}"
            )


# ----------------------------------------------------------------- tensor ops

def to_tensor(a: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    """(h, w[, b]) numpy array -> (1, b, h, w) tensor."""
    a = np.asarray(a)
    if a.ndim == 2:
        a = a[:, :, None]
    return torch.from_numpy(np.ascontiguousarray(np.moveaxis(a, 2, 0))).to(dtype).unsqueeze(0)


def to_array(t: torch.Tensor) -> np.ndarray:
    """(1, b, h, w) tensor -> (h, w, b) float32 array (2-D when b == 1)."""
    a = np.moveaxis(t.detach().cpu().numpy()[0], 0, 2).astype(np.float32)
    return a[:, :, 0] if a.shape[2] == 1 else a


def downsample_t(x: torch.Tensor, s: int) -> torch.Tensor:
    return F.avg_pool2d(x, s)


def upsample_t(x: torch.Tensor, s: int) -> torch.Tensor:
    """Differentiable counterpart of :func:`hipandas.degrade.upsample`."""
    h, w = x.shape[-2:]
    Mh = torch.from_numpy(bicubic_matrix(h, s).copy()).to(x.dtype)
    Mw = torch.from_numpy(bicubic_matrix(w, s).copy()).to(x.dtype)
    return Mh @ x @ Mw.T


def mode3_product_t(V: torch.Tensor, U: torch.Tensor) -> torch.Tensor:
    """V (n, r, h, w), U (n, b, r) -> (n, b, h, w)."""
    return torch.einsum("nrhw,nbr->nbhw", V, U)


# -------------------------------------------------------------------- modules

def _conv(cin: int, cout: int, k: int, stride: int = 1) -> nn.Conv2d:
    return nn.Conv2d(cin, cout, k, stride=stride, padding=k // 2)


class ConvUnit(nn.Sequential):
    def __init__(self, cin, cout, k, slope, stride=1):
        super().__init__(_conv(cin, cout, k, stride), nn.LeakyReLU(slope))


class HPFLayer(nn.Module):
    """Two parallel conv units over the concatenated HS and PAN features."""

    def __init__(self, channels: int, kernel: int = 3, slope: float = 0.2):
        super().__init__()
        self.conv_hs = ConvUnit(2 * channels, channels, kernel, slope)
        self.conv_pan = ConvUnit(2 * channels, channels, kernel, slope)

    def forward(self, hs_feat, pan_feat):
        if hs_feat.shape != pan_feat.shape:
            raise ValueError(f"HPF inputs differ in shape: {tuple(hs_feat.shape)} vs {tuple(pan_feat.shape)}")
        cat = torch.cat([hs_feat, pan_feat], dim=1)
        return self.conv_hs(cat), self.conv_pan(cat)


class FactorNet(nn.Module):
    """Guided low-rank factorization network.

    ``forward(hs, pan)`` returns ``(out, U, V)``; with ``lowrank=False`` the
    tail emits all bands directly and ``U`` is ``None``.
    """

    def __init__(self, bands: int, rank: int, cfg: ArchConfig, signed: bool = False):
        super().__init__()
        k, slope, C = cfg.kernel, cfg.leaky_slope, cfg.channels
        self.rank = rank
        self.signed = signed
        self.lowrank = cfg.lowrank
        if self.lowrank:
            self.u_branch = nn.Sequential(
                ConvUnit(bands, bands, k, slope, stride=2),
                ConvUnit(bands, bands, k, slope, stride=2),
            )
            self.pool = nn.AdaptiveAvgPool2d((rank, 1))
        self.head_hs = ConvUnit(bands, C, k, slope)
        self.head_pan = ConvUnit(1, C, k, slope)
        self.hpf = nn.ModuleList(HPFLayer(C, k, slope) for _ in range(cfg.hpf_layers))
        self.tail = _conv(C, rank if self.lowrank else bands, k)

    def coefficients(self, hs: torch.Tensor) -> torch.Tensor:
        """(n, b, r) coefficient matrices; each row is a softmax over r."""
        z = self.pool(self.u_branch(hs))[..., 0]
        return torch.softmax(z, dim=2)

    def base_images(self, hs: torch.Tensor, pan: torch.Tensor) -> torch.Tensor:
        f_hs, f_pan = self.head_hs(hs), self.head_pan(pan)
        for layer in self.hpf:
            f_hs, f_pan = layer(f_hs, f_pan)
        V = torch.sigmoid(self.tail(f_hs))
        return V - 0.5 if self.signed else V

    def forward(self, hs, pan):
        if hs.shape[-2:] != pan.shape[-2:]:
            raise ValueError(f"HS {tuple(hs.shape[-2:])} and PAN {tuple(pan.shape[-2:])} differ spatially")
        V = self.base_images(hs, pan)
        if not self.lowrank:
            return V, None, V
        U = self.coefficients(hs)
        return mode3_product_t(V, U), U, V


class GSRN(nn.Module):
    """Detail-injection super-resolution: up(L) + f(up(L), P)."""

    def __init__(self, bands: int, cfg: ArchConfig):
        super().__init__()
        self.f = FactorNet(bands, cfg.rank_gsrn, cfg, signed=True)

    def forward(self, lr, pan):
        s = pan.shape[-1] // lr.shape[-1]
        if s < 2 or pan.shape[-1] != s * lr.shape[-1] or pan.shape[-2] != s * lr.shape[-2]:
            raise ValueError(f"PAN {tuple(pan.shape[-2:])} is not an integer multiple of {tuple(lr.shape[-2:])}")
        up = upsample_t(lr, s)
        detail, _, _ = self.f(up, pan)
        return up + detail, detail


class PRN(nn.Module):
    """Stacked conv units mapping an HS cube to a PAN image; last layer linear."""

    def __init__(self, bands: int, cfg: ArchConfig):
        super().__init__()
        k, slope, C = cfg.kernel, cfg.leaky_slope, cfg.channels
        layers: list[nn.Module] = []
        cin = bands
        for _ in range(cfg.prn_depth - 1):
            layers.append(ConvUnit(cin, C, k, slope))
            cin = C
        layers.append(_conv(cin, 1, k))
        self.body = nn.Sequential(*layers)

    def forward(self, cube):
        return self.body(cube)


class ModelState(nn.Module):
    """Learnable parameters of the three networks plus their configuration."""

    def __init__(self, cfg: ArchConfig, bands: int):
        super().__init__()
        self.cfg = cfg
        self.bands = bands
        self.gdn = FactorNet(bands, cfg.rank_gdn, cfg)
        self.gsrn = GSRN(bands, cfg)
        self.prn = PRN(bands, cfg)


def init_state(cfg: ArchConfig, bands: int, seed: int) -> ModelState:
    """Build a ModelState with fan-in scaled uniform kernels and zero biases."""
    if cfg.lowrank:
        cfg.validate_bands(bands)
    state = ModelState(cfg, bands)
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for name, p in state.named_parameters():
            if name.endswith("bias"):
                p.zero_()
            else:
                fan_in = p[0].numel()
                bound = math.sqrt(6.0 / fan_in)
                p.copy_(torch.rand(p.shape, generator=gen) * (2 * bound) - bound)
    return state


def parameter_count(cfg: ArchConfig, bands: int) -> int:
    """Closed-form number of learnable scalars in a ModelState."""
    k2, C, b = cfg.kernel ** 2, cfg.channels, bands

    def conv(cin, cout):
        return cin * cout * k2 + cout

    def factor(rank):
        n = conv(b, C) + conv(1, C) + cfg.hpf_layers * 2 * conv(2 * C, C)
        if cfg.lowrank:
            return n + 2 * conv(b, b) + conv(C, rank)
        return n + conv(C, b)

    prn = conv(b, C) + (cfg.prn_depth - 2) * conv(C, C) + conv(C, 1) if cfg.prn_depth > 1 else conv(b, 1)
    return factor(cfg.rank_gdn) + factor(cfg.rank_gsrn) + prn


# ------------------------------------------------------- numpy-level forwards

def gdn_forward(state: ModelState, N: np.ndarray, Q: np.ndarray):
    """Denoise ``N`` guided by the LR PAN ``Q``; returns (L_hat, U, V) arrays."""
    N, Q = np.asarray(N), np.asarray(Q)
    if N.shape[:2] != Q.shape[:2]:
        raise ValueError(f"N {N.shape[:2]} and Q {Q.shape[:2]} differ spatially")
    with torch.no_grad():
        out, U, V = state.gdn(to_tensor(N), to_tensor(Q))
    U_np = None if U is None else U[0].numpy().astype(np.float32)
    return to_array(out), U_np, np.moveaxis(V[0].numpy(), 0, 2).astype(np.float32)


def gsrn_forward(state: ModelState, L_hat: np.ndarray, P: np.ndarray, return_detail: bool = False):
    """Super-resolve ``L_hat`` with the HR PAN ``P``; ratio is inferred from shapes."""
    with torch.no_grad():
        H_hat, detail = state.gsrn(to_tensor(L_hat), to_tensor(P))
    return (to_array(H_hat), to_array(detail)) if return_detail else to_array(H_hat)


def prn_forward(state: ModelState, cube: np.ndarray) -> np.ndarray:
    with torch.no_grad():
        return to_array(state.prn(to_tensor(cube)))


# ---------------------------------------------------------------- persistence

def save_state(state: ModelState, directory) -> Path:
    """Write a JSON manifest plus one little-endian float32 blob per parameter."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    params = []
    for name, tensor in state.state_dict().items():
        fname = f"{name}.f32"
        arr = tensor.detach().cpu().numpy().astype("<f4")
        (directory / fname).write_bytes(arr.tobytes())
        params.append({"name": name, "shape": list(arr.shape), "file": fname})
    manifest = {"arch": asdict(state.cfg), "bands": state.bands, "params": params}
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return directory


def load_state(directory) -> ModelState:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    state = ModelState(ArchConfig(**manifest["arch"]), int(manifest["bands"]))
    tensors = {}
    for entry in manifest["params"]:
        raw = (directory / entry["file"]).read_bytes()
        arr = np.frombuffer(raw, dtype="<f4").reshape(entry["shape"])
        tensors[entry["name"]] = torch.from_numpy(arr.astype(np.float32))
    state.load_state_dict(tensors)
    return state
