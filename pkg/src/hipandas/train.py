"""Losses and the two-stage zero-shot training schedule.

Stage 1 (LR scale) minimizes L_D + L_S1 + L_Q; stage 2 continues from the
same parameters and optimizer state and minimizes L_D + L_S2 + L_Q + L_P.
Each epoch is a single full-image Adam step.  All losses are per-element
means and carry unit weight.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, replace

import numpy as np
import torch
import torch.nn.functional as F

from .nets import (
    ArchConfig,
    ModelState,
    downsample_t,
    init_state,
    to_array,
    to_tensor,
)

log = logging.getLogger(__name__)

LOSS_NAMES = ("L_D", "L_S", "L_Q", "L_P")
ABLATION_FLAGS = ("drop_LD", "drop_LS", "drop_LP_LQ", "skip_stage1", "no_lowrank", "no_pan", "denoise_only")

# Divided by 8 so a unit ramp has unit response, keeping L_Q/L_P on the same
# scale as the other per-element losses.
_SOBEL_X = torch.tensor([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]]) / 8.0


@dataclass(frozen=True)
class TrainConfig:
    stage1_epochs: int = 400
    stage2_epochs: int = 600
    learning_rate: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    seed: int = 0
    drop_LD: bool = False
    drop_LS: bool = False
    drop_LP_LQ: bool = False
    skip_stage1: bool = False
    no_lowrank: bool = False
    no_pan: bool = False
    denoise_only: bool = False

    def __post_init__(self):
        if self.stage1_epochs < 0 or self.stage2_epochs < 0:
            raise ValueError("epoch counts must be >= 0")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        object.__setattr__(self, "betas", tuple(self.betas))

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @property
    def ablation(self) -> str:
        on = [f for f in ABLATION_FLAGS if getattr(self, f)]
        return "+".join(on) if on else "full"


class NumericalAbort(RuntimeError):
    """A loss became non-finite; carries the epoch, components and trace so far."""

    def __init__(self, epoch: int, components: dict, trace: "LossTrace"):
        super().__init__(f"non-finite loss at epoch {epoch}: {components}")
        self.epoch = epoch
        self.components = components
        self.trace = trace


@dataclass
class LossTrace:
    records: list[dict] = field(default_factory=list)

    def append(self, epoch: int, stage: int, components: dict, total: float) -> None:
        row = {"epoch": epoch}
        row.update({k: float(components.get(k, 0.0)) for k in LOSS_NAMES})
        row["total"] = float(total)
        row["stage"] = stage
        self.records.append(row)

    def __len__(self):
        return len(self.records)

    def column(self, name: str, stage: int | None = None) -> np.ndarray:
        return np.array([r[name] for r in self.records if stage is None or r["stage"] == stage])

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["epoch", *LOSS_NAMES, "total", "stage"])
        for r in self.records:
            writer.writerow([r["epoch"], *(repr(r[k]) for k in LOSS_NAMES), repr(r["total"]), r["stage"]])
        return buf.getvalue()


@dataclass
class RestorationResult:
    L_hat: np.ndarray
    H_hat: np.ndarray | None
    trace: LossTrace
    state: ModelState


# --------------------------------------------------------------------- losses

def loss_denoise(N: torch.Tensor, L_hat: torch.Tensor) -> torch.Tensor:
    if N.shape != L_hat.shape:
        raise ValueError(f"shape mismatch {tuple(N.shape)} vs {tuple(L_hat.shape)}")
    return (N - L_hat).abs().mean()


def sobel(x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Horizontal and vertical 3x3 Sobel responses with replicate padding."""
    kx = _SOBEL_X.to(x.dtype)
    kernels = torch.stack([kx, kx.T]).unsqueeze(1)
    c = x.shape[1]
    xp = F.pad(x, (1, 1, 1, 1), mode="replicate")
    out = F.conv2d(xp, kernels.repeat(c, 1, 1, 1), groups=c)
    return out[:, 0::2], out[:, 1::2]


def loss_pan_highfreq(pan_ref: torch.Tensor, pan_hat: torch.Tensor) -> torch.Tensor:
    if pan_ref.shape != pan_hat.shape:
        raise ValueError(f"shape mismatch {tuple(pan_ref.shape)} vs {tuple(pan_hat.shape)}")
    rx, ry = sobel(pan_ref)
    ex, ey = sobel(pan_hat)
    return 0.5 * ((rx - ex).abs().mean() + (ry - ey).abs().mean())


def loss_sr_stage1(L_hat: torch.Tensor, state: ModelState, Q: torch.Tensor, s: int) -> torch.Tensor:
    """GSRN must rebuild L_hat from its own downsampled version; L_hat is the target."""
    if L_hat.shape[-1] % s or L_hat.shape[-2] % s:
        raise ValueError(f"L_hat spatial dims {tuple(L_hat.shape[-2:])} not divisible by {s}")
    L_prime, _ = state.gsrn(downsample_t(L_hat, s), Q)
    return F.mse_loss(L_prime, L_hat.detach())


def loss_sr_stage2(H_hat: torch.Tensor, L_hat: torch.Tensor, s: int) -> torch.Tensor:
    if H_hat.shape[-2] != s * L_hat.shape[-2] or H_hat.shape[-1] != s * L_hat.shape[-1]:
        raise ValueError(f"H_hat {tuple(H_hat.shape[-2:])} is not {s}x L_hat {tuple(L_hat.shape[-2:])}")
    return F.mse_loss(downsample_t(H_hat, s), L_hat.detach())


# ------------------------------------------------------------------- training

def stage_losses(state: ModelState, N, P, Q, stage: int, tc: TrainConfig) -> tuple[dict, dict]:
    """Forward pass for one stage.

    Returns ``(components, outputs)``; components only holds the active terms.
    Inputs are (1, c, h, w) tensors.
    """
    s = P.shape[-1] // N.shape[-1]
    P_in = torch.zeros_like(P) if tc.no_pan else P
    Q_in = torch.zeros_like(Q) if tc.no_pan else Q

    L_hat, _, _ = state.gdn(N, Q_in)
    comps: dict[str, torch.Tensor] = {}
    outputs = {"L_hat": L_hat}
    if not tc.drop_LD:
        comps["L_D"] = loss_denoise(N, L_hat)
    if tc.denoise_only:
        return comps, outputs

    if not tc.drop_LP_LQ:
        # L_Q fits the PRN only; letting it reach GDN makes the denoiser chase PRN errors
        comps["L_Q"] = loss_pan_highfreq(Q, state.prn(L_hat.detach()))
    if stage == 1:
        if not tc.drop_LS:
            comps["L_S"] = loss_sr_stage1(L_hat, state, Q_in, s)
    else:
        H_hat, _ = state.gsrn(L_hat, P_in)
        outputs["H_hat"] = H_hat
        if not tc.drop_LS:
            comps["L_S"] = loss_sr_stage2(H_hat, L_hat, s)
        if not tc.drop_LP_LQ:
            comps["L_P"] = loss_pan_highfreq(P, state.prn(H_hat))
    return comps, outputs


def _check_inputs(N, P, Q) -> int:
    N, P, Q = np.asarray(N), np.asarray(P), np.asarray(Q)
    if N.ndim != 3 or P.ndim != 2 or Q.ndim != 2:
        raise ValueError("expected N (h, w, b), P (H, W) and Q (h, w)")
    if Q.shape != N.shape[:2]:
        raise ValueError(f"Q {Q.shape} must match N spatially {N.shape[:2]}")
    s = P.shape[0] // N.shape[0]
    if s < 2 or P.shape != (s * N.shape[0], s * N.shape[1]):
        raise ValueError(f"P {P.shape} is not an integer multiple (>= 2) of N {N.shape[:2]}")
    return s


@contextmanager
def _flush_denormals():
    # Adam moments of near-dead units decay into subnormal floats, which can
    # slow CPU convolutions by an order of magnitude.
    torch.set_flush_denormal(True)
    try:
        yield
    finally:
        torch.set_flush_denormal(False)


def run_restoration(N, P, Q, arch: ArchConfig, tc: TrainConfig, progress: bool = False) -> RestorationResult:
    """Train GDN/GSRN/PRN on a single observation and return the restorations.

    Subnormal floats are flushed to zero while this runs.
    """
    _check_inputs(N, P, Q)
    with _flush_denormals():
        return _train(N, P, Q, arch, tc, progress)


def _train(N, P, Q, arch: ArchConfig, tc: TrainConfig, progress: bool) -> RestorationResult:
    if tc.no_lowrank:
        arch = replace(arch, lowrank=False)
    torch.manual_seed(tc.seed)
    state = init_state(arch, N.shape[2], tc.seed)
    Nt, Pt, Qt = to_tensor(N), to_tensor(P), to_tensor(Q)

    params = state.gdn.parameters() if tc.denoise_only else state.parameters()
    opt = torch.optim.Adam(params, lr=tc.learning_rate, betas=tc.betas, eps=tc.eps)
    trace = LossTrace()

    if tc.denoise_only:
        schedule = [(1, tc.stage1_epochs + tc.stage2_epochs)]
    elif tc.skip_stage1:
        schedule = [(2, tc.stage2_epochs)]
    else:
        schedule = [(1, tc.stage1_epochs), (2, tc.stage2_epochs)]

    epoch = 0
    for stage, n_epochs in schedule:
        for _ in range(n_epochs):
            opt.zero_grad(set_to_none=True)
            comps, _ = stage_losses(state, Nt, Pt, Qt, stage, tc)
            total = sum(comps.values()) if comps else None
            values = {k: v.item() for k, v in comps.items()}
            total_value = total.item() if total is not None else 0.0
            if not all(math.isfinite(v) for v in values.values()) or not math.isfinite(total_value):
                raise NumericalAbort(epoch, values, trace)
            trace.append(epoch, stage, values, total_value)
            if total is not None and total.requires_grad:
                total.backward()
                opt.step()
            if progress and epoch % 50 == 0:
                log.info("epoch %d stage %d total %.6f %s", epoch, stage, total_value, values)
            epoch += 1

    with torch.no_grad():
        Q_in = torch.zeros_like(Qt) if tc.no_pan else Qt
        P_in = torch.zeros_like(Pt) if tc.no_pan else Pt
        L_hat, _, _ = state.gdn(Nt, Q_in)
        H_hat = None if tc.denoise_only else state.gsrn(L_hat, P_in)[0]
    return RestorationResult(
        L_hat=to_array(L_hat),
        H_hat=None if H_hat is None else to_array(H_hat),
        trace=trace,
        state=state,
    )
