"""Central finite-difference checks of autograd gradients.

A sample is flagged kink-adjacent when the central differences at step h and
h/2 disagree: for a smooth function they agree to O(h^2), while a leaky-ReLU
or absolute-value kink inside the bracket makes them differ at O(h).  A wrong
analytic gradient is still caught, because both differences then agree with
each other but not with autograd.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np
import torch


@dataclass
class GradSample:
    name: str
    index: int
    analytic: float
    fd: float
    fd_half: float

    def rel_error(self, floor: float = 1e-10) -> float:
        return abs(self.analytic - self.fd) / max(abs(self.analytic), abs(self.fd), floor)

    def kink_adjacent(self, tol: float = 1e-5, floor: float = 1e-10) -> bool:
        return abs(self.fd - self.fd_half) / max(abs(self.fd), abs(self.fd_half), floor) > tol


def _central(loss_fn, flat, idx, h):
    orig = flat[idx].item()
    flat[idx] = orig + h
    up = float(loss_fn())
    flat[idx] = orig - h
    down = float(loss_fn())
    flat[idx] = orig
    return (up - down) / (2 * h)


def check_gradients(
    loss_fn: Callable[[], torch.Tensor],
    named_params: Iterable[tuple[str, torch.nn.Parameter]],
    per_tensor: int = 3,
    h: float = 1e-3,
    seed: int = 0,
    reference_fn: Callable[[], torch.Tensor] | None = None,
) -> list[GradSample]:
    """Compare autograd with central differences on sampled parameter entries.

    ``loss_fn`` recomputes the scalar loss from the current parameters.
    Parameters whose gradient is ``None`` (unused by the loss) are skipped.
    For a loss with stop-gradients, pass ``reference_fn`` evaluating the same
    loss with the stopped quantities frozen at their current values; the
    differences are then taken on it.
    """
    fd_fn = reference_fn or loss_fn
    named_params = list(named_params)
    for _, p in named_params:
        p.grad = None
    loss_fn().backward()
    rng = np.random.default_rng(seed)
    samples = []
    with torch.no_grad():
        for name, p in named_params:
            if p.grad is None:
                continue
            flat = p.data.view(-1)
            grad = p.grad.view(-1)
            for idx in rng.choice(flat.numel(), size=min(per_tensor, flat.numel()), replace=False):
                idx = int(idx)
                samples.append(GradSample(
                    name=name,
                    index=idx,
                    analytic=grad[idx].item(),
                    fd=_central(fd_fn, flat, idx, h),
                    fd_half=_central(fd_fn, flat, idx, h / 2),
                ))
    return samples


def summarize(samples: list[GradSample], rtol: float = 1e-3, floor: float = 1e-10) -> dict:
    smooth = [s for s in samples if not s.kink_adjacent(floor=floor)]
    passed = [s for s in smooth if s.rel_error(floor) < rtol]
    return {
        "sampled": len(samples),
        "kink_adjacent": len(samples) - len(smooth),
        "checked": len(smooth),
        "passed": len(passed),
        "pass_fraction": len(passed) / len(smooth) if smooth else float("nan"),
    }
