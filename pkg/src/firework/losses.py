"""Similarity and regularization terms and the two-stage training objective.

The objective is the four-term sum
    L = L_sim(I_m o phi1, I_f) + lam * L_reg(phi1)
      + L_sim(I_m o phi2, I_f) + lam * L_reg(phi2)
with L_sim a negated squared local NCC and L_reg the mean squared
forward-difference gradient of the field.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from . import fieldops
from .types import as_tensor

NCC_EPS = 1e-5


@dataclass
class LossParts:
    sim1: torch.Tensor
    reg1: torch.Tensor
    sim2: torch.Tensor
    reg2: torch.Tensor
    total: torch.Tensor
    lam: float

    def detach_floats(self) -> dict[str, float]:
        return {
            "sim1": float(self.sim1.detach()),
            "reg1": float(self.reg1.detach()),
            "sim2": float(self.sim2.detach()),
            "reg2": float(self.reg2.detach()),
            "total": float(self.total.detach()),
        }


def local_ncc(a, b, window: int = 9) -> torch.Tensor:
    """Negated mean squared local normalized cross-correlation.

    Perfect (affine-intensity) match yields -1; uncorrelated inputs yield
    values near 0. Differentiable in both inputs.
    """
    x = as_tensor(a)
    y = as_tensor(b)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {tuple(x.shape)} vs {tuple(y.shape)}")
    if window < 1 or window % 2 == 0:
        raise ValueError(f"window must be a positive odd integer, got {window}")

    x = x.unsqueeze(0).unsqueeze(0)
    y = y.unsqueeze(0).unsqueeze(0)
    pad = window // 2
    ones = torch.ones(window, dtype=x.dtype, device=x.device)
    kernels = [
        (ones.view(1, 1, window, 1, 1), (pad, 0, 0)),
        (ones.view(1, 1, 1, window, 1), (0, pad, 0)),
        (ones.view(1, 1, 1, 1, window), (0, 0, pad)),
    ]

    def box(t):
        # separable box sum: one 1D convolution per axis
        for kernel, padding in kernels:
            t = F.conv3d(t, kernel, padding=padding)
        return t

    # per-voxel count of in-bounds window samples keeps border statistics
    # honest (and the loss affine-intensity invariant) despite zero padding
    win_size = box(torch.ones_like(x))

    x_sum = box(x)
    y_sum = box(y)
    xx_sum = box(x * x)
    yy_sum = box(y * y)
    xy_sum = box(x * y)

    x_mu = x_sum / win_size
    y_mu = y_sum / win_size
    cross = xy_sum - y_mu * x_sum - x_mu * y_sum + x_mu * y_mu * win_size
    x_var = xx_sum - 2 * x_mu * x_sum + x_mu * x_mu * win_size
    y_var = yy_sum - 2 * y_mu * y_sum + y_mu * y_mu * win_size

    cc = cross * cross / (x_var * y_var + NCC_EPS)
    return -cc.mean()


def grad_penalty(field) -> torch.Tensor:
    """Mean squared forward difference of the field over axes, components, voxels."""
    u = as_tensor(field)
    if any(s < 2 for s in u.shape[1:]):
        raise ValueError(f"every spatial dim must be >= 2, got {tuple(u.shape[1:])}")
    terms = []
    for axis in (1, 2, 3):
        d = torch.diff(u, dim=axis)
        terms.append((d * d).mean())
    return torch.stack(terms).mean()


def firework_loss(moving, fixed, phi1, phi2, lam: float, window: int = 9) -> LossParts:
    """Four-term objective over the stage-1 and stage-2 deformation fields."""
    if lam < 0:
        raise ValueError(f"lambda must be non-negative, got {lam}")
    m = as_tensor(moving)
    f = as_tensor(fixed)
    sim1 = local_ncc(fieldops.warp(m, phi1), f, window)
    reg1 = grad_penalty(phi1)
    sim2 = local_ncc(fieldops.warp(m, phi2), f, window)
    reg2 = grad_penalty(phi2)
    total = sim1 + lam * reg1 + sim2 + lam * reg2
    return LossParts(sim1=sim1, reg1=reg1, sim2=sim2, reg2=reg2, total=total, lam=lam)
