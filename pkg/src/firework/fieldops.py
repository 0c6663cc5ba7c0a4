"""Differentiable operations on volumes and displacement fields.

Warping follows the STN convention: out(x) = vol(x + u(x)), sampled with
trilinear or nearest interpolation, out-of-bounds coordinates clamped to
the border. All functions are pure and hold no state.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F

from .types import DisplacementField, LabelVolume, Volume, as_tensor


def identity_grid(shape: tuple[int, int, int], dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """Voxel-index coordinate grid g with g(x) = x, shape (3, D, H, W)."""
    if len(shape) != 3 or any(s < 1 for s in shape):
        raise ValueError(f"grid shape must be three positive dims, got {shape}")
    axes = [torch.arange(s, dtype=dtype) for s in shape]
    return torch.stack(torch.meshgrid(*axes, indexing="ij"), dim=0)


def _sample(channels: torch.Tensor, coords: torch.Tensor, mode: str) -> torch.Tensor:
    """Sample a (C, D, H, W) tensor at absolute voxel coordinates (3, D, H, W)."""
    D, H, W = channels.shape[-3:]
    # grid_sample wants normalized (x, y, z) = (W, H, D) order, in [-1, 1]
    norm = []
    for c, size in zip((2, 1, 0), (W, H, D)):
        denom = max(size - 1, 1)
        norm.append(2.0 * coords[c] / denom - 1.0)
    grid = torch.stack(norm, dim=-1).unsqueeze(0)  # (1, D, H, W, 3)
    out = F.grid_sample(
        channels.unsqueeze(0),
        grid,
        mode="bilinear" if mode == "linear" else "nearest",
        padding_mode="border",
        align_corners=True,
    )
    return out.squeeze(0)


def _check_shapes(spatial: tuple[int, ...], field: torch.Tensor):
    if tuple(field.shape) != (3, *spatial):
        raise ValueError(f"field shape {tuple(field.shape)} does not match volume shape {spatial}")


def warp(vol, field, mode: str = "linear"):
    """Resample vol at x + u(x). Returns the same container type as vol."""
    if mode not in ("linear", "nearest"):
        raise ValueError(f"unknown interpolation mode: {mode}")
    u = as_tensor(field)
    if isinstance(vol, LabelVolume):
        if mode != "nearest":
            raise ValueError("LabelVolume must be warped with mode='nearest'")
        _check_shapes(vol.shape, u)
        coords = identity_grid(vol.shape, dtype=u.dtype) + u
        warped = _sample(vol.data.to(u.dtype).unsqueeze(0), coords, "nearest")
        return LabelVolume(warped.squeeze(0).round().to(vol.data.dtype), roi_ids=vol.roi_ids)
    data = as_tensor(vol)
    if mode == "linear" and not data.is_floating_point():
        raise ValueError("linear interpolation requires a floating-point volume")
    _check_shapes(tuple(data.shape), u)
    coords = identity_grid(tuple(data.shape), dtype=u.dtype).to(u.device) + u
    warped = _sample(data.unsqueeze(0), coords, mode).squeeze(0)
    if isinstance(vol, Volume):
        return Volume(warped, spacing=vol.spacing)
    return warped


def compose(outer, inner) -> torch.Tensor:
    """Field u with u(x) = u_in(x) + u_out(x + u_in(x)).

    Satisfies warp(v, compose(a, b)) ~= warp(warp(v, a), b) up to
    interpolation error; the outer field is resampled trilinearly with
    border clamping.
    """
    a = as_tensor(outer)
    b = as_tensor(inner)
    if a.shape != b.shape:
        raise ValueError(f"field shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    coords = identity_grid(tuple(a.shape[1:]), dtype=b.dtype).to(b.device) + b
    out = b + _sample(a, coords, "linear")
    if isinstance(outer, DisplacementField) or isinstance(inner, DisplacementField):
        return DisplacementField(out)
    return out


def jacobian_determinant(field) -> torch.Tensor:
    """Per-voxel det(I + grad u), displacements in voxel units.

    Central differences at interior voxels, one-sided at the boundary.
    Returns a (D, H, W) tensor.
    """
    u = as_tensor(field)
    if any(s < 3 for s in u.shape[1:]):
        raise ValueError(f"every spatial dim must be >= 3 for differencing, got {tuple(u.shape[1:])}")
    # grads[i][j] = d u_i / d x_j
    grads = [torch.gradient(u[i], dim=(0, 1, 2), edge_order=1) for i in range(3)]
    J = [[grads[i][j] + (1.0 if i == j else 0.0) for j in range(3)] for i in range(3)]
    det = (
        J[0][0] * (J[1][1] * J[2][2] - J[1][2] * J[2][1])
        - J[0][1] * (J[1][0] * J[2][2] - J[1][2] * J[2][0])
        + J[0][2] * (J[1][0] * J[2][1] - J[1][1] * J[2][0])
    )
    return det


def folding_ratio(field) -> float:
    """Fraction of voxels whose Jacobian determinant is non-positive."""
    det = jacobian_determinant(field)
    return float((det <= 0).float().mean().item())
