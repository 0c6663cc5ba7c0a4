import numpy as np
import pytest
import torch
from scipy import ndimage

torch.set_num_threads(4)


@pytest.fixture(autouse=True)
def _seed_torch():
    torch.manual_seed(0)


def smooth_image(seed: int, shape, sigma: float = 2.0, dtype=torch.float32) -> torch.Tensor:
    """Band-limited random image in [0, 1]."""
    rng = np.random.default_rng(seed)
    img = ndimage.gaussian_filter(rng.standard_normal(shape), sigma=sigma)
    img = (img - img.min()) / (img.max() - img.min())
    return torch.from_numpy(img).to(dtype)


def smooth_field(seed: int, shape, amplitude: float = 1.5, sigma: float = 2.0,
                 dtype=torch.float32) -> torch.Tensor:
    """Smooth small-amplitude displacement field (3, D, H, W)."""
    rng = np.random.default_rng(seed)
    u = np.stack([ndimage.gaussian_filter(rng.standard_normal(shape), sigma=sigma)
                  for _ in range(3)])
    peak = np.abs(u).max()
    if peak > 0:
        u = u * (amplitude / peak)
    return torch.from_numpy(u).to(dtype)


def central_difference_grad(fn, x: torch.Tensor, step: float = 1e-3) -> torch.Tensor:
    """Dense central finite-difference gradient of a scalar function."""
    g = torch.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + step
        hi = fn(x)
        flat[i] = orig - step
        lo = fn(x)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * step)
    return g


def relative_error(a: torch.Tensor, b: torch.Tensor) -> float:
    denom = max(float(a.abs().max()), float(b.abs().max()), 1e-12)
    return float((a - b).abs().max()) / denom
