"""The field-refinement network and its parameter container.

A small 3D encoder-decoder conv net maps either
  (I_m, I_m o phi, I_f, phi)  -> predicted field error   (6 input channels)
or
  (I_m o phi, I_f)            -> residual field           (2 input channels)
to a 3-channel displacement-like output. The final layer is
zero-initialized so a fresh model predicts the identity transform.

Checkpoint file layout (little-endian throughout):
  magic b"FWCKPT1\\n", then a UTF-8 JSON header line holding the config,
  the framework mode tag and an ordered list of {name, shape, dtype}
  entries, then the raw float32 array payloads concatenated in order.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .types import as_tensor

CHECKPOINT_MAGIC = b"FWCKPT1\n"

FIREWORK_CHANNELS = 6  # three images + three field components
BASELINE_CHANNELS = 2  # warped moving + fixed


@dataclass(frozen=True)
class RefinerConfig:
    input_channels: int = FIREWORK_CHANNELS
    base_width: int = 8
    levels: int = 2
    output_channels: int = 3
    # fixed gain on the zero-init head: desk-scale budgets leave the
    # optimizer too few steps to grow voxel-scale fields from raw conv
    # outputs, so the head is scaled instead of the learning rate
    output_gain: float = 8.0
    seed: int = 0

    def __post_init__(self):
        if self.input_channels not in (FIREWORK_CHANNELS, BASELINE_CHANNELS):
            raise ValueError(f"input_channels must be 6 or 2, got {self.input_channels}")
        if self.base_width < 1 or self.levels < 1:
            raise ValueError("base_width and levels must be positive")
        if self.output_channels != 3:
            raise ValueError("output_channels must be 3")


def _conv_block(c_in: int, c_out: int, stride: int = 1) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv3d(c_in, c_out, kernel_size=3, stride=stride, padding=1),
        nn.LeakyReLU(0.2),
    )


class RefinerNet(nn.Module):
    """Two-level 3D U-Net style encoder-decoder with a zero-init head."""

    def __init__(self, config: RefinerConfig):
        super().__init__()
        w = config.base_width
        widths = [w * 2**l for l in range(config.levels + 1)]
        self.stem = _conv_block(config.input_channels, widths[0])
        self.down = nn.ModuleList(
            _conv_block(widths[l], widths[l + 1], stride=2) for l in range(config.levels)
        )
        self.up = nn.ModuleList(
            _conv_block(widths[l + 1] + widths[l], widths[l]) for l in reversed(range(config.levels))
        )
        self.head = nn.Conv3d(widths[0], config.output_channels, kernel_size=3, padding=1)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)
        self.output_gain = config.output_gain

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        skips = [self.stem(x)]
        for down in self.down:
            skips.append(down(skips[-1]))
        h = skips.pop()
        for up in self.up:
            h = nn.functional.interpolate(h, scale_factor=2, mode="trilinear", align_corners=True)
            h = up(torch.cat([h, skips.pop()], dim=1))
        return self.output_gain * self.head(h)


@dataclass
class RefinerParams:
    """Trainable weights plus the config that shaped them."""

    config: RefinerConfig
    model: RefinerNet

    def named_arrays(self) -> dict[str, torch.Tensor]:
        return dict(self.model.state_dict())

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for name, tensor in self.named_arrays().items():
            h.update(name.encode())
            h.update(str(tuple(tensor.shape)).encode())
            h.update(tensor.detach().cpu().numpy().astype("<f4").tobytes())
        return h.hexdigest()

    def param_count(self) -> int:
        return sum(p.numel() for p in self.model.parameters())

    def assert_finite(self):
        for name, p in self.model.named_parameters():
            if not torch.isfinite(p).all():
                raise FloatingPointError(f"non-finite values in parameter {name}")


def init_params(config: RefinerConfig) -> RefinerParams:
    """Deterministic initialization for a fixed config seed."""
    with torch.random.fork_rng():
        torch.manual_seed(config.seed)
        model = RefinerNet(config)
    return RefinerParams(config=config, model=model)


def _check_inputs(config: RefinerConfig, tensors: list[torch.Tensor]):
    shape = tuple(tensors[0].shape[-3:])
    for t in tensors[1:]:
        if tuple(t.shape[-3:]) != shape:
            raise ValueError("all inputs must share one spatial shape")
    stride = 2**config.levels
    if any(s % stride != 0 for s in shape):
        raise ValueError(f"spatial shape {shape} must be divisible by {stride}")


def refine(params: RefinerParams, moving, warped, fixed, field) -> torch.Tensor:
    """Predicted error of `field`, shape (3, D, H, W). Refinement subtracts it."""
    if params.config.input_channels != FIREWORK_CHANNELS:
        raise ValueError("refine requires a 6-channel (field-refinement) config")
    m, w, f = as_tensor(moving), as_tensor(warped), as_tensor(fixed)
    u = as_tensor(field)
    _check_inputs(params.config, [m, w, f, u])
    # condition on the field at the network's internal (pre-gain) scale so
    # voxel-magnitude field channels do not drown the [0, 1] image channels
    u_scaled = u / params.config.output_gain
    x = torch.cat([m.unsqueeze(0), w.unsqueeze(0), f.unsqueeze(0), u_scaled], dim=0)
    return params.model(x.unsqueeze(0)).squeeze(0)


def baseline_forward(params: RefinerParams, warped, fixed) -> torch.Tensor:
    """Residual displacement field of the continuous-deformation cascade."""
    if params.config.input_channels != BASELINE_CHANNELS:
        raise ValueError("baseline_forward requires a 2-channel config")
    w, f = as_tensor(warped), as_tensor(fixed)
    _check_inputs(params.config, [w, f])
    x = torch.stack([w, f], dim=0)
    return params.model(x.unsqueeze(0)).squeeze(0)


def save_checkpoint(path, params: RefinerParams, mode: str):
    """Write the deterministic binary checkpoint described in the module docstring."""
    path = Path(path)
    entries = []
    payloads = []
    for name, tensor in params.named_arrays().items():
        arr = tensor.detach().cpu().numpy().astype("<f4")
        entries.append({"name": name, "shape": list(arr.shape), "dtype": "<f4"})
        payloads.append(arr.tobytes())
    header = {
        "config": asdict(params.config),
        "mode": mode,
        "arrays": entries,
    }
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write((json.dumps(header, sort_keys=True) + "\n").encode())
        for blob in payloads:
            fh.write(blob)


def load_checkpoint(path) -> tuple[RefinerParams, str]:
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file (bad magic)")
        header = json.loads(fh.readline().decode())
        config = RefinerConfig(**header["config"])
        params = init_params(config)
        state = {}
        for entry in header["arrays"]:
            count = int(np.prod(entry["shape"])) if entry["shape"] else 1
            raw = fh.read(count * 4)
            if len(raw) != count * 4:
                raise ValueError(f"{path}: truncated array payload for {entry['name']}")
            arr = np.frombuffer(raw, dtype=entry["dtype"]).reshape(entry["shape"])
            state[entry["name"]] = torch.from_numpy(arr.copy())
        params.model.load_state_dict(state)
    return params, header["mode"]
