"""Core in-memory containers for volumes, labels and displacement fields.

All spatial data is unbatched: images are (D, H, W), displacement fields
are (3, D, H, W) with component c holding the displacement along spatial
axis c, expressed in voxel units of the target grid.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch

Spacing = tuple[float, float, float]


@dataclass
class Volume:
    """Scalar intensity grid with physical voxel spacing in mm."""

    data: torch.Tensor  # (D, H, W), floating point
    spacing: Spacing = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if self.data.ndim != 3:
            raise ValueError(f"Volume data must be 3D, got shape {tuple(self.data.shape)}")
        if not self.data.is_floating_point():
            self.data = self.data.float()

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.data.shape)


@dataclass
class LabelVolume:
    """Integer segmentation grid; background is 0."""

    data: torch.Tensor  # (D, H, W), integer
    roi_ids: frozenset[int] = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if self.data.ndim != 3:
            raise ValueError(f"LabelVolume data must be 3D, got shape {tuple(self.data.shape)}")
        if self.data.is_floating_point():
            raise TypeError("LabelVolume requires an integer tensor")
        present = frozenset(int(v) for v in torch.unique(self.data).tolist() if v != 0)
        if self.roi_ids is None:
            self.roi_ids = present
        else:
            self.roi_ids = frozenset(int(r) for r in self.roi_ids)
            missing = present - self.roi_ids
            if missing:
                raise ValueError(f"labels present but not declared in roi_ids: {sorted(missing)}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.data.shape)


@dataclass
class DisplacementField:
    """Dense per-voxel displacement vectors in voxel units; zero == identity."""

    data: torch.Tensor  # (3, D, H, W), floating point

    def __post_init__(self):
        if self.data.ndim != 4 or self.data.shape[0] != 3:
            raise ValueError(
                f"DisplacementField data must be (3, D, H, W), got {tuple(self.data.shape)}"
            )
        if not self.data.is_floating_point():
            self.data = self.data.float()

    @property
    def spatial_shape(self) -> tuple[int, int, int]:
        return tuple(self.data.shape[1:])

    @staticmethod
    def zero(shape: tuple[int, int, int], dtype: torch.dtype = torch.float32) -> "DisplacementField":
        return DisplacementField(torch.zeros((3, *shape), dtype=dtype))


def as_tensor(x) -> torch.Tensor:
    """Unwrap a Volume/LabelVolume/DisplacementField to its raw tensor."""
    return x.data if isinstance(x, (Volume, LabelVolume, DisplacementField)) else x
