"""Volume persistence, preprocessing and synthetic labeled-pair generation.

Container format: a raw little-endian payload (<name>.vol, float32 for
scalar images and fields, int16 for labels) next to a human-readable
key=value header sidecar (<name>.hdr) carrying version, kind, shape,
channel count, spacing and byte order. Roundtrips are bit-exact.

Synthetic pairs provide desk-scale ground truth: a blob image with >= 4
ball ROIs is deformed by a folding-free smooth random field to produce
the moving side, while the fixed side keeps the original geometry plus
mild intensity noise.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from scipy import ndimage

from . import fieldops
from .types import DisplacementField, LabelVolume, Volume

FORMAT_VERSION = 1
PAYLOAD_SUFFIX = ".vol"
HEADER_SUFFIX = ".hdr"

PAIR_FILES = ("fixed", "moving", "labels_f", "labels_m", "gt_field")


@dataclass
class SyntheticPair:
    fixed: Volume
    moving: Volume
    labels_f: LabelVolume
    labels_m: LabelVolume
    gt_field: DisplacementField
    seed: int


def _paths(path) -> tuple[Path, Path]:
    p = Path(path)
    if p.suffix == HEADER_SUFFIX:
        p = p.with_suffix("")
    if p.suffix != PAYLOAD_SUFFIX:
        p = p.with_suffix(p.suffix + PAYLOAD_SUFFIX) if p.suffix else p.with_suffix(PAYLOAD_SUFFIX)
    return p, p.with_suffix(HEADER_SUFFIX)


def save_volume(path, vol):
    """Write a Volume, LabelVolume or DisplacementField with its header sidecar."""
    payload_path, header_path = _paths(path)
    if isinstance(vol, Volume):
        kind, channels, spacing = "scalar", 1, vol.spacing
        arr = vol.data.detach().cpu().numpy().astype("<f4")
    elif isinstance(vol, LabelVolume):
        kind, channels, spacing = "label", 1, (1.0, 1.0, 1.0)
        arr = vol.data.detach().cpu().numpy().astype("<i2")
    elif isinstance(vol, DisplacementField):
        kind, channels, spacing = "field", 3, (1.0, 1.0, 1.0)
        arr = vol.data.detach().cpu().numpy().astype("<f4")
    else:
        raise TypeError(f"cannot save object of type {type(vol).__name__}")
    shape = arr.shape[-3:]
    header = (
        f"version={FORMAT_VERSION}\n"
        f"kind={kind}\n"
        f"shape={shape[0]},{shape[1]},{shape[2]}\n"
        f"channels={channels}\n"
        f"spacing={spacing[0]},{spacing[1]},{spacing[2]}\n"
        f"byte_order=little\n"
    )
    header_path.write_text(header)
    payload_path.write_bytes(arr.tobytes())


def _parse_header(header_path: Path) -> dict[str, str]:
    fields = {}
    for line in header_path.read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, value = line.partition("=")
        fields[key.strip()] = value.strip()
    return fields


def load_volume(path):
    """Load whatever save_volume wrote; the header decides the return type."""
    payload_path, header_path = _paths(path)
    if not header_path.exists():
        raise FileNotFoundError(f"missing header sidecar: {header_path}")
    header = _parse_header(header_path)
    version = int(header.get("version", "-1"))
    if version != FORMAT_VERSION:
        raise ValueError(f"{header_path}: unknown format version {version}")
    kind = header["kind"]
    shape = tuple(int(s) for s in header["shape"].split(","))
    channels = int(header.get("channels", "1"))
    spacing = tuple(float(s) for s in header["spacing"].split(","))
    dtype = "<i2" if kind == "label" else "<f4"
    expected = channels * int(np.prod(shape)) * np.dtype(dtype).itemsize
    raw = payload_path.read_bytes()
    if len(raw) != expected:
        raise ValueError(
            f"{payload_path}: payload is {len(raw)} bytes, header implies {expected}"
        )
    arr = np.frombuffer(raw, dtype=dtype)
    if kind == "scalar":
        return Volume(torch.from_numpy(arr.reshape(shape).copy()), spacing=spacing)
    if kind == "label":
        return LabelVolume(torch.from_numpy(arr.reshape(shape).astype(np.int64)))
    if kind == "field":
        return DisplacementField(torch.from_numpy(arr.reshape((3, *shape)).copy()))
    raise ValueError(f"{header_path}: unknown kind {kind!r}")


def normalize_intensity(vol: Volume) -> Volume:
    """Min-max normalize to [0, 1]; a constant volume maps to all zeros."""
    data = vol.data
    if not torch.isfinite(data).all():
        raise ValueError("volume contains non-finite values")
    lo = data.min()
    hi = data.max()
    if hi == lo:
        return Volume(torch.zeros_like(data), spacing=vol.spacing)
    return Volume((data - lo) / (hi - lo), spacing=vol.spacing)


def center_crop(vol, target: tuple[int, int, int]):
    """Symmetric crop; the extra voxel goes to the high side on odd margins."""
    data = vol.data if isinstance(vol, (Volume, LabelVolume)) else vol
    source = tuple(data.shape[-3:])
    if any(t > s for t, s in zip(target, source)):
        raise ValueError(f"crop target {target} exceeds source shape {source}")
    starts = [(s - t) // 2 for s, t in zip(source, target)]
    slices = tuple(slice(st, st + t) for st, t in zip(starts, target))
    if data.ndim == 4:
        cropped = data[(slice(None), *slices)]
    else:
        cropped = data[slices]
    if isinstance(vol, Volume):
        return Volume(cropped.clone(), spacing=vol.spacing)
    if isinstance(vol, LabelVolume):
        return LabelVolume(cropped.clone())
    return cropped.clone()


def random_smooth_field(seed: int, shape: tuple[int, int, int],
                        amplitude: float = 3.0, smoothing: float = 3.0) -> DisplacementField:
    """Gaussian-smoothed noise field, rescaled to a peak magnitude and then
    halved until it is folding-free. Reproducible per seed."""
    if amplitude < 0:
        raise ValueError("amplitude must be non-negative")
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal((3, *shape))
    smooth = np.stack([ndimage.gaussian_filter(noise[c], sigma=smoothing) for c in range(3)])
    peak = np.sqrt((smooth**2).sum(axis=0)).max()
    if peak == 0 or amplitude == 0:
        return DisplacementField.zero(shape)
    u = smooth * (amplitude / peak)
    field = DisplacementField(torch.from_numpy(u.astype(np.float32)))
    while fieldops.folding_ratio(field) > 0:
        u = u * 0.5
        if np.abs(u).max() < 1e-6:
            return DisplacementField.zero(shape)
        field = DisplacementField(torch.from_numpy(u.astype(np.float32)))
    return field


def _blob_image(rng: np.random.Generator, shape, n_blobs: int = 8,
                texture_weight: float = 0.3, texture_sigma: float = 2.0) -> np.ndarray:
    grid = np.stack(np.meshgrid(*[np.arange(s) for s in shape], indexing="ij"))
    img = np.zeros(shape)
    for _ in range(n_blobs):
        center = rng.uniform(0.2, 0.8, size=3) * np.array(shape)
        sigma = rng.uniform(0.08, 0.18) * min(shape)
        weight = rng.uniform(0.4, 1.0)
        sq = ((grid - center[:, None, None, None]) ** 2).sum(axis=0)
        img += weight * np.exp(-sq / (2 * sigma**2))
    # mid-scale texture so windowed NCC has local contrast everywhere
    texture = ndimage.gaussian_filter(rng.standard_normal(shape), sigma=texture_sigma)
    img += texture_weight * texture / max(np.abs(texture).max(), 1e-12)
    return img


def _ball_labels(rng: np.random.Generator, shape, n_rois: int = 4) -> np.ndarray:
    grid = np.stack(np.meshgrid(*[np.arange(s) for s in shape], indexing="ij"))
    labels = np.zeros(shape, dtype=np.int64)
    for roi in range(1, n_rois + 1):
        center = rng.uniform(0.25, 0.75, size=3) * np.array(shape)
        radius = rng.uniform(0.10, 0.16) * min(shape)
        sq = ((grid - center[:, None, None, None]) ** 2).sum(axis=0)
        labels[sq <= radius**2] = roi
    return labels


def gen_synthetic_pair(seed: int, shape: tuple[int, int, int] = (32, 32, 32),
                       amplitude: float = 3.5, smoothing: float = 4.0,
                       noise_level: float = 0.02, texture_weight: float = 0.3,
                       texture_sigma: float = 2.0) -> SyntheticPair:
    """Labeled pair with a known folding-free ground-truth deformation."""
    rng = np.random.default_rng(seed)
    base = _blob_image(rng, shape, texture_weight=texture_weight, texture_sigma=texture_sigma)
    base = (base - base.min()) / (base.max() - base.min())
    labels = _ball_labels(rng, shape)

    gt_field = random_smooth_field(seed + 1, shape, amplitude=amplitude, smoothing=smoothing)

    base_vol = Volume(torch.from_numpy(base.astype(np.float32)))
    labels_f = LabelVolume(torch.from_numpy(labels))
    moving = fieldops.warp(base_vol, gt_field)
    labels_m = fieldops.warp(labels_f, gt_field, mode="nearest")

    noisy = base + noise_level * rng.standard_normal(shape)
    fixed = Volume(torch.from_numpy(np.clip(noisy, 0.0, 1.0).astype(np.float32)))
    return SyntheticPair(fixed=fixed, moving=moving, labels_f=labels_f,
                         labels_m=labels_m, gt_field=gt_field, seed=seed)


def save_pair(pair_dir, pair: SyntheticPair):
    pair_dir = Path(pair_dir)
    pair_dir.mkdir(parents=True, exist_ok=True)
    save_volume(pair_dir / "fixed", pair.fixed)
    save_volume(pair_dir / "moving", pair.moving)
    save_volume(pair_dir / "labels_f", pair.labels_f)
    save_volume(pair_dir / "labels_m", pair.labels_m)
    save_volume(pair_dir / "gt_field", pair.gt_field)


def load_pair(pair_dir) -> SyntheticPair:
    pair_dir = Path(pair_dir)
    return SyntheticPair(
        fixed=load_volume(pair_dir / "fixed"),
        moving=load_volume(pair_dir / "moving"),
        labels_f=load_volume(pair_dir / "labels_f"),
        labels_m=load_volume(pair_dir / "labels_m"),
        gt_field=load_volume(pair_dir / "gt_field"),
        seed=-1,
    )
