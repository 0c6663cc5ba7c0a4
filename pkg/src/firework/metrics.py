"""Registration quality measures: Dice overlap, average symmetric surface
distance (ASSD) and folding-ratio aggregation over refinement steps.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
import torch
from scipy import ndimage

from . import fieldops
from .types import LabelVolume, as_tensor


@dataclass
class MetricsRecord:
    step: int
    dsc_mean: float
    dsc_per_roi: dict[int, float]
    assd_mean_mm: float
    folding_ratio: float


def dice(a: LabelVolume, b: LabelVolume, rois=None) -> tuple[dict[int, float], float]:
    """Per-ROI Dice 2|A∩B| / (|A|+|B|) and the mean over evaluated ROIs.

    A ROI absent from both volumes is excluded from the mean; absent from
    exactly one scores 0.
    """
    x = as_tensor(a)
    y = as_tensor(b)
    if x.shape != y.shape:
        raise ValueError(f"label shapes differ: {tuple(x.shape)} vs {tuple(y.shape)}")
    if rois is None:
        rois = sorted(a.roi_ids | b.roi_ids)
    per_roi: dict[int, float] = {}
    for roi in rois:
        in_x = x == roi
        in_y = y == roi
        nx = int(in_x.sum())
        ny = int(in_y.sum())
        if nx == 0 and ny == 0:
            continue
        inter = int((in_x & in_y).sum())
        per_roi[int(roi)] = 2.0 * inter / (nx + ny)
    mean = float(np.mean(list(per_roi.values()))) if per_roi else float("nan")
    return per_roi, mean


def _surface(mask: np.ndarray) -> np.ndarray:
    """Mask voxels with at least one six-connected background neighbor.

    Voxels on the volume boundary count as surface (outside is background).
    """
    struct = ndimage.generate_binary_structure(3, 1)
    eroded = ndimage.binary_erosion(mask, structure=struct, border_value=0)
    return mask & ~eroded


def assd(a, b, spacing=(1.0, 1.0, 1.0)) -> float:
    """Average symmetric surface distance in mm between two binary masks."""
    ma = np.asarray(as_tensor(a).cpu().numpy() if isinstance(a, (torch.Tensor, LabelVolume)) else a).astype(bool)
    mb = np.asarray(as_tensor(b).cpu().numpy() if isinstance(b, (torch.Tensor, LabelVolume)) else b).astype(bool)
    if ma.shape != mb.shape:
        raise ValueError(f"mask shapes differ: {ma.shape} vs {mb.shape}")
    if not ma.any() or not mb.any():
        raise ValueError("assd is undefined for an empty mask")
    sa = _surface(ma)
    sb = _surface(mb)
    # distance to the nearest surface voxel of the other mask, exact Euclidean
    dist_to_b = ndimage.distance_transform_edt(~sb, sampling=spacing)
    dist_to_a = ndimage.distance_transform_edt(~sa, sampling=spacing)
    d_ab = dist_to_b[sa]
    d_ba = dist_to_a[sb]
    return float((d_ab.sum() + d_ba.sum()) / (d_ab.size + d_ba.size))


def evaluate(result, labels_f: LabelVolume, rois, spacing=(1.0, 1.0, 1.0)) -> list[MetricsRecord]:
    """Score every refinement step of a RegistrationResult against fixed labels.

    ASSD averages over ROIs whose mask is nonempty on both sides; a ROI
    that vanished under warping contributes Dice 0 and is skipped for ASSD.
    """
    if not result.warped_labels:
        raise ValueError("result carries no warped labels to evaluate")
    fixed = as_tensor(labels_f).cpu().numpy()
    records = []
    for step, (phi, warped_labels) in enumerate(zip(result.phis, result.warped_labels), start=1):
        per_roi, mean = dice(warped_labels, labels_f, rois)
        moved = as_tensor(warped_labels).cpu().numpy()
        assd_vals = []
        for roi in rois:
            wa = moved == roi
            wb = fixed == roi
            if wa.any() and wb.any():
                assd_vals.append(assd(wa, wb, spacing))
        records.append(MetricsRecord(
            step=step,
            dsc_mean=mean,
            dsc_per_roi=per_roi,
            assd_mean_mm=float(np.mean(assd_vals)) if assd_vals else float("nan"),
            folding_ratio=fieldops.folding_ratio(phi),
        ))
    return records


def write_metrics_csv(path, records: list[MetricsRecord], rois):
    """CSV with columns step, dsc_mean, assd_mean_mm, folding_ratio, dsc_<roi>..."""
    rois = sorted(int(r) for r in rois)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "dsc_mean", "assd_mean_mm", "folding_ratio"]
                        + [f"dsc_{r}" for r in rois])
        for rec in records:
            writer.writerow(
                [rec.step, repr(rec.dsc_mean), repr(rec.assd_mean_mm), repr(rec.folding_ratio)]
                + [repr(rec.dsc_per_roi.get(r, 0.0)) for r in rois]
            )


def read_metrics_csv(path) -> list[dict[str, float]]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ValueError(f"{path}: empty metrics CSV")
    return [{k: float(v) for k, v in row.items()} for row in rows]
