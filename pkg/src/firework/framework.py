"""Two-stage training and iterative inference for field refinement,
plus the classical continuous-deformation cascade used as a baseline.

Field-refinement training runs the shared-parameter network twice per
step: once from the zero field (initialization stage) and once on the
stage-1 result (refinement stage); the four-term loss covers both stages
and gradients flow through stage 1 into stage 2. Inference repeats the
refinement step T times without updates; the final field equals the
negated sum of all predicted errors (telescoping).
"""

from __future__ import annotations

import csv
import random
from dataclasses import dataclass, field

import torch

from . import fieldops, losses, metrics, refiner
from .losses import LossParts
from .refiner import RefinerConfig, RefinerParams
from .types import LabelVolume, Volume, as_tensor

MODE_FIREWORK = "firework"
MODE_BASELINE = "baseline"

TRAINING_LOG_COLUMNS = ["epoch", "lr", "sim1", "reg1", "sim2", "reg2", "total"]


@dataclass
class TrainConfig:
    lr_init: float = 4e-4
    epochs: int = 30
    lam: float = 4.0
    batch_size: int = 1
    window: int = 9
    t_infer: int = 5
    seed: int = 0
    mode: str = MODE_FIREWORK

    def __post_init__(self):
        if self.lr_init <= 0:
            raise ValueError("lr_init must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size != 1:
            raise ValueError("only batch_size == 1 is supported")
        if self.mode not in (MODE_FIREWORK, MODE_BASELINE):
            raise ValueError(f"unknown mode: {self.mode}")


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    sim1: float
    reg1: float
    sim2: float
    reg2: float
    total: float


@dataclass
class RegistrationResult:
    """Per-step fields and warped outputs from one registered pair."""

    mode: str
    phis: list[torch.Tensor]  # phi_1 .. phi_T, each (3, D, H, W)
    increments: list[torch.Tensor]  # predicted errors (refinement) or residual subfields (cascade)
    warped: list[torch.Tensor]  # moving image warped by each phi_t
    warped_labels: list[LabelVolume] = field(default_factory=list)

    @property
    def steps(self) -> int:
        return len(self.phis)


def lr_schedule(lr_init: float, m: int, total_epochs: int) -> float:
    """Polynomial decay lr_m = lr_init * (1 - (m-1)/M)^0.9 for m = 1..M."""
    if not 1 <= m <= total_epochs:
        raise ValueError(f"epoch index {m} outside 1..{total_epochs}")
    return lr_init * (1.0 - (m - 1) / total_epochs) ** 0.9


def _zero_field(moving: torch.Tensor) -> torch.Tensor:
    return torch.zeros((3, *moving.shape), dtype=moving.dtype, device=moving.device)


def _refinement_step(params: RefinerParams, m, warped_prev, f, phi_prev):
    """One shared-parameter refinement: predict the field error and subtract it."""
    eps = refiner.refine(params, m, warped_prev, f, phi_prev)
    return eps, phi_prev - eps


def _check_finite_loss(parts: LossParts, context: str):
    if not torch.isfinite(parts.total):
        raise FloatingPointError(
            f"non-finite loss during {context}: "
            f"sim1={float(parts.sim1)} reg1={float(parts.reg1)} "
            f"sim2={float(parts.sim2)} reg2={float(parts.reg2)}"
        )


def _firework_forward(params: RefinerParams, m: torch.Tensor, f: torch.Tensor):
    # initialization stage: the moving image is passed twice, field is zero
    eps1, phi1 = _refinement_step(params, m, m, f, _zero_field(m))
    warped1 = fieldops.warp(m, phi1)
    eps2, phi2 = _refinement_step(params, m, warped1, f, phi1)
    return phi1, phi2


def train_step_firework(params: RefinerParams, moving, fixed, cfg: TrainConfig,
                        optimizer: torch.optim.Optimizer) -> LossParts:
    """One end-to-end update through both refinement stages."""
    m, f = as_tensor(moving), as_tensor(fixed)
    phi1, phi2 = _firework_forward(params, m, f)
    parts = losses.firework_loss(m, f, phi1, phi2, cfg.lam, cfg.window)
    _check_finite_loss(parts, "field-refinement training step")
    optimizer.zero_grad()
    parts.total.backward()
    optimizer.step()
    params.assert_finite()
    return parts


def _baseline_forward_pair(params: RefinerParams, m: torch.Tensor, f: torch.Tensor):
    r1 = refiner.baseline_forward(params, m, f)  # stage 1 starts from the identity
    phi1 = r1
    r2 = refiner.baseline_forward(params, fieldops.warp(m, phi1), f)
    phi2 = fieldops.compose(phi1, r2)
    return phi1, phi2


def train_step_baseline(params: RefinerParams, moving, fixed, cfg: TrainConfig,
                        optimizer: torch.optim.Optimizer) -> LossParts:
    """One update of the two-stage continuous-deformation cascade (shared weights)."""
    m, f = as_tensor(moving), as_tensor(fixed)
    phi1, phi2 = _baseline_forward_pair(params, m, f)
    parts = losses.firework_loss(m, f, phi1, phi2, cfg.lam, cfg.window)
    _check_finite_loss(parts, "cascade training step")
    optimizer.zero_grad()
    parts.total.backward()
    optimizer.step()
    params.assert_finite()
    return parts


def train(pairs, cfg: TrainConfig) -> tuple[RefinerParams, list[EpochRecord]]:
    """Train on (moving, fixed) pairs; deterministic for a fixed seed.

    Pair order is reshuffled every epoch under the run seed. Optimizer
    moments persist across epochs; only the learning rate is rescheduled.
    """
    if not pairs:
        raise ValueError("training requires at least one pair")
    channels = refiner.FIREWORK_CHANNELS if cfg.mode == MODE_FIREWORK else refiner.BASELINE_CHANNELS
    params = refiner.init_params(RefinerConfig(input_channels=channels, seed=cfg.seed))
    optimizer = torch.optim.Adam(params.model.parameters(), lr=cfg.lr_init)
    step_fn = train_step_firework if cfg.mode == MODE_FIREWORK else train_step_baseline
    rng = random.Random(cfg.seed)

    log: list[EpochRecord] = []
    for epoch in range(1, cfg.epochs + 1):
        lr = lr_schedule(cfg.lr_init, epoch, cfg.epochs)
        for group in optimizer.param_groups:
            group["lr"] = lr
        order = list(range(len(pairs)))
        rng.shuffle(order)
        sums = {k: 0.0 for k in ("sim1", "reg1", "sim2", "reg2", "total")}
        for idx in order:
            moving, fixed = pairs[idx]
            parts = step_fn(params, moving, fixed, cfg, optimizer)
            for k, v in parts.detach_floats().items():
                sums[k] += v
        n = len(pairs)
        log.append(EpochRecord(epoch=epoch, lr=lr, **{k: v / n for k, v in sums.items()}))
    return params, log


def write_training_log(path, log: list[EpochRecord]):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(TRAINING_LOG_COLUMNS)
        for rec in log:
            writer.writerow([rec.epoch, repr(rec.lr), repr(rec.sim1), repr(rec.reg1),
                             repr(rec.sim2), repr(rec.reg2), repr(rec.total)])


def infer_firework(params: RefinerParams, moving, fixed, T: int) -> RegistrationResult:
    """Iterate the refinement step T times from the zero field, no updates."""
    if T < 1:
        raise ValueError("T must be >= 1")
    m, f = as_tensor(moving), as_tensor(fixed)
    result = RegistrationResult(mode=MODE_FIREWORK, phis=[], increments=[], warped=[])
    with torch.no_grad():
        phi = _zero_field(m)
        warped = m
        for t in range(1, T + 1):
            eps, phi = _refinement_step(params, m, warped, f, phi)
            if not torch.isfinite(phi).all():
                raise FloatingPointError(f"non-finite field at refinement step {t}")
            warped = fieldops.warp(m, phi)
            result.increments.append(eps)
            result.phis.append(phi)
            result.warped.append(warped)
    return result


def infer_baseline(params: RefinerParams, moving, fixed, T: int) -> RegistrationResult:
    """Iterate the cascade: residual prediction then field composition."""
    if T < 1:
        raise ValueError("T must be >= 1")
    m, f = as_tensor(moving), as_tensor(fixed)
    result = RegistrationResult(mode=MODE_BASELINE, phis=[], increments=[], warped=[])
    with torch.no_grad():
        phi = _zero_field(m)
        warped = m
        for t in range(1, T + 1):
            r = refiner.baseline_forward(params, warped, f)
            phi = r if t == 1 else as_tensor(fieldops.compose(phi, r))
            if not torch.isfinite(phi).all():
                raise FloatingPointError(f"non-finite field at cascade step {t}")
            warped = fieldops.warp(m, phi)
            result.increments.append(r)
            result.phis.append(phi)
            result.warped.append(warped)
    return result


def register_pair(params: RefinerParams, moving, fixed, labels_m: LabelVolume | None,
                  labels_f: LabelVolume | None, T: int, mode: str,
                  spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)):
    """Run inference and score every step; labels are optional."""
    if T < 1:
        raise ValueError("T must be >= 1")
    if mode == MODE_FIREWORK:
        result = infer_firework(params, moving, fixed, T)
    elif mode == MODE_BASELINE:
        result = infer_baseline(params, moving, fixed, T)
    else:
        raise ValueError(f"unknown mode: {mode}")
    records: list[metrics.MetricsRecord] = []
    if labels_m is not None and labels_f is not None:
        result.warped_labels = [
            fieldops.warp(labels_m, phi, mode="nearest") for phi in result.phis
        ]
        if isinstance(fixed, Volume):
            spacing = fixed.spacing
        records = metrics.evaluate(result, labels_f, sorted(labels_f.roi_ids), spacing)
    return result, records
