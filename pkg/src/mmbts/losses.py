"""Hybrid training objective: dice segmentation loss, whole-volume SSIM
generation loss, the surrogate-modality regression target, and the weighted
total with its per-step report."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .dropout import PatternMask
from .errors import NumericError, SupervisionError
from .volumes import ACQUIRED_MODALITIES, VALID_LABEL_CODES, MultiModalVolume

# Label code -> one-hot channel; channel 0 is background.
CODE_TO_CHANNEL = {0: 0, 1: 1, 2: 2, 4: 3}
N_CLASSES = 4
FOREGROUND_CHANNELS = (1, 2, 3)

DICE_EPS = 1.0


def one_hot_labels(labels: np.ndarray | torch.Tensor) -> torch.Tensor:
    """Map a labelmap with codes (0, 1, 2, 4) to a (4, D, H, W) one-hot tensor."""
    if isinstance(labels, np.ndarray):
        labels = torch.from_numpy(np.ascontiguousarray(labels))
    labels = labels.long()
    out = torch.zeros((N_CLASSES,) + tuple(labels.shape), dtype=torch.float32)
    for code in VALID_LABEL_CODES:
        out[CODE_TO_CHANNEL[code]][labels == code] = 1.0
    return out


def dice_per_class(probabilities: torch.Tensor, target: torch.Tensor, eps: float = DICE_EPS) -> torch.Tensor:
    """Smoothed soft dice of each foreground class.

    Class dim is the first (unbatched, (C, ...)) or second ((B, C, ...));
    sums run over batch and space so the value follows the global-overlap
    formula. `eps` smooths both numerator and denominator, so empty classes
    score 1 and perfect overlap is exactly 1.
    """
    if probabilities.shape != target.shape:
        raise ValueError(f"shape mismatch {tuple(probabilities.shape)} vs {tuple(target.shape)}")
    class_dim = 0 if probabilities.ndim == 4 else 1
    sum_dims = tuple(d for d in range(probabilities.ndim) if d != class_dim)
    inter = (probabilities * target).sum(dim=sum_dims)
    totals = probabilities.sum(dim=sum_dims) + target.sum(dim=sum_dims)
    dice = (2.0 * inter + eps) / (totals + eps)
    return torch.stack([dice[c] for c in FOREGROUND_CHANNELS])


def dice_loss(probabilities: torch.Tensor, target: torch.Tensor, eps: float = DICE_EPS) -> torch.Tensor:
    """Soft dice loss averaged over the three foreground classes."""
    return 1.0 - dice_per_class(probabilities, target, eps).mean()


@dataclass(frozen=True)
class SSIMConstants:
    """Stabilizers for the SSIM ratio; both must be positive."""

    c1: float
    c2: float

    def __post_init__(self):
        if self.c1 <= 0 or self.c2 <= 0:
            raise ValueError("SSIM constants must be positive")


def default_ssim_constants(target: torch.Tensor | np.ndarray) -> SSIMConstants:
    """Standard (0.01 L)^2 / (0.03 L)^2 with L the target's dynamic range."""
    if isinstance(target, np.ndarray):
        lo, hi = float(target.min()), float(target.max())
    else:
        lo, hi = float(target.min().item()), float(target.max().item())
    dynamic_range = hi - lo
    if dynamic_range <= 0:
        dynamic_range = 1.0
    return SSIMConstants((0.01 * dynamic_range) ** 2, (0.03 * dynamic_range) ** 2)


def _ssim_single(gen: torch.Tensor, tgt: torch.Tensor, c: SSIMConstants) -> torch.Tensor:
    mu_g = gen.mean()
    mu_t = tgt.mean()
    var_g = ((gen - mu_g) ** 2).mean()
    var_t = ((tgt - mu_t) ** 2).mean()
    cov = ((gen - mu_g) * (tgt - mu_t)).mean()
    num = (2 * mu_g * mu_t + c.c1) * (2 * cov + c.c2)
    den = (mu_g ** 2 + mu_t ** 2 + c.c1) * (var_g + var_t + c.c2)
    return num / den


def ssim_loss(
    generated: torch.Tensor,
    target: torch.Tensor,
    constants: SSIMConstants | None = None,
) -> torch.Tensor:
    """1 - SSIM from whole-volume statistics, averaged over the batch.

    Tensors of 4+ dims are treated as (B, ...) batches; each example's SSIM
    uses its own global mean/variance/covariance (no sliding window).
    """
    if generated.shape != target.shape:
        raise ValueError(f"shape mismatch {tuple(generated.shape)} vs {tuple(target.shape)}")
    if generated.numel() < 2:
        raise ValueError("need at least 2 voxels")
    if constants is None:
        constants = default_ssim_constants(target.detach())
    if generated.ndim <= 3:
        return 1.0 - _ssim_single(generated.reshape(-1), target.reshape(-1), constants)
    b = generated.shape[0]
    losses = [
        1.0 - _ssim_single(generated[i].reshape(-1), target[i].reshape(-1), constants)
        for i in range(b)
    ]
    return torch.stack(losses).mean()


def generator_target(full_volume: MultiModalVolume, pattern: PatternMask) -> np.ndarray:
    """Voxel-wise mean of the modalities missing under `pattern`.

    Requires all four acquired modalities (training-time supervision). When
    nothing is missing the target falls back to the mean of all four, so the
    generation loss stays defined in every batch.
    """
    if not all(full_volume.availability.present):
        missing = [
            ACQUIRED_MODALITIES[i].value
            for i in full_volume.availability.missing_indices()
        ]
        raise SupervisionError(
            f"generator target needs all 4 modalities; subject lacks {missing}"
        )
    indices = pattern.missing_indices() or tuple(range(4))
    stack = np.stack([full_volume.get(ACQUIRED_MODALITIES[i]) for i in indices])
    return stack.mean(axis=0).astype(np.float32)


@dataclass
class LossReport:
    """Per-step loss decomposition; total = seg + lam*gen + eta*cc."""

    seg: float
    gen: float
    cc: float
    total: float
    lam: float
    eta: float

    def as_dict(self) -> dict[str, float]:
        return {
            "seg": self.seg,
            "gen": self.gen,
            "cc": self.cc,
            "total": self.total,
            "lam": self.lam,
            "eta": self.eta,
        }


def total_loss(seg, gen, cc, lam: float = 0.1, eta: float = 0.1):
    """Weighted hybrid objective.

    Accepts floats or 0-dim tensors; returns (total, LossReport) with the
    total preserving tensor-ness so it can be backpropagated.
    """
    def as_float(value):
        return float(value.detach() if isinstance(value, torch.Tensor) else value)

    for name, value in (("seg", seg), ("gen", gen), ("cc", cc)):
        if not np.isfinite(as_float(value)):
            raise NumericError(f"non-finite {name} loss component: {as_float(value)}")
    total = seg + lam * gen + eta * cc
    report = LossReport(
        seg=as_float(seg),
        gen=as_float(gen),
        cc=as_float(cc),
        total=as_float(total),
        lam=lam,
        eta=eta,
    )
    return total, report
