"""Multi-source correlation block: weight estimation, linear correlated
representations, and the KL-based correlation loss.

Modalities are indexed 0..4 (FLAIR, T1, T1c, T2, then the generated surrogate
last). Each modality's correlated representation is a per-channel weighted sum
of the *other four* modalities' bottleneck features plus a bias:

    F_i = alpha ⊙ f_j + beta ⊙ f_k + gamma ⊙ f_l + delta ⊙ f_m + sigma

with (j, k, l, m) the remaining indices in ascending order. The loss pushes
the softmax distribution of each original feature map toward the distribution
of its correlated reconstruction.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .errors import NumericError, StatisticsError

N_SOURCES = 5


@dataclass
class CorrelationParams:
    """Per-channel weight vectors and bias for one modality (length C each,
    or (B, C) when batched)."""

    alpha: torch.Tensor
    beta: torch.Tensor
    gamma: torch.Tensor
    delta: torch.Tensor
    sigma: torch.Tensor

    def weights(self) -> tuple[torch.Tensor, ...]:
        return (self.alpha, self.beta, self.gamma, self.delta)


def source_indices(i: int, count: int = N_SOURCES) -> tuple[int, ...]:
    """Ascending indices of all modalities except `i` (the canonical
    weight-to-source assignment)."""
    if not 0 <= i < count:
        raise ValueError(f"modality index {i} out of range 0..{count - 1}")
    return tuple(j for j in range(count) if j != i)


class Cpem(nn.Module):
    """Correlation parameter estimation: pooled bottleneck features through
    two fully connected layers onto (alpha, beta, gamma, delta, sigma)."""

    def __init__(self, channels: int):
        super().__init__()
        self.channels = channels
        self.fc1 = nn.Linear(channels, channels)
        self.act = nn.LeakyReLU(0.01)
        self.fc2 = nn.Linear(channels, 5 * channels)

    def forward(self, f: torch.Tensor) -> CorrelationParams:
        batched = f.ndim == 5
        if not batched:
            f = f.unsqueeze(0)
        if f.shape[1] != self.channels:
            raise ValueError(f"expected {self.channels} channels, got {f.shape[1]}")
        pooled = f.mean(dim=(2, 3, 4))
        out = self.fc2(self.act(self.fc1(pooled)))
        parts = out.split(self.channels, dim=1)
        if not batched:
            parts = [p.squeeze(0) for p in parts]
        return CorrelationParams(*parts)


def cpem_forward(cpem: Cpem, f: torch.Tensor) -> CorrelationParams:
    return cpem(f)


def _per_channel(w: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    """Broadcast a (C,) or (B, C) weight vector over spatial dims of `like`."""
    return w.reshape(w.shape + (1,) * (like.ndim - w.ndim))


def lcem_forward(params: CorrelationParams, sources) -> torch.Tensor:
    """Linear correlated representation from the other modalities' features.

    `sources` are the 4 bottleneck maps of the modalities != i in ascending
    index order, all sharing one shape.
    """
    sources = list(sources)
    if len(sources) != 4:
        raise ValueError(f"expected 4 source maps, got {len(sources)}")
    shapes = {tuple(s.shape) for s in sources}
    if len(shapes) != 1:
        raise ValueError(f"source maps disagree on shape: {sorted(shapes)}")
    out = _per_channel(params.sigma, sources[0]).expand_as(sources[0]).clone()
    for w, f in zip(params.weights(), sources):
        out = out + _per_channel(w, f) * f
    return out


def feature_to_distribution(f: torch.Tensor) -> torch.Tensor:
    """Softmax over the flattened map: strictly positive, sums to 1."""
    if torch.isnan(f).any():
        raise NumericError("NaN in feature map")
    return torch.softmax(f.reshape(-1), dim=0)


def _kl_flat(f: torch.Tensor, g: torch.Tensor) -> torch.Tensor:
    """KL(P(f) || Q(g)) with P, Q the softmax distributions of the flat maps."""
    log_p = torch.log_softmax(f, dim=-1)
    log_q = torch.log_softmax(g, dim=-1)
    return (log_p.exp() * (log_p - log_q)).sum(dim=-1)


def ccl_loss(originals, correlated, batched: bool = False) -> torch.Tensor:
    """Sum over modalities of KL(P(f_i) || Q(F_i)).

    With `batched`, the leading dim of every map indexes examples and the
    per-modality KL is averaged over them.
    """
    originals, correlated = list(originals), list(correlated)
    if len(originals) != len(correlated):
        raise ValueError("originals and correlated must pair up")
    total = None
    for f, g in zip(originals, correlated):
        if f.shape != g.shape:
            raise ValueError(f"shape mismatch {tuple(f.shape)} vs {tuple(g.shape)}")
        if torch.isnan(f).any() or torch.isnan(g).any():
            raise NumericError("NaN in correlation loss input")
        if batched:
            kl = _kl_flat(f.reshape(f.shape[0], -1), g.reshape(g.shape[0], -1)).mean()
        else:
            kl = _kl_flat(f.reshape(-1), g.reshape(-1))
        total = kl if total is None else total + kl
    if total is None:
        raise ValueError("no map pairs given")
    return total


# ---------------------------------------------------------------------------
# Joint intensity analysis
# ---------------------------------------------------------------------------

def joint_intensity_histogram(
    vol_a: np.ndarray, vol_b: np.ndarray, bins: int = 64
) -> tuple[np.ndarray, np.ndarray, np.ndarray, float]:
    """2D histogram of paired nonzero-voxel intensities plus their Pearson r.

    Returns (counts, edges_a, edges_b, r); counts[i, j] covers the i-th
    intensity bin of vol_a against the j-th of vol_b.
    """
    if vol_a.shape != vol_b.shape:
        raise ValueError(f"shape mismatch {vol_a.shape} vs {vol_b.shape}")
    if bins < 2:
        raise ValueError("need at least 2 bins")
    mask = (vol_a != 0) & (vol_b != 0)
    a = vol_a[mask].astype(np.float64)
    b = vol_b[mask].astype(np.float64)
    if a.size < 2:
        raise StatisticsError("fewer than 2 paired nonzero voxels")
    if a.std() == 0 or b.std() == 0:
        raise StatisticsError("zero intensity variance; correlation undefined")
    counts, edges_a, edges_b = np.histogram2d(a, b, bins=bins)
    r = float(np.corrcoef(a, b)[0, 1])
    return counts, edges_a, edges_b, r


def save_histogram(
    counts: np.ndarray,
    edges_a: np.ndarray,
    edges_b: np.ndarray,
    pearson_r: float,
    base_path: str | Path,
) -> tuple[Path, Path]:
    """Write the count matrix as CSV and a JSON record with bins/ranges/r."""
    base = Path(base_path)
    csv_path = base.with_suffix(".csv")
    json_path = base.with_suffix(".json")
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        for row in counts:
            writer.writerow([int(c) for c in row])
    record = {
        "bins": int(counts.shape[0]),
        "range_a": [float(edges_a[0]), float(edges_a[-1])],
        "range_b": [float(edges_b[0]), float(edges_b[-1])],
        "pearson_r": pearson_r,
    }
    json_path.write_text(json.dumps(record, indent=2))
    return csv_path, json_path
