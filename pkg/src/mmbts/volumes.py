"""Multi-modal 3D volume data model, file IO, preprocessing, and phantoms.

Subject directory layout (all multi-byte values little-endian):

    <id>/flair.f32  t1.f32  t1c.f32  t2.f32   raw float32, C-order (D, H, W)
    <id>/labels.u8                            raw uint8, same order
    <id>/header.json                          shape, voxel_size_mm, modalities,
                                              label_codes

The phantom generator builds desk-scale stand-ins for real acquisitions:
smooth latent tissue fields mixed linearly into four modalities, with nested
ellipsoidal tumor structures providing the labels. Linear mixing guarantees a
strong cross-modality intensity correlation by construction.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from scipy.ndimage import gaussian_filter

from .dropout import PatternMask
from .errors import (
    FormatError,
    IntegrityError,
    NormalizationError,
    PhantomSpecError,
)

VALID_LABEL_CODES = (0, 1, 2, 4)


class Modality(enum.Enum):
    """MR sequences of one subject; M5 is the generated surrogate modality."""

    FLAIR = "flair"
    T1 = "t1"
    T1C = "t1c"
    T2 = "t2"
    M5 = "m5"


ACQUIRED_MODALITIES = (Modality.FLAIR, Modality.T1, Modality.T1C, Modality.T2)


class Region(enum.Enum):
    """Nested evaluation regions: whole tumor, tumor core, enhancing tumor."""

    WT = "WT"
    TC = "TC"
    ET = "ET"


# Label codes contributing to each region; WT ⊇ TC ⊇ ET.
REGION_CODES = {
    Region.WT: (1, 2, 4),
    Region.TC: (1, 4),
    Region.ET: (4,),
}


@dataclass
class MultiModalVolume:
    """Co-registered per-modality intensity volumes with an availability pattern."""

    volumes: dict[Modality, np.ndarray]
    availability: PatternMask
    subject_id: str = ""
    voxel_size_mm: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        shapes = {v.shape for v in self.volumes.values()}
        if len(shapes) > 1:
            raise IntegrityError(f"modality volumes disagree on shape: {sorted(shapes)}")
        for idx, modality in enumerate(ACQUIRED_MODALITIES):
            if self.availability.present[idx] and modality not in self.volumes:
                raise IntegrityError(f"availability marks {modality.value} present but no volume given")

    @property
    def shape(self) -> tuple[int, int, int]:
        return next(iter(self.volumes.values())).shape

    def get(self, modality: Modality) -> np.ndarray:
        return self.volumes[modality]


def validate_labels(labels: np.ndarray) -> None:
    codes = np.unique(labels)
    bad = set(codes.tolist()) - set(VALID_LABEL_CODES)
    if bad:
        raise IntegrityError(f"unknown label codes {sorted(bad)}; expected subset of {VALID_LABEL_CODES}")


def labels_to_regions(labels: np.ndarray) -> dict[Region, np.ndarray]:
    """Group a labelmap into the three nested binary region masks."""
    validate_labels(labels)
    return {
        region: np.isin(labels, codes)
        for region, codes in REGION_CODES.items()
    }


# ---------------------------------------------------------------------------
# File IO
# ---------------------------------------------------------------------------

def save_subject(volume: MultiModalVolume, labels: np.ndarray | None, path: str | Path) -> None:
    """Write a subject directory; load_subject inverts this bit-exactly."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    present = []
    for idx, modality in enumerate(ACQUIRED_MODALITIES):
        if not volume.availability.present[idx]:
            continue
        arr = np.ascontiguousarray(volume.volumes[modality], dtype="<f4")
        arr.tofile(path / f"{modality.value}.f32")
        present.append(modality.value)
    if labels is not None:
        validate_labels(labels)
        if labels.shape != volume.shape:
            raise IntegrityError(f"labels shape {labels.shape} != volume shape {volume.shape}")
        np.ascontiguousarray(labels, dtype=np.uint8).tofile(path / "labels.u8")
    header = {
        "shape": list(volume.shape),
        "voxel_size_mm": list(volume.voxel_size_mm),
        "modalities": present,
        "label_codes": list(VALID_LABEL_CODES),
    }
    (path / "header.json").write_text(json.dumps(header, indent=2))


def load_subject(path: str | Path) -> tuple[MultiModalVolume, np.ndarray | None]:
    """Read a subject directory written by save_subject.

    Availability reflects which modality files exist on disk. Labels are
    returned as None when absent.
    """
    path = Path(path)
    header_path = path / "header.json"
    if not header_path.is_file():
        raise FormatError(f"missing sidecar header {header_path}")
    try:
        header = json.loads(header_path.read_text())
        shape = tuple(int(s) for s in header["shape"])
        voxel_size = tuple(float(v) for v in header["voxel_size_mm"])
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"malformed header {header_path}: {exc}") from exc
    if len(shape) != 3 or any(s <= 0 for s in shape):
        raise FormatError(f"header shape must be 3 positive ints, got {shape}")

    n_voxels = int(np.prod(shape))
    volumes: dict[Modality, np.ndarray] = {}
    present = []
    for modality in ACQUIRED_MODALITIES:
        f = path / f"{modality.value}.f32"
        if not f.is_file():
            present.append(False)
            continue
        raw = np.fromfile(f, dtype="<f4")
        if raw.size != n_voxels:
            raise IntegrityError(
                f"{f.name}: {raw.size} voxels on disk, header says {n_voxels}"
            )
        volumes[modality] = raw.reshape(shape)
        present.append(True)

    labels = None
    labels_path = path / "labels.u8"
    if labels_path.is_file():
        raw = np.fromfile(labels_path, dtype=np.uint8)
        if raw.size != n_voxels:
            raise IntegrityError(f"labels.u8: {raw.size} voxels on disk, header says {n_voxels}")
        labels = raw.reshape(shape)
        validate_labels(labels)

    volume = MultiModalVolume(
        volumes=volumes,
        availability=PatternMask(tuple(present)),
        subject_id=path.name,
        voxel_size_mm=voxel_size,
    )
    return volume, labels


# ---------------------------------------------------------------------------
# Preprocessing
# ---------------------------------------------------------------------------

def _resample(arr: np.ndarray, target_shape: tuple[int, int, int], mode: str) -> np.ndarray:
    t = torch.from_numpy(np.ascontiguousarray(arr, dtype=np.float32))[None, None]
    if mode == "trilinear":
        out = F.interpolate(t, size=target_shape, mode="trilinear", align_corners=False)
    else:
        out = F.interpolate(t, size=target_shape, mode="nearest")
    return out[0, 0].numpy()


def zscore_nonzero(arr: np.ndarray) -> np.ndarray:
    """Normalize to zero mean / unit std over nonzero (brain) voxels.

    Background stays exactly zero. Raises NormalizationError when the brain
    mask is empty or has zero intensity spread.
    """
    mask = arr != 0
    n = int(mask.sum())
    if n < 2:
        raise NormalizationError("fewer than 2 nonzero voxels; cannot normalize")
    vals = arr[mask].astype(np.float64)
    mu = vals.mean()
    sd = vals.std()
    if sd < 1e-12:
        raise NormalizationError("zero standard deviation over nonzero voxels")
    out = np.zeros_like(arr, dtype=np.float32)
    out[mask] = ((vals - mu) / sd).astype(np.float32)
    return out


def preprocess(
    volume: MultiModalVolume,
    labels: np.ndarray | None,
    target_shape: tuple[int, int, int],
) -> tuple[MultiModalVolume, np.ndarray | None]:
    """Resample to target_shape (trilinear images, nearest labels), then z-score.

    Intensity statistics use nonzero voxels only, keeping the skull-stripped
    background at zero.
    """
    target_shape = tuple(int(s) for s in target_shape)
    if len(target_shape) != 3 or any(s <= 0 for s in target_shape):
        raise ValueError(f"target shape must be 3 positive ints, got {target_shape}")

    new_volumes = {}
    for modality, arr in volume.volumes.items():
        resized = arr if arr.shape == target_shape else _resample(arr, target_shape, "trilinear")
        new_volumes[modality] = zscore_nonzero(resized)

    new_labels = None
    if labels is not None:
        validate_labels(labels)
        if labels.shape == target_shape:
            new_labels = labels.copy()
        else:
            new_labels = _resample(labels, target_shape, "nearest").astype(labels.dtype)

    scale = [o / t for o, t in zip(volume.shape, target_shape)]
    new_voxel = tuple(v * s for v, s in zip(volume.voxel_size_mm, scale))
    out = replace(volume, volumes=new_volumes, voxel_size_mm=new_voxel)
    return out, new_labels


# ---------------------------------------------------------------------------
# Synthetic phantoms
# ---------------------------------------------------------------------------

def default_mixing(latent_count: int = 3) -> np.ndarray:
    """Default modality-by-latent mixing matrix.

    Rows loosely mirror clinical contrast: FLAIR/T2 weight the edema-carrying
    latent, T1/T1c weight the core latent, T1c the enhancing latent.
    """
    full = np.array(
        [
            [1.0, 0.3, 0.1],   # FLAIR
            [0.3, 0.9, 0.2],   # T1
            [0.2, 0.7, 1.0],   # T1c
            [0.9, 0.2, 0.4],   # T2
        ]
    )
    if latent_count == 3:
        return full
    if latent_count == 1:
        return np.array([[1.0], [0.6], [0.3], [0.9]])
    if latent_count == 2:
        return full[:, :2].copy()
    raise ValueError(f"no default mixing for latent_count={latent_count}")


@dataclass
class PhantomSpec:
    """Parameters of a synthetic correlated multi-modal subject."""

    shape: tuple[int, int, int] = (32, 32, 32)
    tumor_count: int = 1
    tumor_radius: tuple[float, float] = (6.0, 10.0)
    latent_count: int = 3
    mixing: np.ndarray | None = None
    noise_sigma: float = 0.05
    seed: int = 0

    def __post_init__(self):
        self.shape = tuple(int(s) for s in self.shape)
        if self.mixing is None:
            self.mixing = default_mixing(self.latent_count)
        self.mixing = np.asarray(self.mixing, dtype=np.float64)
        if self.mixing.shape != (len(ACQUIRED_MODALITIES), self.latent_count):
            raise PhantomSpecError(
                f"mixing must be {len(ACQUIRED_MODALITIES)}x{self.latent_count}, got {self.mixing.shape}"
            )
        rows = {tuple(row) for row in self.mixing.round(12)}
        if len(rows) != len(ACQUIRED_MODALITIES):
            raise PhantomSpecError("mixing matrix rows must be distinct")
        if self.noise_sigma < 0:
            raise PhantomSpecError("noise sigma must be >= 0")
        if self.tumor_radius[0] > self.tumor_radius[1] or self.tumor_radius[0] <= 0:
            raise PhantomSpecError(f"bad tumor radius range {self.tumor_radius}")
        if 2 * self.tumor_radius[1] >= min(self.shape):
            raise PhantomSpecError(
                f"tumor radius {self.tumor_radius[1]} does not fit in shape {self.shape}"
            )


def _ellipsoid_mask(shape, center, radii) -> np.ndarray:
    grids = np.ogrid[tuple(slice(0, s) for s in shape)]
    acc = np.zeros(shape, dtype=np.float64)
    for g, c, r in zip(grids, center, radii):
        acc = acc + ((g - c) / r) ** 2
    return acc <= 1.0


# Additive tumor contrast per region: (latent slot, amplitude). The slot is
# taken modulo latent_count so single-latent phantoms stay exactly linear.
_TUMOR_BUMPS = {
    Region.WT: (0, 2.5),
    Region.TC: (1, 3.0),
    Region.ET: (2, 4.0),
}


def generate_phantom(
    spec: PhantomSpec, rng: np.random.Generator | None = None
) -> tuple[MultiModalVolume, np.ndarray]:
    """Build one synthetic subject: correlated modalities plus a labelmap.

    Latent tissue maps are smooth random fields carrying nested ellipsoidal
    tumor bumps; each modality is a fixed linear mix of the latents plus
    Gaussian noise inside the brain mask. Deterministic given (spec, rng).
    """
    if rng is None:
        rng = np.random.default_rng(spec.seed)
    shape = spec.shape

    # Brain mask: centered ellipsoid covering most of the volume.
    center = [(s - 1) / 2.0 for s in shape]
    brain = _ellipsoid_mask(shape, center, [0.46 * s for s in shape])

    latents = []
    for _ in range(spec.latent_count):
        noise = rng.standard_normal(shape)
        smooth = gaussian_filter(noise, sigma=[s / 10.0 for s in shape])
        smooth = smooth / max(smooth.std(), 1e-9)
        latents.append(1.5 + 0.4 * smooth)
    latents = np.stack(latents)

    labels = np.zeros(shape, dtype=np.uint8)
    for _ in range(spec.tumor_count):
        r_wt = rng.uniform(*spec.tumor_radius)
        anis = rng.uniform(0.75, 1.25, size=3)
        radii_wt = np.minimum(r_wt * anis, [0.45 * s - 1 for s in shape])
        lo = [radii_wt[a] + 1 for a in range(3)]
        hi = [shape[a] - radii_wt[a] - 1 for a in range(3)]
        tumor_center = [rng.uniform(l, h) for l, h in zip(lo, hi)]
        wt = _ellipsoid_mask(shape, tumor_center, radii_wt) & brain
        tc = _ellipsoid_mask(shape, tumor_center, radii_wt * 0.68) & brain
        et = _ellipsoid_mask(shape, tumor_center, radii_wt * 0.42) & brain
        labels[wt] = 2
        labels[tc] = 1
        labels[et] = 4
        for region, mask in ((Region.WT, wt), (Region.TC, tc), (Region.ET, et)):
            slot, amp = _TUMOR_BUMPS[region]
            latents[slot % spec.latent_count][mask] += amp

    volumes = {}
    for m_idx, modality in enumerate(ACQUIRED_MODALITIES):
        img = np.tensordot(spec.mixing[m_idx], latents, axes=1)
        if spec.noise_sigma > 0:
            img = img + rng.normal(0.0, spec.noise_sigma, size=shape)
        img[~brain] = 0.0
        volumes[modality] = img.astype(np.float32)

    volume = MultiModalVolume(
        volumes=volumes,
        availability=PatternMask.full(),
        subject_id=f"phantom-{spec.seed}",
    )
    return volume, labels
