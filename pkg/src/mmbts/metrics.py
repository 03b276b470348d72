"""Volumetric segmentation metrics and per-pattern result tables.

Dice follows 2TP / (2TP + FP + FN) with the empty-mask conventions
documented on dice_score. Hausdorff distance is the outer max of the two
directed max-min Euclidean distances between 6-connectivity surface voxel
sets, in millimetres. The accelerated implementation is exactly equal to the
all-pairs brute-force oracle (same scaled coordinates, same arithmetic).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import binary_erosion, generate_binary_structure

from .dropout import PatternMask, enumerate_patterns
from .errors import OracleError
from .volumes import Region, labels_to_regions

BRUTEFORCE_MAX_VOXELS = 16 ** 3

# Undefined Hausdorff (an empty surface) is carried as NaN and shown as
# missing in tables.
UNDEFINED_HD = math.nan


def dice_score(pred: np.ndarray, gt: np.ndarray) -> float:
    """Overlap 2TP/(2TP+FP+FN); 1.0 when both masks are empty, 0.0 when
    exactly one is."""
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    pred = pred.astype(bool)
    gt = gt.astype(bool)
    p, g = int(pred.sum()), int(gt.sum())
    if p == 0 and g == 0:
        return 1.0
    if p == 0 or g == 0:
        return 0.0
    tp = int((pred & gt).sum())
    return 2.0 * tp / (p + g)


def extract_surface(mask: np.ndarray) -> np.ndarray:
    """Voxel coordinates (N, 3) of foreground voxels touching background or
    the volume border through a 6-connected face."""
    mask = mask.astype(bool)
    if not mask.any():
        return np.zeros((0, 3), dtype=np.int64)
    structure = generate_binary_structure(3, 1)
    interior = binary_erosion(mask, structure=structure, border_value=0)
    return np.argwhere(mask & ~interior)


def _directed_max_min(a: np.ndarray, b: np.ndarray) -> float:
    """max over a of min over b of Euclidean distance, on pre-scaled points."""
    worst = 0.0
    # chunk a to bound the (chunk x |b|) distance matrix
    chunk = max(1, int(2 ** 21 // max(1, len(b))))
    for start in range(0, len(a), chunk):
        block = a[start : start + chunk]
        d2 = ((block[:, None, :] - b[None, :, :]) ** 2).sum(axis=-1)
        worst = max(worst, float(np.sqrt(d2.min(axis=1)).max()))
    return worst


def _scaled_surfaces(pred, gt, spacing):
    spacing = np.asarray(spacing, dtype=np.float64)
    s = extract_surface(pred).astype(np.float64) * spacing
    r = extract_surface(gt).astype(np.float64) * spacing
    return s, r


def hausdorff(pred: np.ndarray, gt: np.ndarray, spacing=(1.0, 1.0, 1.0)) -> float:
    """Symmetric Hausdorff distance between surface point sets, in mm.

    Returns NaN when either surface is empty (undefined metric).
    """
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    s, r = _scaled_surfaces(pred, gt, spacing)
    if len(s) == 0 or len(r) == 0:
        return UNDEFINED_HD
    return max(_directed_max_min(s, r), _directed_max_min(r, s))


def hausdorff_bruteforce(pred: np.ndarray, gt: np.ndarray, spacing=(1.0, 1.0, 1.0)) -> float:
    """Literal all-pairs oracle for hausdorff; capped at 16^3-voxel masks."""
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    if pred.size > BRUTEFORCE_MAX_VOXELS:
        raise OracleError(f"mask of {pred.size} voxels exceeds the 16^3 oracle cap")
    s, r = _scaled_surfaces(pred, gt, spacing)
    if len(s) == 0 or len(r) == 0:
        return UNDEFINED_HD

    def directed(points_a, points_b):
        worst = 0.0
        for pa in points_a:
            best = math.inf
            for pb in points_b:
                d = np.sqrt((pa[0] - pb[0]) ** 2 + (pa[1] - pb[1]) ** 2 + (pa[2] - pb[2]) ** 2)
                if d < best:
                    best = d
            if best > worst:
                worst = best
        return float(worst)

    return max(directed(s, r), directed(r, s))


# ---------------------------------------------------------------------------
# Per-pattern evaluation tables
# ---------------------------------------------------------------------------

REGIONS = (Region.WT, Region.TC, Region.ET)


@dataclass
class PatternResult:
    pattern: PatternMask
    dsc: dict[Region, float] = field(default_factory=dict)
    hd: dict[Region, float] = field(default_factory=dict)

    def avg_dsc(self) -> float:
        return float(np.mean([self.dsc[r] for r in REGIONS]))

    def avg_hd(self) -> float:
        vals = [self.hd[r] for r in REGIONS]
        return float(np.nanmean(vals)) if not all(math.isnan(v) for v in vals) else math.nan


@dataclass
class ResultTable:
    """15 pattern rows of per-region mean DSC/HD plus derived averages."""

    rows: list[PatternResult]
    name: str = ""

    def row(self, pattern: PatternMask) -> PatternResult:
        for r in self.rows:
            if r.pattern == pattern:
                return r
        raise KeyError(f"no row for pattern {pattern.bullets()}")

    def region_average(self, region: Region, metric: str = "dsc") -> float:
        vals = [getattr(r, metric)[region] for r in self.rows]
        vals = [v for v in vals if not math.isnan(v)]
        return float(np.mean(vals)) if vals else math.nan

    def mean_avg(self, metric: str = "dsc") -> float:
        """The bottom-right cell: mean over regions of the Average row."""
        return float(np.mean([self.region_average(r, metric) for r in REGIONS]))

    def to_csv(self, path: str | Path) -> Path:
        path = Path(path)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["pattern", "region", "dsc", "hd"])
            for row in self.rows:
                for region in REGIONS:
                    hd = row.hd[region]
                    writer.writerow(
                        [
                            row.pattern.to_int(),
                            region.value,
                            f"{row.dsc[region]:.6f}",
                            "" if math.isnan(hd) else f"{hd:.6f}",
                        ]
                    )
        return path

    @classmethod
    def from_csv(cls, path: str | Path, name: str = "") -> "ResultTable":
        path = Path(path)
        by_pattern: dict[int, PatternResult] = {}
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            for rec in reader:
                code = int(rec["pattern"])
                if code not in by_pattern:
                    by_pattern[code] = PatternResult(PatternMask.from_int(code))
                region = Region(rec["region"])
                by_pattern[code].dsc[region] = float(rec["dsc"])
                by_pattern[code].hd[region] = float(rec["hd"]) if rec["hd"] else math.nan
        rows = [
            by_pattern[p.to_int()] for p in enumerate_patterns() if p.to_int() in by_pattern
        ]
        return cls(rows=rows, name=name or path.stem)

    def format_text(self, metric: str = "dsc") -> str:
        scale = 100.0 if metric == "dsc" else 1.0
        lines = [
            f"{self.name or 'results'} ({metric.upper()})",
            "F  T1 T1c T2 |    WT    TC    ET   AVG",
        ]

        def fmt(v):
            return "    -" if math.isnan(v) else f"{v * scale:5.1f}"

        for row in self.rows:
            cells = "".join(
                " • " if p else " ◦ " for p in row.pattern.present
            )
            vals = [getattr(row, metric)[r] for r in REGIONS]
            avg = row.avg_dsc() if metric == "dsc" else row.avg_hd()
            lines.append(f"{cells}| {fmt(vals[0])} {fmt(vals[1])} {fmt(vals[2])} {fmt(avg)}")
        avgs = [self.region_average(r, metric) for r in REGIONS]
        overall = self.mean_avg(metric)
        lines.append(
            f"  Average   | {fmt(avgs[0])} {fmt(avgs[1])} {fmt(avgs[2])} {fmt(overall)}"
        )
        return "\n".join(lines)


def evaluate_patterns(
    predict,
    subjects,
    patterns: list[PatternMask] | None = None,
    spacing=(1.0, 1.0, 1.0),
    name: str = "",
) -> ResultTable:
    """Evaluate a predictor over every availability pattern.

    `predict(volume, pattern) -> labelmap` runs inference with the given
    availability; `subjects` is a sequence of (MultiModalVolume, labels).
    Per pattern and region, DSC/HD are averaged over subjects; subjects with
    an undefined HD are skipped in that mean.
    """
    if patterns is None:
        patterns = enumerate_patterns()
    subjects = list(subjects)
    if not subjects:
        raise ValueError("empty dataset")
    rows = []
    for pattern in patterns:
        dsc_acc = {r: [] for r in REGIONS}
        hd_acc = {r: [] for r in REGIONS}
        for volume, labels in subjects:
            pred_labels = predict(volume, pattern)
            pred_regions = labels_to_regions(pred_labels)
            gt_regions = labels_to_regions(labels)
            for region in REGIONS:
                dsc_acc[region].append(dice_score(pred_regions[region], gt_regions[region]))
                hd_acc[region].append(hausdorff(pred_regions[region], gt_regions[region], spacing))
        row = PatternResult(pattern)
        for region in REGIONS:
            row.dsc[region] = float(np.mean(dsc_acc[region]))
            defined = [v for v in hd_acc[region] if not math.isnan(v)]
            row.hd[region] = float(np.mean(defined)) if defined else math.nan
        rows.append(row)
    return ResultTable(rows=rows, name=name)
