"""Modality availability patterns and modality-dropout sampling.

A pattern is one of the 15 non-empty subsets of (FLAIR, T1, T1c, T2).
Training draws patterns uniformly so the network sees every availability
situation; evaluation iterates the canonical row order used in reports.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np

from .errors import AvailabilityError

if TYPE_CHECKING:
    from .volumes import MultiModalVolume

MODALITY_NAMES = ("flair", "t1", "t1c", "t2")

PRESENT_CHAR = "•"  # filled bullet
MISSING_CHAR = "◦"  # open bullet


@dataclass(frozen=True)
class PatternMask:
    """Which of the four acquired modalities are present, ordered (FLAIR, T1, T1c, T2)."""

    present: tuple[bool, bool, bool, bool]

    def __post_init__(self):
        if len(self.present) != 4:
            raise ValueError("pattern needs exactly 4 entries")
        if not any(self.present):
            raise ValueError("empty pattern: at least one modality must be present")

    @classmethod
    def from_int(cls, value: int) -> "PatternMask":
        """Decode a 4-bit integer, FLAIR as the most significant bit."""
        if not 1 <= value <= 15:
            raise ValueError(f"pattern integer must be in [1, 15], got {value}")
        bits = tuple(bool((value >> shift) & 1) for shift in (3, 2, 1, 0))
        return cls(bits)

    @classmethod
    def from_bullets(cls, text: str) -> "PatternMask":
        if len(text) != 4 or any(c not in (PRESENT_CHAR, MISSING_CHAR) for c in text):
            raise ValueError(f"bad pattern string {text!r}")
        return cls(tuple(c == PRESENT_CHAR for c in text))

    @classmethod
    def full(cls) -> "PatternMask":
        return cls((True, True, True, True))

    def to_int(self) -> int:
        return sum(int(p) << shift for p, shift in zip(self.present, (3, 2, 1, 0)))

    def bullets(self) -> str:
        return "".join(PRESENT_CHAR if p else MISSING_CHAR for p in self.present)

    def present_indices(self) -> tuple[int, ...]:
        return tuple(i for i, p in enumerate(self.present) if p)

    def missing_indices(self) -> tuple[int, ...]:
        return tuple(i for i, p in enumerate(self.present) if not p)

    def count(self) -> int:
        return sum(self.present)


# Row order of the standard 15-pattern report: single modalities T2, T1c, T1,
# FLAIR first, then pairs, triples, and the full set last.
_CANONICAL_ROWS = (
    (0, 0, 0, 1),
    (0, 0, 1, 0),
    (0, 1, 0, 0),
    (1, 0, 0, 0),
    (0, 0, 1, 1),
    (0, 1, 1, 0),
    (1, 1, 0, 0),
    (0, 1, 0, 1),
    (1, 0, 0, 1),
    (1, 0, 1, 0),
    (1, 1, 1, 0),
    (1, 1, 0, 1),
    (1, 0, 1, 1),
    (0, 1, 1, 1),
    (1, 1, 1, 1),
)


def enumerate_patterns() -> list[PatternMask]:
    """All 15 non-empty patterns in canonical report row order."""
    return [PatternMask(tuple(bool(b) for b in row)) for row in _CANONICAL_ROWS]


def sample_pattern(rng: np.random.Generator) -> PatternMask:
    """Draw one pattern uniformly from the 15 valid ones."""
    patterns = enumerate_patterns()
    return patterns[int(rng.integers(len(patterns)))]


def apply_pattern(volume: "MultiModalVolume", pattern: PatternMask) -> "MultiModalVolume":
    """Zero out the volumes of modalities absent under `pattern`.

    Present modalities are passed through untouched (same arrays), so applying
    the same pattern twice is a no-op. Raises AvailabilityError if the pattern
    requires a modality the subject does not have.
    """
    from .volumes import ACQUIRED_MODALITIES

    new_volumes = {}
    for idx, modality in enumerate(ACQUIRED_MODALITIES):
        if pattern.present[idx]:
            if not volume.availability.present[idx]:
                raise AvailabilityError(
                    f"pattern requires {modality.value} but subject "
                    f"{volume.subject_id!r} lacks it"
                )
            new_volumes[modality] = volume.volumes[modality]
        else:
            new_volumes[modality] = np.zeros(volume.shape, dtype=np.float32)
    return dataclasses.replace(volume, volumes=new_volumes, availability=pattern)
