"""Exception types raised across the package."""


class MmbtsError(Exception):
    """Base class for all package errors."""


class FormatError(MmbtsError):
    """Subject directory or sidecar header is malformed or missing."""


class IntegrityError(MmbtsError):
    """Loaded data violates a structural invariant (shapes, label codes)."""


class NormalizationError(MmbtsError):
    """Z-score normalization is undefined (no brain voxels or zero std)."""


class AvailabilityError(MmbtsError):
    """A requested modality is not available for the subject."""


class SupervisionError(MmbtsError):
    """Training-time supervision requires data the subject lacks."""


class PhantomSpecError(MmbtsError):
    """Phantom specification is unsatisfiable (e.g. tumor larger than volume)."""


class ConfigError(MmbtsError):
    """Invalid network or run configuration."""


class StatisticsError(MmbtsError):
    """Too few samples to compute the requested statistic."""


class OracleError(MmbtsError):
    """A brute-force oracle was invoked outside its size cap."""


class NumericError(MmbtsError):
    """A computation produced or received NaN/Inf."""


class CheckpointError(MmbtsError):
    """Checkpoint file is missing or inconsistent with the configuration."""
