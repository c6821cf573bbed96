"""Full and partial label maps, and simulated partial annotation.

A label map stores one uint8 per voxel; ``UNLABELLED`` (255) marks voxels
without an annotation.  Two partial-annotation strategies are provided:
slicewise subsampling of a full map, and synthetic scribbles for phantom
testing (real scribble maps are ingested as ordinary label maps).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .volume import check_shape, check_spacing

__all__ = [
    "UNLABELLED",
    "MAX_LABELS",
    "AXES",
    "LabelVolume",
    "SlicewiseConfig",
    "AnnotationReport",
    "check_label_count",
    "slice_period",
    "random_offset",
    "subsample_slicewise",
    "coverage",
    "validate_annotation",
    "synthetic_scribbles",
]

UNLABELLED = 255
MAX_LABELS = 254
AXES = {"x": 0, "y": 1, "z": 2}


def check_label_count(n_labels: int) -> int:
    n_labels = int(n_labels)
    if not 2 <= n_labels <= MAX_LABELS:
        raise ValueError(f"label count must be in [2, {MAX_LABELS}], got {n_labels}")
    return n_labels


@dataclass(frozen=True, eq=False)
class LabelVolume:
    """Integer label field; values are labels ``0..L-1`` or ``UNLABELLED``."""

    labels: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        arr = np.asarray(self.labels)
        if arr.dtype != np.uint8:
            if arr.size and (arr.min() < 0 or arr.max() > 255):
                raise ValueError("label values must fit in 0..255")
            arr = arr.astype(np.uint8)
        check_shape(arr.shape)
        arr = arr.copy()
        arr.setflags(write=False)
        object.__setattr__(self, "labels", arr)
        object.__setattr__(self, "spacing", check_spacing(self.spacing))

    @property
    def shape(self):
        return self.labels.shape

    @property
    def annotated(self) -> np.ndarray:
        return self.labels != UNLABELLED


def slice_period(q: float) -> int:
    """Spacing between retained slices: ``round(1/q)``, halves away from zero."""
    if not 0 < q <= 1:
        raise ValueError(f"slice proportion q must be in (0, 1], got {q}")
    return max(1, int(math.floor(1.0 / q + 0.5)))


@dataclass(frozen=True)
class SlicewiseConfig:
    q: float
    axis: str = "z"
    offset: int = 0
    seed: int | None = None

    def __post_init__(self):
        if self.axis not in AXES:
            raise ValueError(f"axis must be one of x/y/z, got {self.axis!r}")
        period = slice_period(self.q)
        if not 0 <= self.offset < period:
            raise ValueError(f"offset {self.offset} outside [0, {period}) for q={self.q}")

    @property
    def period(self) -> int:
        return slice_period(self.q)


def random_offset(period: int, seed: int, draw: int = 0) -> int:
    """Uniform offset in ``[0, period)``; deterministic in ``(seed, draw)``."""
    if period < 1:
        raise ValueError(f"period must be >= 1, got {period}")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), int(draw)]))
    return int(rng.integers(period))


def subsample_slicewise(full: LabelVolume, cfg: SlicewiseConfig) -> LabelVolume:
    """Keep every ``period``-th slice along ``cfg.axis`` starting at ``cfg.offset``.

    The input must be fully annotated; all other slices become ``UNLABELLED``.
    """
    if not np.all(full.annotated):
        raise ValueError("slicewise subsampling expects a fully annotated label map")
    ax = AXES[cfg.axis]
    keep = (np.arange(full.shape[ax]) - cfg.offset) % cfg.period == 0
    out = np.full(full.shape, UNLABELLED, dtype=np.uint8)
    idx = [slice(None)] * 3
    idx[ax] = keep
    out[tuple(idx)] = full.labels[tuple(idx)]
    return LabelVolume(out, full.spacing)


def coverage(p: LabelVolume) -> float:
    return float(np.count_nonzero(p.annotated)) / p.labels.size


@dataclass
class AnnotationReport:
    coverage: float
    label_counts: dict[int, int]
    defects: dict[int, int] = field(default_factory=dict)

    @property
    def valid(self) -> bool:
        return not self.defects

    def to_dict(self):
        return {
            "valid": self.valid,
            "coverage": self.coverage,
            "label_counts": {str(k): v for k, v in self.label_counts.items()},
            "defects": {str(k): v for k, v in self.defects.items()},
        }


def validate_annotation(p: LabelVolume, n_labels: int) -> AnnotationReport:
    """Check every value is a label below ``n_labels`` or the sentinel.

    ``defects`` maps each offending value to its voxel count.
    """
    n_labels = check_label_count(n_labels)
    values, counts = np.unique(p.labels, return_counts=True)
    label_counts = {l: 0 for l in range(n_labels)}
    defects = {}
    for v, c in zip(values.tolist(), counts.tolist()):
        if v == UNLABELLED:
            continue
        if v < n_labels:
            label_counts[v] = c
        else:
            defects[v] = c
    return AnnotationReport(coverage(p), label_counts, defects)


def synthetic_scribbles(
    full: LabelVolume,
    radius: int = 1,
    keep_fraction: float = 0.3,
    seed: int = 0,
    in_plane: bool = True,
) -> LabelVolume:
    """Scribble-like partial map for phantom testing.

    Each label region is eroded by ``radius`` voxels (within x-y planes when
    ``in_plane``), then a random ``keep_fraction`` of the surviving interior
    is kept.  Boundaries are therefore never annotated.
    """
    if not 0 < keep_fraction <= 1:
        raise ValueError(f"keep_fraction must be in (0, 1], got {keep_fraction}")
    if radius < 0:
        raise ValueError("radius must be non-negative")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x5C81]))
    if in_plane:
        struct = np.zeros((3, 3, 3), dtype=bool)
        struct[:, :, 1] = ndimage.generate_binary_structure(2, 1)
    else:
        struct = ndimage.generate_binary_structure(3, 1)
    out = np.full(full.shape, UNLABELLED, dtype=np.uint8)
    keep = rng.random(full.shape) < keep_fraction
    for lab in np.unique(full.labels[full.annotated]).tolist():
        region = full.labels == lab
        if radius > 0:
            region = ndimage.binary_erosion(region, struct, iterations=radius, border_value=1)
        out[region & keep] = lab
    return LabelVolume(out, full.spacing)
