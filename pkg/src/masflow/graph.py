"""Assembly of multi-image labelling problems.

Image 0 of every assembled problem is the target; atlases follow in the
order given.  Propagation edges are keyed by ``(i, j)`` with ``i < j`` and
iterated in sorted order.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .annotations import UNLABELLED, LabelVolume, check_label_count
from .volume import Volume, check_spacing
from .weighting import (
    LocalWeightConfig,
    RegularisationConfig,
    alpha_from_gradient,
    beta_locally_weighted,
    beta_uniform,
)

__all__ = [
    "Configuration",
    "GraphProblem",
    "LARGE_FACTOR",
    "default_large",
    "encode_data_term",
    "build_problem",
    "audit_problem",
]

LARGE_FACTOR = 1e4


class Configuration(str, enum.Enum):
    MAS_MV = "MAS_MV"
    MAS_LW = "MAS_LW"
    MASR_LW = "MASr_LW"
    CONF1 = "CONF1"
    CONF2 = "CONF2"

    @classmethod
    def parse(cls, name) -> "Configuration":
        if isinstance(name, cls):
            return name
        key = str(name).replace("-", "_")
        for member in cls:
            if member.value.lower() == key.lower():
                return member
        raise ValueError(f"unknown configuration {name!r}")


@dataclass
class GraphProblem:
    """Images, regularisation/propagation capacities and per-label data costs.

    ``costs[i]`` has shape ``(L, nx, ny, nz)``: the cost of giving each voxel
    of image ``i`` each label.  In the binary case ``costs[i][0]`` is the
    source capacity and ``costs[i][1]`` the sink capacity.
    """

    images: list
    n_labels: int
    alpha: list
    beta: dict
    costs: list
    large: float
    spacing: tuple = (1.0, 1.0, 1.0)
    target_index: int = 0
    annotations: list = field(default_factory=list)

    def __post_init__(self):
        self.n_labels = check_label_count(self.n_labels)
        self.spacing = check_spacing(self.spacing)
        shape = self.shape
        n = len(self.images)
        if n < 1:
            raise ValueError("a problem needs at least one image")
        if len(self.alpha) != n or len(self.costs) != n:
            raise ValueError("alpha and costs need one entry per image")
        for img in self.images:
            if img.shape != shape or img.spacing != self.spacing:
                raise ValueError("all images must share one grid")
        for a in self.alpha:
            if a is not None and (a.shape != shape or np.any(a < 0) or not np.all(np.isfinite(a))):
                raise ValueError("alpha fields must be finite, non-negative and on the image grid")
        for (i, j), b in self.beta.items():
            if not (0 <= i < j < n):
                raise ValueError(f"invalid edge {(i, j)} for {n} images")
            if b.shape != shape:
                raise ValueError(f"beta field for {(i, j)} has shape {b.shape}, expected {shape}")
            if np.any(b < 0) or not np.all(np.isfinite(b)):
                raise ValueError(f"beta field for {(i, j)} must be finite and non-negative")
        for c in self.costs:
            if c.shape != (self.n_labels,) + shape:
                raise ValueError(f"cost array has shape {c.shape}, expected {(self.n_labels,) + shape}")
            if np.any(c < 0) or not np.all(np.isfinite(c)):
                raise ValueError("capacities must be finite and non-negative")

    @property
    def shape(self):
        return self.images[0].shape

    @property
    def n_images(self) -> int:
        return len(self.images)

    @property
    def pairs(self) -> list:
        return sorted(self.beta)

    def source_cap(self, i):
        return self.costs[i][0]

    def sink_cap(self, i):
        return self.costs[i][1]

    def fixed_labels(self, i) -> np.ndarray:
        """Per-voxel label forced by a hard data term, or -1 where free."""
        c = self.costs[i]
        hard = c >= self.large
        cheap = ~hard
        forced = (cheap.sum(axis=0) == 1) & hard.any(axis=0)
        return np.where(forced, np.argmax(cheap, axis=0), -1)


def default_large(alpha=(), beta=()) -> float:
    peak = 1.0
    for f in list(alpha) + list(beta):
        if f is not None and f.size:
            peak = max(peak, float(np.max(f)))
    return LARGE_FACTOR * peak


def encode_data_term(ann: LabelVolume | None, n_labels: int, large: float, shape=None) -> np.ndarray:
    """Per-label costs: 0 for the annotated label, ``large`` for the others.

    Unannotated voxels (or ``ann is None``) cost nothing for every label.
    For two labels the result doubles as ``(C_s, C_t)``.
    """
    n_labels = check_label_count(n_labels)
    if ann is None:
        return np.zeros((n_labels,) + tuple(shape))
    lab = ann.labels
    bad = (lab != UNLABELLED) & (lab >= n_labels)
    if np.any(bad):
        raise ValueError(f"label values {sorted(set(lab[bad].tolist()))} exceed label count {n_labels}")
    costs = np.zeros((n_labels,) + lab.shape)
    annotated = lab != UNLABELLED
    for l in range(n_labels):
        costs[l][annotated & (lab != l)] = large
    return costs


def build_problem(
    config,
    target: Volume,
    atlases=(),
    target_ann: LabelVolume | None = None,
    weights: LocalWeightConfig | float | None = None,
    regularisation: RegularisationConfig | None = None,
    n_labels: int = 2,
    large: float | None = None,
) -> GraphProblem:
    """Assemble the graph for one named configuration.

    Parameters
    ----------
    config : Configuration or str
        ``MAS_MV`` (uniform fusion), ``MAS_LW`` (patch-weighted fusion),
        ``MASr_LW`` (plus target regularisation), ``CONF1`` (regularisation
        in every image) or ``CONF2`` (CONF1 plus atlas-atlas edges).
    target : Volume
        Image to segment; becomes image 0.
    atlases : sequence of (Volume, LabelVolume)
        Pre-aligned atlas images with full or partial annotations.
    target_ann : LabelVolume, optional
        Scribbles or other annotations on the target itself.
    weights : LocalWeightConfig or float, optional
        Patch-kernel settings for the locally weighted configurations; for
        ``MAS_MV`` a float gives the uniform weight (default 1).
    regularisation : RegularisationConfig, optional
        ``a`` and ``sigma1`` for the gradient-based alpha fields.
    n_labels : int
    large : float, optional
        Capacity standing in for an infinite edge.  Defaults to
        ``1e4 * max(1, max alpha, max beta)``.
    """
    config = Configuration.parse(config)
    atlases = list(atlases)
    n_labels = check_label_count(n_labels)
    shape, spacing = target.shape, target.spacing
    for img, ann in atlases:
        if not img.same_grid(target) or ann.shape != shape or ann.spacing != spacing:
            raise ValueError("atlases must be co-registered to the target grid")
    if target_ann is not None and (target_ann.shape != shape or target_ann.spacing != spacing):
        raise ValueError("target annotation must be on the target grid")
    if config is Configuration.CONF2 and len(atlases) < 2:
        raise ValueError("CONF2 needs at least two atlases for inter-atlas edges")
    if not atlases and target_ann is None:
        raise ValueError("a problem without atlases needs target annotations")

    lw = config is not Configuration.MAS_MV
    if lw:
        wcfg = weights if isinstance(weights, LocalWeightConfig) else LocalWeightConfig()
    else:
        uniform = 1.0 if weights is None or isinstance(weights, LocalWeightConfig) else float(weights)

    def edge(a: Volume, b: Volume):
        return beta_locally_weighted(a, b, wcfg) if lw else beta_uniform(shape, uniform)

    images = [target] + [img for img, _ in atlases]
    beta = {}
    for j, (img, _) in enumerate(atlases, start=1):
        beta[(0, j)] = edge(target, img)
    if config is Configuration.CONF2:
        for i in range(1, len(images)):
            for j in range(i + 1, len(images)):
                beta[(i, j)] = edge(images[i], images[j])

    rcfg = regularisation or RegularisationConfig()
    if config in (Configuration.MAS_MV, Configuration.MAS_LW):
        alpha = [None] * len(images)
    elif config is Configuration.MASR_LW:
        alpha = [alpha_from_gradient(target, rcfg)] + [None] * len(atlases)
    else:
        alpha = [alpha_from_gradient(img, rcfg) for img in images]

    if large is None:
        large = default_large(alpha, beta.values())
    anns = [target_ann] + [ann for _, ann in atlases]
    costs = [encode_data_term(a, n_labels, large, shape) for a in anns]
    return GraphProblem(
        images=images,
        n_labels=n_labels,
        alpha=alpha,
        beta=beta,
        costs=costs,
        large=float(large),
        spacing=spacing,
        target_index=0,
        annotations=anns,
    )


def audit_problem(p: GraphProblem) -> list[str]:
    """Structural checks on an assembled problem; returns a list of defects."""
    defects = []
    for i, j in p.beta:
        if i == j:
            defects.append(f"self edge {(i, j)}")
        if not (0 <= i < p.n_images and 0 <= j < p.n_images):
            defects.append(f"edge {(i, j)} references a missing image")
    for i, ann in enumerate(p.annotations):
        c = p.costs[i]
        if ann is None:
            if np.any(c):
                defects.append(f"image {i} has costs but no annotation")
            continue
        annotated = ann.labels != UNLABELLED
        if np.any(c[:, ~annotated]):
            defects.append(f"image {i}: unlabelled voxels carry terminal capacity")
        if np.any(c[:, annotated].max(axis=0, initial=0) <= 0):
            defects.append(f"image {i}: annotated voxels without terminal capacity")
    return defects
