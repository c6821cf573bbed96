"""Propagation weights between images, regularisation weights within images,
and NMI-based atlas ranking."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .volume import Volume, grad

__all__ = [
    "RegularisationConfig",
    "LocalWeightConfig",
    "beta_uniform",
    "beta_locally_weighted",
    "patch_ssd",
    "alpha_from_gradient",
    "entropy",
    "nmi",
    "select_atlases",
]


@dataclass(frozen=True)
class RegularisationConfig:
    a: float = 0.1
    sigma1: float = 50.0

    def __post_init__(self):
        if not (np.isfinite(self.a) and self.a >= 0):
            raise ValueError(f"a must be >= 0, got {self.a}")
        if not (np.isfinite(self.sigma1) and self.sigma1 > 0):
            raise ValueError(f"sigma1 must be > 0, got {self.sigma1}")


@dataclass(frozen=True)
class LocalWeightConfig:
    """Patch kernel settings; ``patch_radius`` is per axis, |P| = prod(2r+1)."""

    sigma2: float = 50.0
    patch_radius: tuple[int, int, int] = (1, 1, 0)
    K: float = 1.0

    def __post_init__(self):
        if not (np.isfinite(self.sigma2) and self.sigma2 > 0):
            raise ValueError(f"sigma2 must be > 0, got {self.sigma2}")
        if not (np.isfinite(self.K) and self.K > 0):
            raise ValueError(f"K must be > 0, got {self.K}")
        radius = tuple(int(r) for r in self.patch_radius)
        if len(radius) != 3 or any(r < 0 for r in radius):
            raise ValueError(f"patch_radius must be three non-negative ints, got {self.patch_radius}")
        object.__setattr__(self, "patch_radius", radius)

    @property
    def patch_size(self) -> int:
        return int(np.prod([2 * r + 1 for r in self.patch_radius]))


def beta_uniform(shape, value: float = 1.0) -> np.ndarray:
    if not value > 0:
        raise ValueError(f"uniform weight must be > 0, got {value}")
    return np.full(tuple(shape), float(value))


def patch_ssd(a: np.ndarray, b: np.ndarray, patch_radius) -> tuple[np.ndarray, np.ndarray]:
    """Sum of squared differences over patches clipped at the volume border.

    Returns ``(ssd, n)`` where ``n`` counts the voxels actually inside each
    clipped patch.
    """
    kernel = np.ones([2 * r + 1 for r in patch_radius])
    d2 = (np.asarray(a, float) - np.asarray(b, float)) ** 2
    ssd = ndimage.correlate(d2, kernel, mode="constant", cval=0.0)
    n = ndimage.correlate(np.ones_like(d2), kernel, mode="constant", cval=0.0)
    return np.maximum(ssd, 0.0), n


def beta_locally_weighted(target: Volume, atlas: Volume, cfg: LocalWeightConfig) -> np.ndarray:
    """Patch-similarity fusion weights.

    ``K * exp(-SSD / (2*pi*sigma2**2*|P|))`` where SSD is summed over the
    patch pair centred at each voxel and |P| is the clipped patch size.
    """
    if not target.same_grid(atlas):
        raise ValueError("target and atlas must share one grid")
    ssd, n = patch_ssd(target.values, atlas.values, cfg.patch_radius)
    return cfg.K * np.exp(-ssd / (2.0 * np.pi * cfg.sigma2**2 * n))


def alpha_from_gradient(img: Volume, cfg: RegularisationConfig) -> np.ndarray:
    """Edge-stopping regularisation weight ``a*exp(-|grad I|^2 / (2 sigma1^2))``."""
    g = grad(img.values, img.spacing)
    mag2 = np.einsum("d...,d...->...", g, g)
    return cfg.a * np.exp(-mag2 / (2.0 * cfg.sigma1**2))


def entropy(p: np.ndarray) -> float:
    # sorted so the sum does not depend on histogram orientation
    p = np.sort(p[p > 0])
    return float(-np.sum(p * np.log(p)))


def _bin_indices(values: np.ndarray, bins: int) -> np.ndarray | None:
    lo, hi = float(values.min()), float(values.max())
    if hi <= lo:
        return None
    idx = np.floor((values - lo) / (hi - lo) * bins).astype(np.int64)
    return np.clip(idx, 0, bins - 1)


def nmi(a: Volume, b: Volume, bins: int = 64) -> float:
    """Normalised mutual information ``(H(A) + H(B)) / H(A, B)``, in [1, 2].

    Each image is binned into ``bins`` equal-width bins over its own range.
    If either image is constant the joint histogram is degenerate; the
    score is then 2 when both are constant and 1 otherwise.
    """
    if a.shape != b.shape:
        raise ValueError("NMI needs images on the same grid")
    if bins < 2:
        raise ValueError(f"bins must be >= 2, got {bins}")
    ia = _bin_indices(a.values.ravel(), bins)
    ib = _bin_indices(b.values.ravel(), bins)
    if ia is None or ib is None:
        return 2.0 if ia is None and ib is None else 1.0
    # integer counts keep the marginals exact in either orientation
    joint = np.bincount(ia * bins + ib, minlength=bins * bins).reshape(bins, bins)
    n = float(ia.size)
    ha = entropy(joint.sum(axis=1) / n)
    hb = entropy(joint.sum(axis=0) / n)
    hab = entropy(joint.ravel() / n)
    return (ha + hb) / hab


def select_atlases(target: Volume, pool, R: int, bins: int = 64) -> tuple[list[int], list[float]]:
    """Indices of the ``R`` pool images most similar to ``target`` by NMI.

    Returns ``(indices, scores)`` ordered best first; equal scores keep the
    lower pool index first.
    """
    pool = list(pool)
    if R > len(pool):
        raise ValueError(f"cannot select {R} atlases from a pool of {len(pool)}")
    if R < 0:
        raise ValueError("R must be non-negative")
    scores = [nmi(target, img, bins) for img in pool]
    order = sorted(range(len(pool)), key=lambda k: (-scores[k], k))[:R]
    return order, [scores[k] for k in order]
