"""Synthetic image/label pairs standing in for clinical atlas databases.

Every instance is the same template pushed through its own smooth random
displacement (bounded by ``deform`` voxels), with additive Gaussian noise.
The template contains an unlabelled bright distractor next to the labelled
structures, so intensity alone does not identify them.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .annotations import LabelVolume
from .volume import Volume

__all__ = ["Case", "make_phantoms", "smooth_displacement"]


@dataclass(frozen=True, eq=False)
class Case:
    name: str
    image: Volume
    labels: LabelVolume


def smooth_displacement(shape, bound: float, rng: np.random.Generator) -> np.ndarray:
    """Random field of shape ``(3, *shape)`` with ``max |d(x)| <= bound``.

    Half of the budget goes to a global translation, half to a smooth warp.
    """
    disp = np.zeros((3,) + tuple(shape))
    if bound <= 0:
        return disp
    shift = rng.normal(size=3)
    shift *= 0.5 * bound * rng.uniform(0.3, 1.0) / max(np.linalg.norm(shift), 1e-12)
    sigma = [max(n / 4.0, 1.0) for n in shape]
    for d in range(3):
        field = ndimage.gaussian_filter(rng.normal(size=shape), sigma, mode="wrap")
        disp[d] = field
    mag = np.sqrt((disp**2).sum(axis=0)).max()
    if mag > 0:
        disp *= 0.5 * bound / mag
    return disp + shift[:, None, None, None]


def _coords(shape):
    return np.stack(np.meshgrid(*[np.arange(n, dtype=float) for n in shape], indexing="ij"))


def _binary_template(x, shape):
    """Soft foreground indicator and intensity for the lobed structure."""
    nx, ny, nz = shape
    c = np.array([nx, ny, nz], float)[:, None, None, None]
    rel = (x - c / 2) / (c / 2)  # roughly [-1, 1]
    lobes = [((-0.25, -0.1, 0.0), (0.45, 0.3, 0.7)),
             ((0.2, 0.1, 0.1), (0.4, 0.4, 0.6)),
             ((0.45, -0.3, -0.15), (0.25, 0.28, 0.5))]
    f = np.zeros(shape)
    for centre, radii in lobes:
        q = sum(((rel[d] - centre[d]) / radii[d]) ** 2 for d in range(3))
        f = np.maximum(f, np.exp(-q))
    fg = f - 0.5
    # unlabelled bright distractor touching the structure
    q = ((rel[0] + 0.25) / 0.25) ** 2 + ((rel[1] - 0.55) / 0.18) ** 2 + ((rel[2]) / 0.6) ** 2
    distractor = np.exp(-q) - 0.5
    soft_fg = 1 / (1 + np.exp(-fg / 0.04))
    soft_d = 1 / (1 + np.exp(-distractor / 0.04))
    shading = 8.0 * rel[1]
    intensity = 100.0 + shading + 45.0 * soft_fg + 40.0 * soft_d * (1 - soft_fg)
    return (fg > 0).astype(np.uint8), intensity


def _cardiac_template(x, shape):
    """LV cavity (1), myocardium (2) and RV cavity (3) tapering towards the apex."""
    nx, ny, nz = shape
    cx, cy = 0.45 * nx, 0.5 * ny
    taper = 1.0 - 0.45 * (x[2] / max(nz - 1, 1))
    r_lv = 0.17 * min(nx, ny) * taper
    wall = 0.09 * min(nx, ny)
    dist_lv = np.hypot(x[0] - cx, x[1] - cy)
    rv_cx, rv_cy = cx + 1.25 * (r_lv + wall), cy + 0.05 * ny
    dist_rv = np.hypot((x[0] - rv_cx) / 0.8, (x[1] - rv_cy) / 1.3)
    lv = dist_lv <= r_lv
    myo = (dist_lv > r_lv) & (dist_lv <= r_lv + wall)
    rv = (dist_rv <= 1.0 * r_lv) & ~lv & ~myo
    labels = np.zeros(shape, np.uint8)
    labels[lv], labels[myo], labels[rv] = 1, 2, 3

    def soft(d, r):
        return 1 / (1 + np.exp((d - r) / 0.6))

    s_lv = soft(dist_lv, r_lv)
    s_wall = soft(dist_lv, r_lv + wall) - s_lv
    s_rv = soft(dist_rv, r_lv) * (1 - soft(dist_lv, r_lv + wall))
    # unlabelled bright blob (e.g. a vessel) beside the LV
    s_vessel = soft(np.hypot(x[0] - cx, x[1] - (cy - r_lv - 2.2 * wall)), 0.6 * wall)
    intensity = 110.0 + 90.0 * s_lv - 30.0 * s_wall + 80.0 * s_rv + 70.0 * s_vessel * (1 - s_wall)
    return labels, intensity


def make_phantoms(
    count: int,
    shape=(24, 24, 12),
    noise: float = 8.0,
    deform: float = 2.0,
    seed: int = 0,
    mode: str = "binary",
    spacing=(1.0, 1.0, 1.0),
) -> list[Case]:
    """Generate ``count`` deterministic phantom cases.

    ``mode="binary"`` gives one lobed structure (labels {0, 1});
    ``mode="multilabel"`` gives three nested cardiac-like structures
    (labels {0, 1, 2, 3}).
    """
    if count < 2:
        raise ValueError("need at least two phantoms")
    if mode not in ("binary", "multilabel"):
        raise ValueError(f"unknown phantom mode {mode!r}")
    shape = tuple(int(n) for n in shape)
    template = _binary_template if mode == "binary" else _cardiac_template
    base = _coords(shape)
    cases = []
    for k in range(count):
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), k]))
        warped = base + smooth_displacement(shape, deform, rng)
        labels, intensity = template(warped, shape)
        if noise > 0:
            intensity = intensity + rng.normal(scale=noise, size=shape)
        cases.append(Case(f"phantom_{k:03d}", Volume(intensity, spacing), LabelVolume(labels, spacing)))
    return cases
