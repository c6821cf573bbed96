"""Grid geometry and anisotropic finite-difference operators.

Arrays are indexed ``[x, y, z]``.  The operators accept arbitrary leading
batch axes so that stacks of images (``(n, nx, ny, nz)``) can be processed
in one call; vector fields carry their three components on the axis just
before the spatial ones, i.e. ``(..., 3, nx, ny, nz)``.
"""
from __future__ import annotations

import sys
from dataclasses import dataclass

import numpy as np

__all__ = [
    "Volume",
    "VectorField",
    "check_shape",
    "check_spacing",
    "grad",
    "div",
    "gradient",
    "divergence",
    "gradient_magnitude_sq",
]


def check_shape(shape) -> tuple[int, int, int]:
    shape = tuple(int(n) for n in shape)
    if len(shape) != 3:
        raise ValueError(f"grid shape must have three axes, got {shape}")
    if any(n < 1 for n in shape):
        raise ValueError(f"grid counts must be >= 1, got {shape}")
    total = 1
    for n in shape:
        total *= n
    if total > sys.maxsize:
        raise ValueError(f"grid {shape} exceeds the addressable voxel count")
    return shape


def check_spacing(spacing) -> tuple[float, float, float]:
    spacing = tuple(float(s) for s in spacing)
    if len(spacing) != 3:
        raise ValueError(f"spacing must have three entries, got {spacing}")
    if not all(np.isfinite(s) and s > 0 for s in spacing):
        raise ValueError(f"spacing must be strictly positive, got {spacing}")
    return spacing


@dataclass(frozen=True, eq=False)
class Volume:
    """Scalar field on a regular grid, stored as float64."""

    values: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        check_shape(values.shape)
        if not np.all(np.isfinite(values)):
            raise ValueError("volume values must be finite")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "spacing", check_spacing(self.spacing))

    @property
    def shape(self):
        return self.values.shape

    def same_grid(self, other) -> bool:
        return self.shape == other.shape and self.spacing == other.spacing


@dataclass(frozen=True, eq=False)
class VectorField:
    """Three-component field; ``components[d]`` is the flow along axis d."""

    components: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        comps = np.asarray(self.components, dtype=np.float64)
        if comps.ndim != 4 or comps.shape[0] != 3:
            raise ValueError(f"expected components of shape (3, nx, ny, nz), got {comps.shape}")
        check_shape(comps.shape[1:])
        comps.setflags(write=False)
        object.__setattr__(self, "components", comps)
        object.__setattr__(self, "spacing", check_spacing(self.spacing))

    @property
    def shape(self):
        return self.components.shape[1:]

    @property
    def x(self):
        return self.components[0]

    @property
    def y(self):
        return self.components[1]

    @property
    def z(self):
        return self.components[2]


def grad(u: np.ndarray, spacing) -> np.ndarray:
    """Forward differences over the last three axes, zero at the far face.

    Returns an array of shape ``u.shape[:-3] + (3,) + u.shape[-3:]``.
    """
    u = np.asarray(u, dtype=np.float64)
    out = np.zeros(u.shape[:-3] + (3,) + u.shape[-3:])
    for d in range(3):
        ax = u.ndim - 3 + d
        n = u.shape[ax]
        if n < 2:
            continue
        lo = [slice(None)] * u.ndim
        hi = [slice(None)] * u.ndim
        lo[ax] = slice(0, n - 1)
        hi[ax] = slice(1, n)
        dst = out[..., d, :, :, :]
        dst[tuple(lo)] = (u[tuple(hi)] - u[tuple(lo)]) / spacing[d]
    return out


def div(p: np.ndarray, spacing) -> np.ndarray:
    """Backward-difference divergence, the negative adjoint of :func:`grad`.

    ``p`` has shape ``(..., 3, nx, ny, nz)``.  Along each axis the stencil is
    ``p[0]`` at the first index, ``p[k] - p[k-1]`` in the interior and
    ``-p[n-2]`` at the last index (the last flow entry never contributes).
    """
    p = np.asarray(p, dtype=np.float64)
    out = np.zeros(p.shape[:-4] + p.shape[-3:])
    nd = out.ndim
    for d in range(3):
        ax = nd - 3 + d
        n = out.shape[ax]
        if n < 2:
            continue
        head = [slice(None)] * nd
        tail = [slice(None)] * nd
        head[ax] = slice(0, n - 1)
        tail[ax] = slice(1, n)
        flux = p[..., d, :, :, :][tuple(head)] / spacing[d]
        out[tuple(head)] += flux
        out[tuple(tail)] -= flux
    return out


def gradient(v: Volume) -> VectorField:
    return VectorField(grad(v.values, v.spacing), v.spacing)


def divergence(f: VectorField) -> Volume:
    return Volume(div(f.components, f.spacing), f.spacing)


def gradient_magnitude_sq(v: Volume) -> Volume:
    """Per-voxel squared Euclidean norm of :func:`gradient`."""
    g = grad(v.values, v.spacing)
    return Volume(np.einsum("d...,d...->...", g, g), v.spacing)
