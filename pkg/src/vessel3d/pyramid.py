"""Gaussian pyramids: separable 3D smoothing followed by strided subsampling.

Each level is produced by convolving the previous level with a normalized 1D
Gaussian along x, then y, then z (clamp-to-edge borders) and taking every
``factor``-th voxel starting at index 0. Masks are propagated by the same
stride rule, so a subsampled voxel is masked-in iff its source voxel was.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import ValidationError
from .volume import Volume3

DEFAULT_SIGMA = 1.0
DEFAULT_RADIUS = 2
DEFAULT_FACTOR = 2


@dataclass(frozen=True)
class GaussianPyramid:
    """Multiscale stack of volumes; level 0 is the input, unmodified."""

    levels: list[Volume3]
    sigma: float
    factor: int

    def __post_init__(self) -> None:
        if not self.levels:
            raise ValidationError("pyramid must have at least one level")

    @property
    def num_levels(self) -> int:
        return len(self.levels)


def gaussian_kernel_1d(sigma: float, radius: int) -> np.ndarray:
    """Symmetric 2*radius+1 tap Gaussian, normalized to sum exactly to 1."""
    if sigma <= 0:
        raise ValidationError(f"sigma must be positive, got {sigma}")
    if radius < 1:
        raise ValidationError(f"radius must be >= 1, got {radius}")
    offsets = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-(offsets**2) / (2.0 * sigma * sigma))
    return kernel / kernel.sum()


def smooth_separable(vol: Volume3, kernel: np.ndarray) -> Volume3:
    """Apply a 1D kernel along x, then y, then z with clamp-to-edge borders.

    Dims are unchanged; the mask (if any) is carried through untouched.
    """
    kernel = np.asarray(kernel, dtype=np.float64)
    if kernel.ndim != 1 or kernel.size == 0:
        raise ValidationError("kernel must be a non-empty 1D array")
    if kernel.size % 2 == 0:
        raise ValidationError(f"kernel length must be odd, got {kernel.size}")
    data = vol.data.astype(np.float32)
    # data is (nz, ny, nx): x is axis 2, y axis 1, z axis 0.
    for axis in (2, 1, 0):
        data = ndimage.correlate1d(data, kernel, axis=axis, mode="nearest", output=np.float32)
    return Volume3(data=data, mask=vol.mask)


def subsample(vol: Volume3, factor: int) -> Volume3:
    """Take every ``factor``-th voxel per axis, starting at index 0."""
    if factor < 2:
        raise ValidationError(f"subsampling factor must be >= 2, got {factor}")
    data = vol.data[::factor, ::factor, ::factor]
    mask = vol.mask[::factor, ::factor, ::factor] if vol.mask is not None else None
    return Volume3(data=data, mask=mask)


def build_pyramid(
    vol: Volume3,
    num_levels: int,
    sigma: float = DEFAULT_SIGMA,
    factor: int = DEFAULT_FACTOR,
    radius: int = DEFAULT_RADIUS,
) -> GaussianPyramid:
    """Build ``num_levels`` levels by repeated smooth-then-subsample."""
    if num_levels < 1:
        raise ValidationError(f"num_levels must be >= 1, got {num_levels}")
    if factor < 2:
        raise ValidationError(f"factor must be >= 2, got {factor}")
    levels = [vol]
    if num_levels > 1:
        kernel = gaussian_kernel_1d(sigma, radius)
        for _ in range(1, num_levels):
            prev = levels[-1]
            if min(prev.dims) < 1:
                raise ValidationError("pyramid level would have a zero dimension")
            levels.append(subsample(smooth_separable(prev, kernel), factor))
    return GaussianPyramid(levels=levels, sigma=sigma, factor=factor)
