"""Synthetic pathology perturbations for robustness testing.

Lesion masks are unions of random ellipsoids placed fully inside the volume;
intensities inside a mask get additive uniform noise whose magnitude is a
random fraction of the scan's maximum intensity, clamped back to the scan's
original range. Everything is deterministic given (spec, seed).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidParamError, ShapeError
from .volume import LabelMap, ScalarVolume


@dataclass(frozen=True)
class LesionSpec:
    seed: int = 0
    count: int = 1
    radius_range: tuple[float, float] = (2.0, 4.0)
    magnitude_range: tuple[float, float] = (0.20, 0.50)

    def __post_init__(self):
        lo, hi = self.radius_range
        if not (1.0 <= lo <= hi):
            raise InvalidParamError(f"radius range must satisfy 1 <= low <= high, got {self.radius_range}")
        mlo, mhi = self.magnitude_range
        if not (0.0 <= mlo <= mhi <= 1.0):
            raise InvalidParamError(
                f"magnitude range must satisfy 0 <= low <= high <= 1, got {self.magnitude_range}"
            )
        if self.count < 0:
            raise InvalidParamError(f"blob count must be >= 0, got {self.count}")


def ellipsoid_mask(dims, center, radii) -> np.ndarray:
    """Lattice points with sum(((x - c) / r)^2) <= 1."""
    grids = np.indices(dims, dtype=np.float64)
    acc = np.zeros(dims, dtype=np.float64)
    for g, c, r in zip(grids, center, radii):
        acc += ((g - c) / r) ** 2
    return acc <= 1.0


def gen_lesion_mask(dims, spec: LesionSpec) -> LabelMap:
    """Union of ``spec.count`` random ellipsoids fully inside the volume."""
    rng = np.random.default_rng(spec.seed)
    mask = np.zeros(dims, dtype=bool)
    for _ in range(spec.count):
        radii = rng.uniform(spec.radius_range[0], spec.radius_range[1], size=3)
        lo = np.ceil(radii)
        hi = np.array(dims) - 1 - np.ceil(radii)
        if np.any(hi < lo):
            raise InvalidParamError(
                f"radius up to {spec.radius_range[1]} does not fit inside dims {tuple(dims)}"
            )
        center = np.array([rng.uniform(l, h) for l, h in zip(lo, hi)])
        mask |= ellipsoid_mask(dims, center, radii)
    return LabelMap(mask.astype(np.uint16), num_classes=2)


def apply_pathology(
    scan: ScalarVolume, mask: LabelMap, spec: LesionSpec, seed: int
) -> ScalarVolume:
    """Add uniform noise inside the mask; outside voxels are untouched.

    One magnitude m ~ U(range) * max(scan) is drawn per application, then
    per-voxel noise ~ U(-m, +m). Output is clamped to the scan's original
    [min, max].
    """
    if mask.dims != scan.dims:
        raise ShapeError(f"mask dims {mask.dims} != scan dims {scan.dims}")
    rng = np.random.default_rng(seed)
    data = scan.data.astype(np.float64)
    inside = mask.data != 0
    if not inside.any():
        return ScalarVolume(scan.data.copy())
    lo_frac, hi_frac = spec.magnitude_range
    m = rng.uniform(lo_frac, hi_frac) * float(data.max())
    if m == 0.0:
        return ScalarVolume(scan.data.copy())
    noise = rng.uniform(-m, m, size=int(inside.sum()))
    out = data.copy()
    out[inside] = np.clip(out[inside] + noise, data.min(), data.max())
    # untouched voxels must stay bit-identical to the float32 input
    result = scan.data.copy()
    result[inside] = out[inside].astype(np.float32)
    return ScalarVolume(result)
