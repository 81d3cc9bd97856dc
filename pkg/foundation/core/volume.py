"""
Volumetric grids
================

Volume is the carrier for images, masks, probability maps and signed-distance
maps. Voxel (i, j, k) sits at physical position origin + (i, j, k) * spacing,
in millimetres. Arrays are indexed [x, y, z]; the flat on-disk order is
x-fastest (Fortran order).

All operations are pure: they return new volumes and never touch their inputs.
"""

from dataclasses import dataclass
from typing import Iterable, Optional, Tuple
import logging
import math

import numpy as np
from scipy import ndimage

from .errors import DegenerateInputError, InvalidArgumentError

logger = logging.getLogger(__name__)

Triple = Tuple[float, float, float]
IntTriple = Tuple[int, int, int]


def _as_triple(values: Iterable[float], name: str) -> Triple:
    values = tuple(float(v) for v in values)
    if len(values) != 3:
        raise InvalidArgumentError(f"{name} must have 3 components, got {len(values)}")
    return values


def _as_dims(values: Iterable[int], name: str = "dims") -> IntTriple:
    values = tuple(int(v) for v in values)
    if len(values) != 3:
        raise InvalidArgumentError(f"{name} must have 3 components, got {len(values)}")
    if any(v < 1 for v in values):
        raise InvalidArgumentError(f"{name} must be >= 1 per axis, got {values}")
    return values


def _check_spacing(spacing: Triple, name: str = "spacing") -> Triple:
    if any(not math.isfinite(s) or s <= 0 for s in spacing):
        raise InvalidArgumentError(f"{name} must be positive per axis, got {spacing}")
    return spacing


# ============================================================================
# DOMAIN TYPES
# ============================================================================

@dataclass(frozen=True)
class Volume:
    """3D scalar grid with physical geometry. The data array is read-only."""
    data: np.ndarray
    spacing: Triple
    origin: Triple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        data = np.array(self.data)
        if data.ndim != 3:
            raise InvalidArgumentError(f"Volume data must be 3-D, got shape {data.shape}")
        if data.size == 0:
            raise InvalidArgumentError("Volume data must have dims >= 1 per axis")
        data.flags.writeable = False
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", _check_spacing(_as_triple(self.spacing, "spacing")))
        object.__setattr__(self, "origin", _as_triple(self.origin, "origin"))

    @property
    def dims(self) -> IntTriple:
        return tuple(int(n) for n in self.data.shape)

    @property
    def center(self) -> Triple:
        return tuple(
            o + (n - 1) / 2.0 * s for o, n, s in zip(self.origin, self.dims, self.spacing)
        )

    @property
    def extent_mm(self) -> Triple:
        return tuple(n * s for n, s in zip(self.dims, self.spacing))

    def with_data(self, data: np.ndarray) -> "Volume":
        """Same geometry, new values"""
        data = np.asarray(data)
        if data.shape != self.data.shape:
            raise InvalidArgumentError(f"Data shape {data.shape} does not match dims {self.dims}")
        return Volume(data, self.spacing, self.origin)

    def axis_coords(self, axis: int) -> np.ndarray:
        """Physical coordinates (mm) of voxel centres along one axis"""
        return self.origin[axis] + np.arange(self.dims[axis]) * self.spacing[axis]

    def physical_points(self) -> np.ndarray:
        """(3, nx, ny, nz) physical coordinates of every voxel centre"""
        return np.stack(np.meshgrid(*(self.axis_coords(a) for a in range(3)), indexing="ij"))

    def index_to_physical(self, index: Iterable[float]) -> Triple:
        return tuple(o + i * s for o, i, s in zip(self.origin, index, self.spacing))

    def flat(self) -> np.ndarray:
        """Values in x-fastest order"""
        return self.data.ravel(order="F")

    def same_grid(self, other: "Volume", tol: float = 1e-6) -> bool:
        return (
            self.dims == other.dims
            and np.allclose(self.spacing, other.spacing, atol=tol)
            and np.allclose(self.origin, other.origin, atol=tol)
        )

    @classmethod
    def from_flat(cls, values: np.ndarray, dims: Iterable[int], spacing: Iterable[float],
                  origin: Iterable[float] = (0.0, 0.0, 0.0)) -> "Volume":
        dims = _as_dims(dims)
        values = np.asarray(values)
        if values.size != dims[0] * dims[1] * dims[2]:
            raise InvalidArgumentError(
                f"Data length {values.size} does not match dims {dims}"
            )
        return cls(values.reshape(dims, order="F"), tuple(spacing), tuple(origin))

    @classmethod
    def zeros(cls, dims: Iterable[int], spacing: Iterable[float], center: Iterable[float] = (0.0, 0.0, 0.0),
              dtype=np.float64) -> "Volume":
        """Empty grid centred on `center`"""
        dims = _as_dims(dims)
        spacing = _check_spacing(_as_triple(spacing, "spacing"))
        return cls(np.zeros(dims, dtype=dtype), spacing, grid_origin(center, dims, spacing))


# Masks and probability maps are Volumes with a value contract, checked in validation.py
Mask = Volume
ProbMap = Volume


@dataclass(frozen=True)
class Box:
    """Axis-aligned physical box, per-axis start/end in mm"""
    start: Triple
    end: Triple

    @property
    def size(self) -> Triple:
        return tuple(e - s for s, e in zip(self.start, self.end))

    @property
    def center(self) -> Triple:
        return tuple((s + e) / 2.0 for s, e in zip(self.start, self.end))

    def expanded(self, margin_mm: float) -> "Box":
        return Box(
            tuple(s - margin_mm for s in self.start),
            tuple(e + margin_mm for e in self.end),
        )

    def clipped(self, v: Volume) -> "Box":
        """Clip to the span of v's voxel centres"""
        lo = v.origin
        hi = v.index_to_physical([n - 1 for n in v.dims])
        return Box(
            tuple(min(max(s, l), h) for s, l, h in zip(self.start, lo, hi)),
            tuple(min(max(e, l), h) for e, l, h in zip(self.end, lo, hi)),
        )

    def to_dict(self):
        return {
            "start_mm": [round(s, 3) for s in self.start],
            "end_mm": [round(e, 3) for e in self.end],
            "size_mm": [round(s, 3) for s in self.size],
        }


def grid_origin(center: Iterable[float], dims: Iterable[int], spacing: Iterable[float]) -> Triple:
    """Origin of a grid of given dims/spacing whose centre lands on `center`"""
    return tuple(c - (n - 1) / 2.0 * s for c, n, s in zip(center, dims, spacing))


def isotropic_dims(v: Volume, spacing: float) -> IntTriple:
    """Dims of a grid at `spacing` covering the same extent as v"""
    if spacing <= 0:
        raise InvalidArgumentError(f"Spacing must be positive, got {spacing}")
    return tuple(max(1, int(round(e / spacing))) for e in v.extent_mm)


# ============================================================================
# RESAMPLING
# ============================================================================

def _index_coords(v: Volume, origin: Triple, spacing: Triple, dims: IntTriple) -> np.ndarray:
    axes = []
    for a in range(3):
        phys = origin[a] + np.arange(dims[a]) * spacing[a]
        idx = (phys - v.origin[a]) / v.spacing[a]
        # snap float noise so samples on the last voxel centre stay inside
        rounded = np.round(idx)
        idx = np.where(np.abs(idx - rounded) < 1e-9, rounded, idx)
        axes.append(idx)
    return np.stack(np.meshgrid(*axes, indexing="ij"))


def sample(v: Volume, coords_mm: np.ndarray, order: int = 1, outside: float = 0.0,
           mode: str = "constant") -> np.ndarray:
    """Interpolate v at arbitrary physical points, coords_mm shaped (3, ...)"""
    coords_mm = np.asarray(coords_mm, dtype=np.float64)
    idx = np.empty_like(coords_mm)
    for a in range(3):
        idx[a] = (coords_mm[a] - v.origin[a]) / v.spacing[a]
    return ndimage.map_coordinates(
        np.asarray(v.data, dtype=np.float64), idx, order=order, mode=mode, cval=outside
    )


def resample(v: Volume, target_spacing: Iterable[float], target_dims: Iterable[int],
             center: Iterable[float], order: int = 1) -> Volume:
    """
    Trilinear (order=1) or nearest (order=0) resampling onto a grid centred at
    `center`. Samples outside v's support read 0.
    """
    target_spacing = _check_spacing(_as_triple(target_spacing, "target_spacing"), "target_spacing")
    target_dims = _as_dims(target_dims, "target_dims")
    center = _as_triple(center, "center")
    origin = grid_origin(center, target_dims, target_spacing)

    coords = _index_coords(v, origin, target_spacing, target_dims)
    out = ndimage.map_coordinates(
        np.asarray(v.data, dtype=np.float64), coords, order=order, mode="constant", cval=0.0
    )
    return Volume(out, target_spacing, origin)


def resample_like(v: Volume, grid: Volume, order: int = 1) -> Volume:
    """Resample v onto another volume's grid"""
    return resample(v, grid.spacing, grid.dims, grid.center, order=order)


def crop_or_pad(v: Volume, target_dims: Iterable[int]) -> Volume:
    """
    Centred crop or symmetric zero-pad per axis. With an odd difference the
    extra voxel goes on the high-index side.
    """
    target_dims = _as_dims(target_dims, "target_dims")
    out = np.zeros(target_dims, dtype=v.data.dtype)
    src, dst, origin = [], [], []
    for n, t, s, o in zip(v.dims, target_dims, v.spacing, v.origin):
        diff = n - t
        if diff >= 0:
            lo = diff // 2
            src.append(slice(lo, lo + t))
            dst.append(slice(0, t))
            origin.append(o + lo * s)
        else:
            lo = (-diff) // 2
            src.append(slice(0, n))
            dst.append(slice(lo, lo + n))
            origin.append(o - lo * s)
    out[tuple(dst)] = v.data[tuple(src)]
    return Volume(out, v.spacing, tuple(origin))


# ============================================================================
# INTENSITY
# ============================================================================

def normalize(v: Volume) -> Volume:
    """Zero mean, unit population standard deviation"""
    data = np.asarray(v.data, dtype=np.float64)
    if data.size < 2:
        raise DegenerateInputError("Cannot normalize a single-voxel volume")
    mean = data.mean()
    std = data.std()
    if not np.isfinite(std) or std < 1e-12:
        raise DegenerateInputError(f"Cannot normalize a constant volume (value {mean:.6g})")
    return v.with_data((data - mean) / std)


def gaussian_smooth(v: Volume, sigma_mm: float) -> Volume:
    """Gaussian blur with a physical standard deviation"""
    if sigma_mm <= 0:
        return v
    sigma = [sigma_mm / s for s in v.spacing]
    return v.with_data(ndimage.gaussian_filter(np.asarray(v.data, dtype=np.float64), sigma, mode="nearest"))


def threshold(p: ProbMap, t: float) -> Mask:
    """Binary mask, inclusive: voxel = 1 iff p >= t"""
    if not 0.0 < t < 1.0:
        raise InvalidArgumentError(f"Threshold must lie in (0, 1), got {t}")
    return p.with_data((np.asarray(p.data) >= t).astype(np.uint8))


# ============================================================================
# SHAPE
# ============================================================================

def _foreground(m: Mask) -> np.ndarray:
    return np.asarray(m.data) > 0


def signed_distance(m: Mask) -> Volume:
    """
    Signed distance in mm, negative inside. Each voxel gets the distance from
    its centre to the nearest voxel centre of the opposite class, shifted by
    half the smallest spacing so voxels on either side of the boundary sit
    near zero.
    """
    fg = _foreground(m)
    count = int(fg.sum())
    if count == 0 or count == fg.size:
        raise DegenerateInputError(
            f"Signed distance needs both classes, mask has {count}/{fg.size} foreground voxels"
        )
    half = min(m.spacing) / 2.0
    inside = ndimage.distance_transform_edt(fg, sampling=m.spacing)
    outside = ndimage.distance_transform_edt(~fg, sampling=m.spacing)
    sdf = np.where(fg, -(inside - half), outside - half)
    return Volume(sdf, m.spacing, m.origin)


def sphere_element(radius_mm: float, spacing: Iterable[float]) -> Mask:
    """Spherical structuring element rasterized at a given spacing, odd dims, centred"""
    if radius_mm <= 0:
        raise InvalidArgumentError(f"Radius must be positive, got {radius_mm}")
    spacing = _check_spacing(_as_triple(spacing, "spacing"))
    half = [int(math.floor(radius_mm / s + 1e-9)) for s in spacing]
    axes = [np.arange(-h, h + 1) * s for h, s in zip(half, spacing)]
    x, y, z = np.meshgrid(*axes, indexing="ij")
    inside = x ** 2 + y ** 2 + z ** 2 <= radius_mm ** 2 + 1e-9
    return Volume(inside.astype(np.uint8), spacing, tuple(-h * s for h, s in zip(half, spacing)))


def morph_open(m: Mask, elem: Mask) -> Mask:
    """Erosion followed by dilation; voxels outside the grid count as background"""
    structure = _foreground(elem)
    if not structure.any():
        raise InvalidArgumentError("Structuring element is empty")
    if any(n % 2 == 0 for n in structure.shape):
        raise InvalidArgumentError(f"Structuring element needs odd dims, got {structure.shape}")
    fg = _foreground(m)
    if not fg.any():
        return m.with_data(np.zeros(m.dims, dtype=np.uint8))
    eroded = ndimage.binary_erosion(fg, structure=structure, border_value=0)
    opened = ndimage.binary_dilation(eroded, structure=structure, border_value=0)
    return m.with_data(opened.astype(np.uint8))


def tight_box(m: Mask) -> Box:
    """Minimal physical box around foreground voxel centres"""
    idx = np.argwhere(_foreground(m))
    if idx.size == 0:
        raise DegenerateInputError("Cannot measure the box of an empty mask")
    lo = idx.min(axis=0)
    hi = idx.max(axis=0)
    return Box(m.index_to_physical(lo), m.index_to_physical(hi))


def centroid(v: Volume, weights: Optional[np.ndarray] = None) -> Triple:
    """Value-weighted physical centroid"""
    w = np.asarray(v.data if weights is None else weights, dtype=np.float64)
    total = w.sum()
    if total <= 0:
        raise DegenerateInputError("Centroid of an all-zero volume is undefined")
    return tuple(
        float((w.sum(axis=tuple(b for b in range(3) if b != a)) * v.axis_coords(a)).sum() / total)
        for a in range(3)
    )
