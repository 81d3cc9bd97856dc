"""
Training-time augmentation
==========================

Three perturbations applied to (image, mask) pairs:

- deformation, either transported along the shape model between two
  coefficient vectors ("shape") or a smooth random field ("random")
- a random integer global shift
- additive white Gaussian noise on the image

Displacement fields are (3, nx, ny, nz) arrays in mm, expressed in the output
frame: warping samples the source at x - d(x).
"""

from typing import Literal, Optional, Tuple
import logging

import numpy as np
from scipy import ndimage

from foundation.core.config import AugmentConfig
from foundation.core.errors import DegenerateInputError, InvalidArgumentError
from foundation.core.volume import Mask, Volume, sample

from .shapemodel import ShapeCoeffs, ShapeModel, alignment, project, sample_coeffs, sdf

logger = logging.getLogger(__name__)

Field = np.ndarray
Interpolation = Literal["trilinear", "nearest"]

_NEIGHBOURS = [(-1, 0, 0), (1, 0, 0), (0, -1, 0), (0, 1, 0), (0, 0, -1), (0, 0, 1)]


def surface_points(m: Mask, max_points: int = 500) -> np.ndarray:
    """
    (n, 3) physical positions of foreground voxels with at least one background
    6-neighbour (outside the grid counts as background), evenly thinned to at
    most max_points.
    """
    if max_points < 1:
        raise InvalidArgumentError(f"max_points must be >= 1, got {max_points}")
    fg = np.asarray(m.data) > 0
    if not fg.any():
        raise DegenerateInputError("Surface of an empty mask is undefined")
    padded = np.pad(fg, 1, constant_values=False)
    interior = np.ones_like(fg)
    n = fg.shape
    for dx, dy, dz in _NEIGHBOURS:
        interior &= padded[1 + dx: 1 + dx + n[0], 1 + dy: 1 + dy + n[1], 1 + dz: 1 + dz + n[2]]
    idx = np.argwhere(fg & ~interior)
    if len(idx) > max_points:
        keep = np.linspace(0, len(idx) - 1, max_points).round().astype(int)
        idx = idx[keep]
    origin = np.asarray(m.origin)
    spacing = np.asarray(m.spacing)
    return origin + idx * spacing


# ============================================================================
# DISPLACEMENT FIELDS
# ============================================================================

def _splat(grid: Volume, points: np.ndarray, values: np.ndarray, bandwidth_mm: float) -> Field:
    """Normalized Gaussian interpolation of sparse displacements, zero beyond 3h"""
    dims = grid.dims
    idx = np.round((points - np.asarray(grid.origin)) / np.asarray(grid.spacing)).astype(int)
    inside = np.all((idx >= 0) & (idx < np.asarray(dims)), axis=1)
    idx, values = idx[inside], values[inside]

    sigma = [bandwidth_mm / s for s in grid.spacing]
    # unit-peak kernel so a lone control point keeps its full displacement
    peak = (2.0 * np.pi) ** 1.5 * float(np.prod(sigma))

    weights = np.zeros(dims)
    np.add.at(weights, tuple(idx.T), 1.0)
    weights = ndimage.gaussian_filter(weights, sigma, mode="constant", truncate=3.0) * peak

    field = np.zeros((3,) + dims)
    for a in range(3):
        comp = np.zeros(dims)
        np.add.at(comp, tuple(idx.T), values[:, a])
        field[a] = ndimage.gaussian_filter(comp, sigma, mode="constant", truncate=3.0) * peak
    return field / np.maximum(weights, 1.0)


def shape_displacement(model: ShapeModel, mask: Mask, b: ShapeCoeffs, b_prime: ShapeCoeffs,
                       cfg: Optional[AugmentConfig] = None) -> Field:
    """
    Dense field moving the mask surface along the SDF_b normals onto the zero
    level set of SDF_b' (first order), in image mm.
    """
    cfg = cfg or AugmentConfig()
    b = np.asarray(b, dtype=np.float64)
    b_prime = np.asarray(b_prime, dtype=np.float64)
    if b.shape != b_prime.shape:
        raise InvalidArgumentError(f"Coefficient vectors differ in length: {b.shape} vs {b_prime.shape}")
    if np.array_equal(b, b_prime):
        return np.zeros((3,) + mask.dims)

    pose = alignment(mask, model.box_mm)
    points = surface_points(mask, cfg.max_surface_points)
    q = pose.to_canonical(points.T)

    source = sdf(model, b)
    target = sdf(model, b_prime)
    gradient = np.gradient(np.asarray(source.data), *source.spacing)

    delta = sample(target, q, order=1, mode="nearest") - sample(source, q, order=1, mode="nearest")
    normal = np.stack([sample(source.with_data(g), q, order=1, mode="nearest") for g in gradient])
    norm = np.linalg.norm(normal, axis=0)
    ok = norm >= 1e-6
    if not ok.all():
        logger.warning(f"Skipped {int((~ok).sum())} surface points with a degenerate SDF gradient")
    if not ok.any():
        return np.zeros((3,) + mask.dims)

    moves = -delta[ok] * normal[:, ok] / norm[ok]                     # canonical mm
    moves = moves * np.asarray(pose.scale)[:, None]                   # image mm
    return _splat(mask, points[ok], moves.T, cfg.bandwidth_mm)


def random_displacement(grid: Volume, cfg: AugmentConfig, rng: np.random.Generator) -> Field:
    """Smooth shape-independent field with peak component magnitude random_magnitude_mm"""
    sigma = [cfg.random_sigma_mm / s for s in grid.spacing]
    field = np.stack([
        ndimage.gaussian_filter(rng.standard_normal(grid.dims), sigma, mode="constant")
        for _ in range(3)
    ])
    peak = float(np.abs(field).max())
    if peak == 0.0:
        return np.zeros_like(field)
    return field * (cfg.random_magnitude_mm / peak)


def warp(v: Volume, field: Field, interpolation: Interpolation = "trilinear") -> Volume:
    """Backward warp: out(x) = v(x - d(x))"""
    field = np.asarray(field, dtype=np.float64)
    if field.shape != (3,) + v.dims:
        raise InvalidArgumentError(f"Field shape {field.shape} does not match volume dims {v.dims}")
    if interpolation not in ("trilinear", "nearest"):
        raise InvalidArgumentError(f"Unknown interpolation {interpolation!r}")
    order = 1 if interpolation == "trilinear" else 0
    values = sample(v, v.physical_points() - field, order=order)
    if order == 0:
        values = values.astype(v.data.dtype)
    return v.with_data(values)


def global_shift(v: Volume, shift: Tuple[int, int, int]) -> Volume:
    """Integer voxel shift, zero fill"""
    shifted = ndimage.shift(np.asarray(v.data), shift, order=0, mode="constant", cval=0)
    return v.with_data(shifted)


# ============================================================================
# SAMPLE AUGMENTATION
# ============================================================================

def augment_sample(image: Volume, mask: Mask, model: Optional[ShapeModel], cfg: AugmentConfig,
                   rng: np.random.Generator) -> Tuple[Volume, Mask]:
    """Deform (with probability), shift, and add noise; the inputs are left untouched"""
    if not image.same_grid(mask):
        raise InvalidArgumentError("Image and mask must share a grid")

    out_image, out_mask = image, mask
    if cfg.deform_mode != "none" and rng.random() < cfg.deform_probability:
        if cfg.deform_mode == "shape":
            if model is None:
                raise InvalidArgumentError("Shape-model deformation needs a shape model")
            if np.any(np.asarray(mask.data) > 0):
                b = project(model, mask)
                field = shape_displacement(model, mask, b, sample_coeffs(model, rng, cfg.coeff_spread), cfg)
            else:
                field = np.zeros((3,) + mask.dims)
        else:
            field = random_displacement(image, cfg, rng)
        out_image = warp(out_image, field, "trilinear")
        out_mask = warp(out_mask, field, "nearest")

    shift = tuple(int(s) for s in rng.integers(-cfg.max_shift_voxels, cfg.max_shift_voxels + 1, size=3))
    if any(shift):
        out_image = global_shift(out_image, shift)
        out_mask = global_shift(out_mask, shift)

    if cfg.noise_std > 0:
        noisy = np.asarray(out_image.data, dtype=np.float64) + rng.normal(0.0, cfg.noise_std, image.dims)
        out_image = out_image.with_data(noisy)
    return out_image, out_mask
