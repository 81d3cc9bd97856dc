"""
Synthetic phantoms
==================

Bumpy ellipsoids standing in for the organ: randomized semi-axes, a low-order
radial perturbation of at most 20% and a random centre. Images carry an
interior of intensity 1.0, a surrounding shell of 1.4, background 0.2, a
1.5 mm blur, a multiplicative low-frequency bias field in [0.8, 1.2] and
Gaussian noise.
"""

from typing import List, Optional, Tuple
import logging

import numpy as np
from scipy import ndimage

from foundation.core.errors import InvalidArgumentError
from foundation.core.volume import Mask, Volume, grid_origin

logger = logging.getLogger(__name__)

INTERIOR = 1.0
SHELL = 1.4
BACKGROUND = 0.2
SHELL_MM = 3.0
BLUR_MM = 1.5
NOISE_STD = 0.05
BIAS_AMPLITUDE = 0.2
MAX_PERTURBATION = 0.2
SEMI_AXIS_RANGE = (15.0, 35.0)
FOV_MARGIN_MM = 4.0


def _harmonics(u: np.ndarray) -> List[np.ndarray]:
    """Real degree-1 and degree-2 spherical harmonics (unnormalized) of unit vectors u"""
    x, y, z = u
    return [x, y, z, x * y, y * z, x * z, x * x - y * y, 0.5 * (3.0 * z * z - 1.0)]


def _bias_field(dims: Tuple[int, int, int], rng: np.random.Generator) -> np.ndarray:
    axes = [np.linspace(-1.0, 1.0, n) for n in dims]
    x, y, z = np.meshgrid(*axes, indexing="ij")
    terms = [x, y, z, x * y, y * z, x * z, x * x, y * y, z * z]
    field = sum(c * t for c, t in zip(rng.uniform(-1.0, 1.0, len(terms)), terms))
    field = field - field.mean()
    peak = float(np.abs(field).max())
    if peak > 0:
        field = field / peak
    return 1.0 + BIAS_AMPLITUDE * field


def _largest_component(fg: np.ndarray) -> np.ndarray:
    labels, count = ndimage.label(fg)
    if count <= 1:
        return fg
    sizes = ndimage.sum(fg, labels, index=range(1, count + 1))
    return labels == (int(np.argmax(sizes)) + 1)


def make_phantom(rng: np.random.Generator, dims: Tuple[int, int, int] = (128, 128, 72),
                 spacing: float = 1.0) -> Tuple[Volume, Mask]:
    dims = tuple(int(n) for n in dims)
    grid_spacing = (spacing, spacing, spacing)
    origin = grid_origin((0.0, 0.0, 0.0), dims, grid_spacing)
    half_fov = [(n - 1) * spacing / 2.0 for n in dims]

    # semi-axes that keep the perturbed shape and its shell inside the field of view
    semi = []
    for h in half_fov:
        hi = min(SEMI_AXIS_RANGE[1], (h - FOV_MARGIN_MM - SHELL_MM) / (1.0 + MAX_PERTURBATION))
        lo = min(SEMI_AXIS_RANGE[0], hi)
        semi.append(rng.uniform(lo, hi))
    semi = np.asarray(semi)
    room = [max(h - FOV_MARGIN_MM - SHELL_MM - a * (1.0 + MAX_PERTURBATION), 0.0)
            for h, a in zip(half_fov, semi)]
    center = np.array([rng.uniform(-r, r) for r in room])

    coeffs = rng.uniform(-1.0, 1.0, 8)
    # every harmonic above is bounded by 1 in magnitude on the unit sphere
    coeffs *= rng.uniform(0.3, 1.0) * MAX_PERTURBATION / np.abs(coeffs).sum()

    points = np.stack(np.meshgrid(
        *(o + np.arange(n) * spacing for o, n in zip(origin, dims)), indexing="ij"
    ))
    scaled = (points - center[:, None, None, None]) / semi[:, None, None, None]
    rho = np.sqrt((scaled ** 2).sum(axis=0))
    u = scaled / np.maximum(rho, 1e-12)
    radius = 1.0 + sum(c * h for c, h in zip(coeffs, _harmonics(u)))
    fg = _largest_component(rho <= radius)

    outside_mm = ndimage.distance_transform_edt(~fg, sampling=grid_spacing)
    image = np.full(dims, BACKGROUND)
    image[(outside_mm > 0) & (outside_mm <= SHELL_MM)] = SHELL
    image[fg] = INTERIOR
    image = ndimage.gaussian_filter(image, BLUR_MM / spacing, mode="nearest")
    image = image * _bias_field(dims, rng)
    image = image + rng.normal(0.0, NOISE_STD, dims)

    return (
        Volume(image.astype(np.float32), grid_spacing, origin),
        Volume(fg.astype(np.uint8), grid_spacing, origin),
    )


def make_phantoms(n: int, rng: Optional[np.random.Generator] = None,
                  dims: Tuple[int, int, int] = (128, 128, 72), spacing: float = 1.0) -> List[Tuple[Volume, Mask]]:
    """n (image, mask) phantoms; reproducible for a seeded generator"""
    if n < 1:
        raise InvalidArgumentError(f"Need n >= 1 phantoms, got {n}")
    rng = rng if rng is not None else np.random.default_rng(0)
    phantoms = [make_phantom(rng, dims, spacing) for _ in range(n)]
    logger.info(f"Generated {n} phantoms of {dims} at {spacing} mm")
    return phantoms
