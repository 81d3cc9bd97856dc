"""
Statistical shape model
=======================

PCA over narrow-band signed-distance maps of training masks, clipped to
+-band mm so shapes differ only near their surfaces. Every mask is first brought
into a canonical frame: its centroid goes to the canonical grid centre and
each axis is scaled so its occupied extent measures the normalized box size (80 x 80
x 48 mm by default, the same box the local network sees). Instances are
rasterized back into any image grid through a Pose:

    image point x  <->  canonical point q = (x - translation) / scale
"""

from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union
import logging

import numpy as np

from foundation.core.checkpoint import load_arrays, save_arrays
from foundation.core.config import GeometryConfig
from foundation.core.errors import CorruptFileError, DegenerateInputError, InsufficientDataError, InvalidArgumentError
from foundation.core.volume import (
    Mask,
    Volume,
    centroid,
    sample,
    signed_distance,
    tight_box,
)

logger = logging.getLogger(__name__)

Triple = Tuple[float, float, float]
ShapeCoeffs = np.ndarray

VARIANCE_CUTOFF = 0.95
MAX_MODES = 15


@dataclass(frozen=True)
class Pose:
    """Per-axis scale and translation (mm) taking canonical points into an image"""
    scale: Triple = (1.0, 1.0, 1.0)
    translation: Triple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        scale = tuple(float(s) for s in self.scale)
        if len(scale) != 3 or any(not np.isfinite(s) or s <= 0 for s in scale):
            raise InvalidArgumentError(f"Pose scales must be positive, got {self.scale}")
        object.__setattr__(self, "scale", scale)
        object.__setattr__(self, "translation", tuple(float(t) for t in self.translation))

    def to_canonical(self, points: np.ndarray) -> np.ndarray:
        """(3, ...) image points -> canonical points"""
        t = np.asarray(self.translation).reshape((3,) + (1,) * (points.ndim - 1))
        s = np.asarray(self.scale).reshape(t.shape)
        return (points - t) / s

    def to_dict(self):
        return {"scale": list(self.scale), "translation_mm": list(self.translation)}


@dataclass(frozen=True)
class ShapeModel:
    """Mean SDF plus orthonormal variation modes on the canonical grid"""
    mean_sdf: Volume
    components: np.ndarray          # (m, nx, ny, nz)
    eigenvalues: np.ndarray         # (m,), descending
    mean_scale: Triple
    box_mm: Triple
    total_variance: float = 0.0
    training_shapes: int = 0
    band_mm: Optional[float] = None

    @property
    def num_modes(self) -> int:
        return int(self.eigenvalues.shape[0])

    @property
    def grid(self) -> Volume:
        return self.mean_sdf

    @property
    def modes(self) -> List[Volume]:
        return [self.mean_sdf.with_data(c) for c in self.components]

    @property
    def explained_variance_ratio(self) -> np.ndarray:
        if self.total_variance <= 0:
            return np.zeros(self.num_modes)
        return self.eigenvalues / self.total_variance

    def coeff_bounds(self, spread: float, count: Optional[int] = None) -> np.ndarray:
        count = self.num_modes if count is None else min(count, self.num_modes)
        return spread * np.sqrt(np.maximum(self.eigenvalues[:count], 0.0))

    def save(self, path: Union[str, Path]) -> None:
        save_model(self, path)

    @classmethod
    def load(cls, path: Union[str, Path]) -> "ShapeModel":
        return load_model(path)


# ============================================================================
# CANONICAL FRAME
# ============================================================================

def canonical_grid(geometry: Optional[GeometryConfig] = None) -> Volume:
    geometry = geometry or GeometryConfig()
    s = geometry.canonical_spacing_mm
    dims = geometry.canonical_dims
    return Volume.zeros(dims, (s, s, s), center=(0.0, 0.0, 0.0))


def normalized_box_mm(geometry: Optional[GeometryConfig] = None) -> Triple:
    geometry = geometry or GeometryConfig()
    return tuple(n * geometry.canonical_spacing_mm for n in geometry.local_box_voxels)


def alignment(mask: Mask, box_mm: Triple) -> Pose:
    """Pose mapping the canonical frame onto `mask`: centroid and occupied-extent scale"""
    fg = np.asarray(mask.data) > 0
    if not fg.any():
        raise DegenerateInputError("Cannot align an empty mask")
    box = tight_box(mask)
    # voxel-centre extent plus one voxel, the extent a resampled mask reproduces
    size = [w + s for w, s in zip(box.size, mask.spacing)]
    scale = tuple(w / b for w, b in zip(size, box_mm))
    return Pose(scale, centroid(mask, fg))


def canonical_mask(mask: Mask, pose: Pose, grid: Volume) -> Mask:
    """Resample `mask` into the canonical frame (trilinear, cut at 0.5)"""
    q = grid.physical_points()
    x = np.empty_like(q)
    for a in range(3):
        x[a] = pose.translation[a] + pose.scale[a] * q[a]
    values = sample(mask.with_data((np.asarray(mask.data) > 0).astype(np.float64)), x, order=1)
    return grid.with_data((values >= 0.5).astype(np.uint8))


def canonical_sdf(mask: Mask, box_mm: Triple, grid: Volume, band_mm: Optional[float] = None) -> Volume:
    aligned = canonical_mask(mask, alignment(mask, box_mm), grid)
    if not aligned.data.any():
        raise DegenerateInputError("Mask vanished when resampled to the canonical grid")
    distance = signed_distance(aligned)
    if band_mm is None:
        return distance
    return distance.with_data(np.clip(distance.data, -band_mm, band_mm))


# ============================================================================
# OPERATIONS
# ============================================================================

def _orient(components: np.ndarray) -> np.ndarray:
    """Fix each mode's sign so its largest-magnitude entry is positive"""
    out = components.copy()
    for i, c in enumerate(out):
        if c[np.argmax(np.abs(c))] < 0:
            out[i] = -c
    return out


def build(masks: Sequence[Mask], m_max: int = MAX_MODES,
          geometry: Optional[GeometryConfig] = None) -> ShapeModel:
    """PCA shape model keeping the fewest modes that explain 95% of the variance"""
    if len(masks) < 3:
        raise InsufficientDataError(f"Shape model needs at least 3 masks, got {len(masks)}")
    geometry = geometry or GeometryConfig()
    grid = canonical_grid(geometry)
    box_mm = normalized_box_mm(geometry)
    band = geometry.sdf_band_mm

    sdfs, scales = [], []
    for i, mask in enumerate(masks):
        if not np.any(np.asarray(mask.data) > 0):
            raise DegenerateInputError(f"Training mask {i} is empty")
        pose = alignment(mask, box_mm)
        scales.append(pose.scale)
        sdfs.append(canonical_sdf(mask, box_mm, grid, band).data.ravel())

    X = np.stack(sdfs)
    mean = X.mean(axis=0)
    _, S, Vt = np.linalg.svd(X - mean, full_matrices=False)
    variances = S ** 2 / (len(masks) - 1)
    total = float(variances.sum())

    cap = min(m_max, MAX_MODES, len(masks) - 1)
    positive = variances > 1e-10 * max(total, 1.0)
    if total <= 0 or not positive.any():
        m = 0
    else:
        cumulative = np.cumsum(variances) / total
        m = int(np.searchsorted(cumulative, VARIANCE_CUTOFF - 1e-12) + 1)
        m = min(m, cap, int(positive.sum()))

    components = _orient(Vt[:m]).reshape((m,) + grid.dims)
    model = ShapeModel(
        mean_sdf=grid.with_data(mean.reshape(grid.dims)),
        components=components,
        eigenvalues=variances[:m].copy(),
        mean_scale=tuple(float(s) for s in np.mean(scales, axis=0)),
        box_mm=box_mm,
        total_variance=total,
        training_shapes=len(masks),
        band_mm=band,
    )
    explained = float(variances[:m].sum() / total) if total > 0 else 1.0
    logger.info(f"Shape model: {len(masks)} shapes, {m} modes, {explained:.1%} variance explained")
    return model


def project(model: ShapeModel, mask: Mask) -> ShapeCoeffs:
    """Coefficients of the aligned mask's SDF in the model's modes"""
    sdf = canonical_sdf(mask, model.box_mm, model.grid, model.band_mm)
    residual = np.asarray(sdf.data) - np.asarray(model.mean_sdf.data)
    return model.components.reshape(model.num_modes, -1) @ residual.ravel()


def sdf(model: ShapeModel, b: Optional[ShapeCoeffs] = None) -> Volume:
    """SDF_b = mean + sum_i b_i phi_i on the canonical grid"""
    values = np.asarray(model.mean_sdf.data, dtype=np.float64)
    if b is not None and len(b):
        b = np.asarray(b, dtype=np.float64)
        if b.shape[0] > model.num_modes:
            raise InvalidArgumentError(f"Model has {model.num_modes} modes, got {b.shape[0]} coefficients")
        values = values + np.tensordot(b, model.components[: b.shape[0]], axes=1)
    return model.mean_sdf.with_data(values)


def instance_sdf(model: ShapeModel, b: Optional[ShapeCoeffs], pose: Pose, target: Volume) -> Volume:
    """SDF_b carried onto the target grid (values in canonical mm)"""
    field = sdf(model, b)
    q = pose.to_canonical(target.physical_points())
    return target.with_data(sample(field, q, order=1, mode="nearest"))


def instance(model: ShapeModel, b: Optional[ShapeCoeffs], pose: Pose, target: Volume) -> Mask:
    """Rasterized shape {SDF_b < 0} on the target grid"""
    values = np.asarray(instance_sdf(model, b, pose, target).data)
    return target.with_data((values < 0).astype(np.uint8))


def sample_coeffs(model: ShapeModel, rng: np.random.Generator, spread: float = 2.0) -> ShapeCoeffs:
    """b_i ~ U[-spread sqrt(lambda_i), +spread sqrt(lambda_i)]"""
    if spread < 0:
        raise InvalidArgumentError(f"Coefficient spread must be >= 0, got {spread}")
    bound = model.coeff_bounds(spread)
    return rng.uniform(-1.0, 1.0, size=model.num_modes) * bound


# ============================================================================
# PERSISTENCE
# ============================================================================

def save_model(model: ShapeModel, path: Union[str, Path]) -> None:
    grid = model.mean_sdf
    arrays = {
        "grid.dims": np.array(grid.dims),
        "grid.spacing": np.array(grid.spacing),
        "grid.origin": np.array(grid.origin),
        "box_mm": np.array(model.box_mm),
        "mean_scale": np.array(model.mean_scale),
        "total_variance": np.array(model.total_variance),
        "training_shapes": np.array(model.training_shapes),
        "band_mm": np.array(model.band_mm if model.band_mm is not None else 0.0),
        "mean": np.asarray(grid.data, dtype=np.float64),
        "eigenvalues": np.asarray(model.eigenvalues, dtype=np.float64),
    }
    for i, c in enumerate(model.components):
        arrays[f"mode_{i:03d}"] = c
    save_arrays(path, arrays)
    logger.info(f"Saved shape model ({model.num_modes} modes) to {path}")


def load_model(path: Union[str, Path]) -> ShapeModel:
    arrays = load_arrays(path)
    try:
        dims = tuple(int(n) for n in arrays["grid.dims"])
        mean = arrays["mean"].reshape(dims)
        eigenvalues = arrays["eigenvalues"].reshape(-1)
        components = np.stack(
            [arrays[f"mode_{i:03d}"].reshape(dims) for i in range(eigenvalues.shape[0])]
        ) if eigenvalues.shape[0] else np.zeros((0,) + dims)
        band = float(arrays["band_mm"]) if "band_mm" in arrays else 0.0
        return ShapeModel(
            mean_sdf=Volume(mean, tuple(arrays["grid.spacing"]), tuple(arrays["grid.origin"])),
            components=components,
            eigenvalues=eigenvalues,
            mean_scale=tuple(float(s) for s in arrays["mean_scale"]),
            box_mm=tuple(float(s) for s in arrays["box_mm"]),
            total_variance=float(arrays["total_variance"]),
            training_shapes=int(arrays["training_shapes"]),
            band_mm=band if band > 0 else None,
        )
    except KeyError as e:
        raise CorruptFileError(f"{path}: shape model entry {e} missing")
    except ValueError as e:
        raise CorruptFileError(f"{path}: inconsistent shape model arrays ({e})")
