"""
Localization
============

Turns the global network's probability map into a location and extent:

1. particle swarm search over (translation, log-scale, leading shape
   coefficients) maximizing the soft Dice between the rasterized shape model
   and the probability map
2. tight box of the fitted shape
3. resampling of the original image so the box fills the local network's
   normalized box (80 x 80 x 48 voxels by default), and the way back
"""

from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple
import logging
import math

import numpy as np

from foundation.core.config import GeometryConfig, PsoConfig
from foundation.core.errors import DegenerateInputError, InvalidArgumentError, LocalizationError
from foundation.core.volume import (
    Box,
    Mask,
    ProbMap,
    Volume,
    centroid,
    grid_origin,
    normalize,
    resample,
    resample_like,
    sample,
    tight_box,
)

from .shapemodel import Pose, ShapeCoeffs, ShapeModel, instance, sdf

logger = logging.getLogger(__name__)

Triple = Tuple[float, float, float]
Bounds = Sequence[Tuple[float, float]]

DETECTION_THRESHOLD = 0.5


# ============================================================================
# PARTICLE SWARM
# ============================================================================

def pso_minimize(objective: Callable[[np.ndarray], float], bounds: Bounds, cfg: PsoConfig,
                 seeds: Optional[Sequence[Sequence[float]]] = None) -> Tuple[np.ndarray, float]:
    """
    Global-best particle swarm. The first iteration evaluates the initial
    swarm (uniform in bounds, optional seeded particles first); every further
    iteration moves all particles once and re-evaluates them.
    """
    bounds = np.asarray(bounds, dtype=np.float64)
    if bounds.ndim != 2 or bounds.shape[1] != 2 or bounds.shape[0] == 0:
        raise InvalidArgumentError(f"Bounds must be a non-empty list of (lo, hi), got shape {bounds.shape}")
    lo, hi = bounds[:, 0], bounds[:, 1]
    if not (np.all(np.isfinite(bounds)) and np.all(lo < hi)):
        raise InvalidArgumentError("Bounds must be finite with lo < hi per dimension")

    rng = np.random.default_rng(cfg.seed)
    n, dim = cfg.particles, bounds.shape[0]
    span = hi - lo
    vmax = cfg.velocity_clamp * span

    x = lo + rng.random((n, dim)) * span
    for i, seed in enumerate((seeds or [])[:n]):
        x[i] = np.clip(np.asarray(seed, dtype=np.float64), lo, hi)
    v = np.zeros_like(x)

    values = np.array([objective(p) for p in x], dtype=np.float64)
    pbest, pbest_val = x.copy(), values.copy()
    g = int(np.argmin(pbest_val))
    gbest, gbest_val = pbest[g].copy(), float(pbest_val[g])

    for iteration in range(1, cfg.iterations):
        r1 = rng.random((n, dim))
        r2 = rng.random((n, dim))
        v = cfg.inertia * v + cfg.cognitive * r1 * (pbest - x) + cfg.social * r2 * (gbest - x)
        v = np.clip(v, -vmax, vmax)
        x = np.clip(x + v, lo, hi)

        values = np.array([objective(p) for p in x], dtype=np.float64)
        improved = values < pbest_val
        pbest[improved] = x[improved]
        pbest_val[improved] = values[improved]
        g = int(np.argmin(pbest_val))
        if pbest_val[g] < gbest_val:
            gbest, gbest_val = pbest[g].copy(), float(pbest_val[g])

        if iteration % 10 == 0:
            logger.debug(f"PSO iteration {iteration}/{cfg.iterations}: best {gbest_val:.6f}")

    return gbest, gbest_val


# ============================================================================
# SHAPE FITTING
# ============================================================================

@dataclass(frozen=True)
class FitResult:
    pose: Pose
    coeffs: ShapeCoeffs
    mask: Mask
    objective: float

    def to_dict(self):
        return {
            "pose": self.pose.to_dict(),
            "coeffs": [round(float(b), 4) for b in self.coeffs],
            "objective": round(self.objective, 6),
        }


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


class SoftMaskObjective:
    """
    1 - softDice(sigmoid(-SDF / tau), p) for a search vector
    (tx, ty, tz, log sx, log sy, log sz, b_1 .. b_k). Log-scales are relative
    to the model's mean scale. With eval_stride > 1 the Dice is taken over
    every n-th voxel per axis.
    """

    def __init__(self, model: ShapeModel, p: ProbMap, cfg: PsoConfig):
        self.model = model
        self.cfg = cfg
        self.n_coeffs = min(model.num_modes, cfg.max_modes)
        stride = cfg.eval_stride
        window = (slice(None, None, stride),) * 3
        self.points = p.physical_points()[(slice(None),) + window].reshape(3, -1)
        self.prob = np.asarray(p.data, dtype=np.float64)[window].ravel()
        self.prob_sum = float(self.prob.sum())
        self.log_mean_scale = np.log(np.asarray(model.mean_scale))

    def decode(self, vector: np.ndarray) -> Tuple[Pose, ShapeCoeffs]:
        vector = np.asarray(vector, dtype=np.float64)
        scale = np.exp(self.log_mean_scale + vector[3:6])
        b = np.zeros(self.model.num_modes)
        b[: self.n_coeffs] = vector[6: 6 + self.n_coeffs]
        return Pose(tuple(scale), tuple(vector[:3])), b

    def soft_mask(self, vector: np.ndarray) -> np.ndarray:
        pose, b = self.decode(vector)
        field = sdf(self.model, b[: self.n_coeffs])
        q = pose.to_canonical(self.points)
        values = sample(field, q, order=1, mode="nearest")
        return _sigmoid(-values / self.cfg.temperature_mm)

    def __call__(self, vector: np.ndarray) -> float:
        s = self.soft_mask(vector)
        eps = 1e-5
        dice = (2.0 * float(s @ self.prob) + eps) / (float(s.sum()) + self.prob_sum + eps)
        return 1.0 - dice


def soft_mask_objective(model: ShapeModel, p: ProbMap, cfg: PsoConfig) -> SoftMaskObjective:
    return SoftMaskObjective(model, p, cfg)


def search_bounds(model: ShapeModel, center: Triple, cfg: PsoConfig) -> List[Tuple[float, float]]:
    bounds = [(c - cfg.translation_range_mm, c + cfg.translation_range_mm) for c in center]
    bounds += [(-cfg.log_scale_range, cfg.log_scale_range)] * 3
    for bound in model.coeff_bounds(cfg.coeff_range_sd, cfg.max_modes):
        # a zero-variance mode gets a sliver so PSO bounds stay well formed
        bound = max(float(bound), 1e-9)
        bounds.append((-bound, bound))
    return bounds


def fit_shape(model: ShapeModel, p: ProbMap, cfg: PsoConfig) -> FitResult:
    """Particle swarm fit of the shape model to a probability map"""
    values = np.asarray(p.data, dtype=np.float64)
    peak = float(values.max())
    if peak < DETECTION_THRESHOLD:
        raise LocalizationError(
            f"No voxel reaches probability {DETECTION_THRESHOLD} (max {peak:.4f}); nothing to localize",
            peak,
        )

    center = centroid(p, np.clip(values, 0.0, None))
    objective = SoftMaskObjective(model, p, cfg)
    bounds = search_bounds(model, center, cfg)
    seed = list(center) + [0.0] * (len(bounds) - 3)

    best, value = pso_minimize(objective, bounds, cfg, seeds=[seed])
    pose, b = objective.decode(best)
    mask = instance(model, b, pose, p)
    if not mask.data.any():
        raise LocalizationError("Fitted shape does not intersect the image grid", peak)

    logger.info(
        f"Shape fit: objective {value:.4f}, centre {tuple(round(t, 1) for t in pose.translation)} mm, "
        f"scale {tuple(round(s, 3) for s in pose.scale)}"
    )
    return FitResult(pose=pose, coeffs=b, mask=mask, objective=float(value))


def extract_box(fit: FitResult, margin_mm: float = 0.0) -> Box:
    """Tight box of the fitted mask, grown by margin_mm per face, clipped to the image"""
    if margin_mm < 0:
        raise InvalidArgumentError(f"Box margin must be >= 0, got {margin_mm}")
    box = tight_box(fit.mask)
    if margin_mm > 0:
        box = box.expanded(margin_mm).clipped(fit.mask)
    return box


# ============================================================================
# LOCAL GRID
# ============================================================================

@dataclass(frozen=True)
class BoxTransform:
    """Local grid whose central box_voxels span exactly the localized box"""
    center: Triple
    size: Triple
    box_voxels: Tuple[int, int, int] = (80, 80, 48)
    dims: Tuple[int, int, int] = (128, 128, 72)

    def __post_init__(self):
        if any(not math.isfinite(w) or w <= 0 for w in self.size):
            raise DegenerateInputError(f"Box size must be positive per axis, got {self.size}")

    @property
    def spacing(self) -> Triple:
        return tuple(w / n for w, n in zip(self.size, self.box_voxels))

    @property
    def origin(self) -> Triple:
        return grid_origin(self.center, self.dims, self.spacing)

    def local_grid(self) -> Volume:
        return Volume.zeros(self.dims, self.spacing, self.center)

    def to_dict(self):
        return {
            "center_mm": [round(c, 3) for c in self.center],
            "size_mm": [round(w, 3) for w in self.size],
            "spacing_mm": [round(s, 4) for s in self.spacing],
            "dims": list(self.dims),
        }


def box_transform(box: Box, geometry: Optional[GeometryConfig] = None) -> BoxTransform:
    geometry = geometry or GeometryConfig()
    return BoxTransform(
        center=box.center,
        size=box.size,
        box_voxels=tuple(geometry.local_box_voxels),
        dims=tuple(geometry.local_dims),
    )


def resample_local(image: Volume, box: Box,
                   geometry: Optional[GeometryConfig] = None) -> Tuple[Volume, BoxTransform]:
    """Local network input: box-centred grid at spacing size / box_voxels, normalized"""
    t = box_transform(box, geometry)
    local = resample(image, t.spacing, t.dims, t.center, order=1)
    logger.debug(f"Local grid: spacing {tuple(round(s, 3) for s in t.spacing)} mm around {t.center}")
    return normalize(local), t


def map_back(local_prob: ProbMap, t: BoxTransform, target: Volume) -> ProbMap:
    """Local probability map onto the target grid; zero outside the local field of view"""
    if local_prob.dims != t.dims:
        raise InvalidArgumentError(f"Local map has dims {local_prob.dims}, transform expects {t.dims}")
    placed = Volume(np.asarray(local_prob.data, dtype=np.float64), t.spacing, t.origin)
    out = resample_like(placed, target, order=1)
    return out.with_data(np.clip(out.data, 0.0, 1.0))
