"""
End-to-end segmentation
=======================

    resample to isotropic -> crop/pad -> normalize -> global network
      -> shape fit -> box -> local resample -> local network
      -> map back -> threshold -> opening

Plus the evaluation metrics (hard Dice, box extent errors) and the bundle
directory that holds everything `segment` needs:

    global.ckpt   local.ckpt   shape.model   pipeline.cfg
"""

from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Optional, Sequence, Tuple, Union
import csv
import logging

import numpy as np

from foundation.core.config import GeometryConfig, PipelineConfig, load_config, save_config
from foundation.core.database import store_evaluation
from foundation.core.errors import InvalidArgumentError, LocalizationError
from foundation.core.metadata import track_stage
from foundation.core.validation import require_volume
from foundation.core.volume import (
    Box,
    Mask,
    ProbMap,
    Volume,
    crop_or_pad,
    isotropic_dims,
    morph_open,
    normalize,
    resample,
    resample_like,
    sphere_element,
    threshold,
    tight_box,
)

from .locate import BoxTransform, FitResult, extract_box, fit_shape, map_back, resample_local
from .network import Network
from .shapemodel import ShapeModel

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]
BiasCorrection = Callable[[Volume], Volume]

GLOBAL_CHECKPOINT = "global.ckpt"
LOCAL_CHECKPOINT = "local.ckpt"
SHAPE_MODEL = "shape.model"
PIPELINE_CONFIG = "pipeline.cfg"


def no_bias_correction(image: Volume) -> Volume:
    return image


# ============================================================================
# BUNDLE
# ============================================================================

@dataclass
class PipelineBundle:
    """Trained networks, shape model and inference settings"""
    global_net: Network
    local_net: Network
    shape_model: ShapeModel
    config: PipelineConfig = field(default_factory=PipelineConfig)

    def __post_init__(self):
        geometry = self.geometry
        if self.global_net.spec.in_dims != tuple(geometry.global_dims):
            raise InvalidArgumentError(
                f"Global network expects {self.global_net.spec.in_dims}, geometry says {geometry.global_dims}"
            )
        if self.local_net.spec.in_dims != tuple(geometry.local_dims):
            raise InvalidArgumentError(
                f"Local network expects {self.local_net.spec.in_dims}, geometry says {geometry.local_dims}"
            )
        if self.shape_model.mean_sdf.dims != tuple(geometry.canonical_dims):
            raise InvalidArgumentError(
                f"Shape model grid {self.shape_model.mean_sdf.dims} does not match {geometry.canonical_dims}"
            )

    @property
    def geometry(self) -> GeometryConfig:
        return self.config.geometry()

    @property
    def pso(self):
        return self.config.pso

    def save(self, directory: PathLike) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        self.global_net.save(directory / GLOBAL_CHECKPOINT)
        self.local_net.save(directory / LOCAL_CHECKPOINT)
        self.shape_model.save(directory / SHAPE_MODEL)
        save_config(self.config, directory / PIPELINE_CONFIG)
        logger.info(f"Bundle written to {directory}")
        return directory

    @classmethod
    def load(cls, directory: PathLike) -> "PipelineBundle":
        directory = Path(directory)
        if not directory.is_dir():
            raise FileNotFoundError(f"No such bundle directory: {directory}")
        for name in (GLOBAL_CHECKPOINT, LOCAL_CHECKPOINT, SHAPE_MODEL):
            if not (directory / name).exists():
                raise FileNotFoundError(f"Bundle {directory} lacks {name}")
        config_path = directory / PIPELINE_CONFIG
        config = load_config(config_path, PipelineConfig) if config_path.exists() else PipelineConfig()
        return cls(
            global_net=Network.load(directory / GLOBAL_CHECKPOINT),
            local_net=Network.load(directory / LOCAL_CHECKPOINT),
            shape_model=ShapeModel.load(directory / SHAPE_MODEL),
            config=config,
        )


# ============================================================================
# GRIDS
# ============================================================================

def to_global_grid(v: Volume, geometry: GeometryConfig, order: int = 1) -> Volume:
    """Isotropic resample around the volume centre, then centred crop/pad"""
    s = geometry.global_spacing_mm
    iso = resample(v, (s, s, s), isotropic_dims(v, s), v.center, order=order)
    return crop_or_pad(iso, geometry.global_dims)


def mask_on_grid(mask: Mask, grid: Volume) -> Mask:
    """Binary mask carried onto another grid (trilinear, cut at 0.5)"""
    fg = mask.with_data((np.asarray(mask.data) > 0).astype(np.float64))
    return threshold(resample_like(fg, grid, order=1), 0.5)


# ============================================================================
# STAGES
# ============================================================================

@dataclass
class SegmentTrace:
    """Intermediate products of one segment() call"""
    global_input: Volume
    global_prob: ProbMap
    fit: FitResult
    box: Box
    transform: BoxTransform
    local_prob: ProbMap
    prob: ProbMap
    raw_mask: Mask
    mask: Mask

    def summary(self) -> Dict:
        fg = int(np.count_nonzero(self.mask.data))
        voxel_ml = float(np.prod(self.mask.spacing)) / 1000.0
        return {
            "foreground_voxels": fg,
            "volume_ml": round(fg * voxel_ml, 3),
            "box": self.box.to_dict(),
            "fit": self.fit.to_dict(),
            "local_grid": self.transform.to_dict(),
            "global_max_probability": round(float(np.max(self.global_prob.data)), 4),
        }


@track_stage("global_forward")
def _global_stage(net: Network, image: Volume, geometry: GeometryConfig) -> Tuple[ProbMap, Volume]:
    global_input = normalize(to_global_grid(image, geometry))
    return net.forward(global_input), global_input


@track_stage("fit_shape")
def _localize(bundle: PipelineBundle, global_prob: ProbMap) -> Tuple[FitResult, Box]:
    fit = fit_shape(bundle.shape_model, global_prob, bundle.pso)
    return fit, extract_box(fit, bundle.config.box_margin_mm)


@track_stage("local_forward")
def _local_stage(net: Network, image: Volume, box: Box,
                 geometry: GeometryConfig) -> Tuple[ProbMap, BoxTransform]:
    local_input, t = resample_local(image, box, geometry)
    return net.forward(local_input), t


@track_stage("postprocess")
def _postprocess(prob: ProbMap, config: PipelineConfig) -> Tuple[Mask, Mask]:
    raw = threshold(prob, config.threshold)
    opened = morph_open(raw, sphere_element(config.opening_radius_mm, prob.spacing))
    return opened, raw


def segment_with_trace(bundle: PipelineBundle, image: Volume,
                       bias_correction: BiasCorrection = no_bias_correction) -> SegmentTrace:
    require_volume("image", image, "segment")
    image = bias_correction(image)
    geometry = bundle.geometry

    global_prob, global_input = _global_stage(bundle.global_net, image, geometry)
    try:
        fit, box = _localize(bundle, global_prob)
    except LocalizationError as e:
        logger.error(f"Localization failed: {e} (global map max probability {e.max_probability:.4f})")
        raise

    local_prob, t = _local_stage(bundle.local_net, image, box, geometry)
    prob = map_back(local_prob, t, image)
    mask, raw = _postprocess(prob, bundle.config)
    logger.info(
        f"Segmented {image.dims}: {int(np.count_nonzero(mask.data))} voxels, "
        f"box {tuple(round(w, 1) for w in box.size)} mm"
    )
    return SegmentTrace(global_input, global_prob, fit, box, t, local_prob, prob, raw, mask)


def segment(bundle: PipelineBundle, image: Volume,
            bias_correction: BiasCorrection = no_bias_correction) -> Mask:
    """Final binary mask on the image's own grid"""
    return segment_with_trace(bundle, image, bias_correction).mask


# ============================================================================
# METRICS
# ============================================================================

@dataclass
class EvalResult:
    dice: float
    start_errors: Tuple[float, float, float]
    end_errors: Tuple[float, float, float]
    size_errors: Tuple[float, float, float]
    global_dice: Optional[float] = None
    local_dice: Optional[float] = None
    case_id: str = ""

    def to_dict(self):
        return {
            "case_id": self.case_id,
            "dice": round(self.dice, 6),
            "global_dice": None if self.global_dice is None else round(self.global_dice, 6),
            "local_dice": None if self.local_dice is None else round(self.local_dice, 6),
            "start_errors_mm": [round(e, 3) for e in self.start_errors],
            "end_errors_mm": [round(e, 3) for e in self.end_errors],
            "size_errors_mm": [round(e, 3) for e in self.size_errors],
        }


def dice_hard(a: Mask, b: Mask) -> float:
    """2|A and B| / (|A| + |B|); 1 when both are empty"""
    if not a.same_grid(b):
        raise InvalidArgumentError(f"Dice needs masks on one grid, got {a.dims} and {b.dims}")
    fa = np.asarray(a.data) > 0
    fb = np.asarray(b.data) > 0
    total = int(fa.sum()) + int(fb.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((fa & fb).sum()) / total


def extent_errors(pred: Mask, gt: Mask) -> Tuple[Tuple[float, ...], Tuple[float, ...], Tuple[float, ...]]:
    """Per-axis |start|, |end| and |size| differences of the tight boxes (mm)"""
    p, g = tight_box(pred), tight_box(gt)
    start = tuple(abs(a - b) for a, b in zip(p.start, g.start))
    end = tuple(abs(a - b) for a, b in zip(p.end, g.end))
    size = tuple(abs(a - b) for a, b in zip(p.size, g.size))
    return start, end, size


def evaluate(pred: Mask, gt: Mask, case_id: str = "") -> EvalResult:
    start, end, size = extent_errors(pred, gt)
    return EvalResult(dice_hard(pred, gt), start, end, size, case_id=case_id)


def evaluate_case(bundle: PipelineBundle, image: Volume, gt: Mask, case_id: str = "",
                  bias_correction: BiasCorrection = no_bias_correction) -> EvalResult:
    """Segment and score one case, with the per-stage Dice values"""
    trace = segment_with_trace(bundle, image, bias_correction)
    gt = gt if gt.same_grid(image) else mask_on_grid(gt, image)

    global_on_image = resample_like(trace.global_prob, image, order=1)
    result = evaluate(trace.mask, gt, case_id)
    result.global_dice = dice_hard(threshold(global_on_image, bundle.config.threshold), gt)
    result.local_dice = dice_hard(trace.raw_mask, gt)

    store_evaluation(
        case_id, result.dice, list(result.start_errors), list(result.end_errors),
        list(result.size_errors), result.global_dice, result.local_dice,
    )
    logger.info(
        f"{case_id or 'case'}: dice {result.dice:.4f} "
        f"(global {result.global_dice:.4f}, local {result.local_dice:.4f})"
    )
    return result


def evaluate_cases(results: Sequence[EvalResult]) -> Dict[str, Dict[str, float]]:
    """Mean and standard deviation of every metric across cases"""
    if not results:
        return {}
    columns = {
        "dice": [r.dice for r in results],
        "global_dice": [r.global_dice for r in results if r.global_dice is not None],
        "local_dice": [r.local_dice for r in results if r.local_dice is not None],
    }
    for name, attr in (("start", "start_errors"), ("end", "end_errors"), ("size", "size_errors")):
        for a, axis in enumerate("xyz"):
            columns[f"{name}_{axis}_mm"] = [getattr(r, attr)[a] for r in results]
    return {
        name: {"mean": float(np.mean(values)), "std": float(np.std(values)), "n": len(values)}
        for name, values in columns.items() if values
    }


EVAL_COLUMNS = ["id", "dice", "start_x", "start_y", "start_z", "end_x", "end_y", "end_z"]


def write_eval_csv(results: Sequence[EvalResult], path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(EVAL_COLUMNS)
        for r in results:
            writer.writerow(
                [r.case_id, f"{r.dice:.6f}"]
                + [f"{e:.3f}" for e in r.start_errors]
                + [f"{e:.3f}" for e in r.end_errors]
            )
    return path
