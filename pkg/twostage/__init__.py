"""
Two-Stage Segmentation
======================

Coarse-to-fine segmentation of one organ in 3-D images:
- network: residual 3-D U-Net on the in-house autodiff engine
- shapemodel: PCA of aligned signed distance maps
- locate: particle swarm fit of the shape model and box extraction
- augment: shape-model and random elastic deformation
- train: Adam training, cross-validation, difficulty weighting
- pipeline: inference bundle, segment() and evaluation
- phantoms: synthetic ellipsoid phantoms
- api / cli: HTTP and command-line surfaces
"""

from .network import Network, NetworkSpec, build as build_network, forward, global_spec, local_spec
from .shapemodel import Pose, ShapeModel, build as build_shape_model, project, sample_coeffs
from .locate import BoxTransform, FitResult, extract_box, fit_shape, map_back, pso_minimize, resample_local
from .augment import augment_sample, shape_displacement, warp
from .train import TrainReport, cross_validate, difficulty_weights, train, train_final
from .pipeline import EvalResult, PipelineBundle, SegmentTrace, evaluate, segment, segment_with_trace
from .phantoms import make_phantom, make_phantoms

__version__ = "1.0.0"

__all__ = [
    "Network",
    "NetworkSpec",
    "build_network",
    "forward",
    "global_spec",
    "local_spec",
    "Pose",
    "ShapeModel",
    "build_shape_model",
    "project",
    "sample_coeffs",
    "BoxTransform",
    "FitResult",
    "extract_box",
    "fit_shape",
    "map_back",
    "pso_minimize",
    "resample_local",
    "augment_sample",
    "shape_displacement",
    "warp",
    "TrainReport",
    "cross_validate",
    "difficulty_weights",
    "train",
    "train_final",
    "EvalResult",
    "PipelineBundle",
    "SegmentTrace",
    "evaluate",
    "segment",
    "segment_with_trace",
    "make_phantom",
    "make_phantoms",
]
