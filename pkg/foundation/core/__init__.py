"""
Segmentation Foundation Package

Numerical and infrastructure layer shared by both pipeline stages.

Main components:
- volume: physical 3-D grids, resampling, distance maps, morphology
- autodiff: reverse-mode tensors with 3-D convolutions and soft Dice
- checkpoint: binary parameter files
- metaimage: .mhd/.raw and .mha volume I/O
- validation: header and volume value contracts
- config: typed configuration models and key = value files
- database: SQLAlchemy run ledger
- metadata: stage timing and content hashes

Usage:
    from foundation.core import read_volume, normalize, track_stage

    @track_stage("global_forward")
    def run(net, image):
        return forward(net, normalize(image))
"""

# Errors
from .errors import (
    SegmentationError,
    InvalidArgumentError,
    DegenerateInputError,
    InsufficientDataError,
    LocalizationError,
    ParseError,
    CorruptFileError,
    ConfigError,
)

# Volumes
from .volume import (
    Volume,
    Mask,
    ProbMap,
    Box,
    grid_origin,
    isotropic_dims,
    sample,
    resample,
    resample_like,
    crop_or_pad,
    normalize,
    gaussian_smooth,
    threshold,
    signed_distance,
    sphere_element,
    morph_open,
    tight_box,
    centroid,
)

# Persistence
from .checkpoint import save_arrays, load_arrays
from .metaimage import read_volume, write_volume

# Validation
from .validation import (
    validate_header,
    validate_volume,
    require_volume,
    ValidationError,
    VOLUME_CONTRACTS,
)

# Configuration
from .config import (
    PsoConfig,
    AugmentConfig,
    TrainConfig,
    GeometryConfig,
    PipelineConfig,
    parse_config_text,
    load_config,
    dump_config,
    save_config,
)

# Run ledger
from .database import (
    configure_database,
    ledger_enabled,
    get_session,
    store_training_run,
    store_evaluation,
    store_stage_timing,
    get_recent_runs,
    get_recent_evaluations,
    get_stage_timings,
    TrainingRun,
    EvaluationRecord,
    StageTiming,
)

# Stage tracking
from .metadata import track_stage, calculate_content_hash

__version__ = "1.0.0"

__all__ = [
    # Errors
    "SegmentationError",
    "InvalidArgumentError",
    "DegenerateInputError",
    "InsufficientDataError",
    "LocalizationError",
    "ParseError",
    "CorruptFileError",
    "ConfigError",

    # Volumes
    "Volume",
    "Mask",
    "ProbMap",
    "Box",
    "grid_origin",
    "isotropic_dims",
    "sample",
    "resample",
    "resample_like",
    "crop_or_pad",
    "normalize",
    "gaussian_smooth",
    "threshold",
    "signed_distance",
    "sphere_element",
    "morph_open",
    "tight_box",
    "centroid",

    # Persistence
    "save_arrays",
    "load_arrays",
    "read_volume",
    "write_volume",

    # Validation
    "validate_header",
    "validate_volume",
    "require_volume",
    "ValidationError",
    "VOLUME_CONTRACTS",

    # Configuration
    "PsoConfig",
    "AugmentConfig",
    "TrainConfig",
    "GeometryConfig",
    "PipelineConfig",
    "parse_config_text",
    "load_config",
    "dump_config",
    "save_config",

    # Run ledger
    "configure_database",
    "ledger_enabled",
    "get_session",
    "store_training_run",
    "store_evaluation",
    "store_stage_timing",
    "get_recent_runs",
    "get_recent_evaluations",
    "get_stage_timings",
    "TrainingRun",
    "EvaluationRecord",
    "StageTiming",

    # Stage tracking
    "track_stage",
    "calculate_content_hash",
]
