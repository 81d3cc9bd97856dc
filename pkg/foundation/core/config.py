"""
Configuration
=============

Typed configuration models for every tunable of the pipeline, plus a loader
for flat `key = value` files:

    # comments and blank lines are ignored
    epochs = 300
    augment.noise_std = 0.03
    global_dims = 64 64 36

Dotted keys address nested models. Values are typed with YAML scalar rules;
whitespace-separated numbers become lists. Unknown keys are errors.
"""

from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Tuple, Type, TypeVar, Union, get_args, get_origin
import logging
import math

import yaml
from pydantic import BaseModel, ConfigDict, Field
from pydantic import ValidationError as PydanticValidationError

from .errors import ConfigError

logger = logging.getLogger(__name__)

ModelT = TypeVar("ModelT", bound=BaseModel)
Dims = Tuple[int, int, int]


# ============================================================================
# CONFIG MODELS
# ============================================================================

class PsoConfig(BaseModel):
    """Particle swarm settings for shape fitting"""
    model_config = ConfigDict(extra="forbid")

    particles: int = Field(default=40, ge=1)
    iterations: int = Field(default=60, ge=1)
    inertia: float = Field(default=0.72, gt=0.0, lt=1.0)
    cognitive: float = Field(default=1.49, ge=0.0)
    social: float = Field(default=1.49, ge=0.0)
    velocity_clamp: float = Field(default=0.5, gt=0.0, description="Fraction of each dimension's range")
    seed: int = 0
    translation_range_mm: float = Field(default=20.0, gt=0.0)
    log_scale_range: float = Field(default=math.log(1.5), gt=0.0)
    max_modes: int = Field(default=6, ge=0)
    coeff_range_sd: float = Field(default=2.0, gt=0.0)
    temperature_mm: float = Field(default=2.0, gt=0.0)
    eval_stride: int = Field(default=1, ge=1, description="Evaluate the objective on every n-th voxel")


class AugmentConfig(BaseModel):
    """Training-time augmentation"""
    model_config = ConfigDict(extra="forbid")

    noise_std: float = Field(default=0.03, ge=0.0)
    deform_probability: float = Field(default=0.5, ge=0.0, le=1.0)
    deform_mode: Literal["shape", "random", "none"] = "shape"
    coeff_spread: float = Field(default=2.0, gt=0.0)
    bandwidth_mm: float = Field(default=8.0, gt=0.0)
    max_shift_voxels: int = Field(default=5, ge=0)
    max_surface_points: int = Field(default=500, ge=1)
    random_sigma_mm: float = Field(default=8.0, gt=0.0)
    random_magnitude_mm: float = Field(default=3.0, ge=0.0)
    seed: int = 0


class TrainConfig(BaseModel):
    """Optimisation schedule"""
    model_config = ConfigDict(extra="forbid")

    epochs: int = Field(default=1000, ge=1)
    lr: float = Field(default=1e-5, gt=0.0)
    lr_factor: float = Field(default=0.5, gt=0.0, lt=1.0)
    plateau_window: int = Field(default=50, ge=1)
    plateau_threshold: float = Field(default=1e-4, ge=0.0)
    lr_floor: float = Field(default=1e-7, gt=0.0)
    beta1: float = Field(default=0.9, ge=0.0, lt=1.0)
    beta2: float = Field(default=0.999, ge=0.0, lt=1.0)
    adam_eps: float = Field(default=1e-8, gt=0.0)
    batch: int = Field(default=1, ge=1, le=1)
    augment_enabled: bool = True
    augment: AugmentConfig = Field(default_factory=AugmentConfig)
    local_jitter_mm: float = Field(default=3.0, ge=0.0)
    checkpoint_every: int = Field(default=100, ge=0)
    checkpoint_dir: Optional[str] = None
    log_every: int = Field(default=10, ge=1)
    seed: int = 0


class GeometryConfig(BaseModel):
    """Grid sizes of the two stages and of the shape model"""
    model_config = ConfigDict(extra="forbid")

    global_dims: Dims = (128, 128, 72)
    global_spacing_mm: float = Field(default=1.0, gt=0.0)
    local_dims: Dims = (128, 128, 72)
    local_box_voxels: Dims = (80, 80, 48)
    canonical_dims: Dims = (96, 96, 64)
    canonical_spacing_mm: float = Field(default=1.0, gt=0.0)
    sdf_band_mm: float = Field(default=10.0, gt=0.0, description="Shape-model SDFs are clipped to +-band")

    def scaled(self, factor: float) -> "GeometryConfig":
        """Same fields of view at `factor` times the voxel count per axis"""
        def scale(dims: Dims) -> Dims:
            return tuple(max(1, int(round(n * factor))) for n in dims)
        return GeometryConfig(
            global_dims=scale(self.global_dims),
            global_spacing_mm=self.global_spacing_mm / factor,
            local_dims=scale(self.local_dims),
            local_box_voxels=scale(self.local_box_voxels),
            canonical_dims=scale(self.canonical_dims),
            canonical_spacing_mm=self.canonical_spacing_mm / factor,
            sdf_band_mm=self.sdf_band_mm,
        )


class PipelineConfig(BaseModel):
    """Everything `segment` needs besides learned parameters"""
    model_config = ConfigDict(extra="forbid")

    threshold: float = Field(default=0.5, gt=0.0, lt=1.0)
    opening_radius_mm: float = Field(default=2.0, gt=0.0)
    box_margin_mm: float = Field(default=0.0, ge=0.0)
    geometry_scale: float = Field(default=1.0, gt=0.0)
    global_depth: int = Field(default=5, ge=2)
    local_depth: int = Field(default=3, ge=2)
    base_features: int = Field(default=16, ge=1)
    dropout_rate: float = Field(default=0.15, ge=0.0, lt=1.0)
    shape_modes: int = Field(default=15, ge=1)
    pso: PsoConfig = Field(default_factory=PsoConfig)

    def geometry(self) -> GeometryConfig:
        base = GeometryConfig()
        return base if self.geometry_scale == 1.0 else base.scaled(self.geometry_scale)


# ============================================================================
# KEY = VALUE FILES
# ============================================================================

def _nested_model(annotation) -> Optional[Type[BaseModel]]:
    if isinstance(annotation, type) and issubclass(annotation, BaseModel):
        return annotation
    if get_origin(annotation) is Union:
        for arg in get_args(annotation):
            if isinstance(arg, type) and issubclass(arg, BaseModel):
                return arg
    return None


def _check_key(model_cls: Type[BaseModel], dotted: str, line_number: int, path: str) -> None:
    cls = model_cls
    parts = dotted.split(".")
    for i, part in enumerate(parts):
        if cls is None or part not in cls.model_fields:
            raise ConfigError(f"Unknown configuration key {dotted!r}", line_number, path)
        annotation = cls.model_fields[part].annotation
        cls = _nested_model(annotation) if i < len(parts) - 1 else None


def _parse_value(raw: str) -> Any:
    value = yaml.safe_load(raw) if raw.strip() else None
    if isinstance(value, str) and " " in value.strip():
        tokens = [yaml.safe_load(t) for t in value.split()]
        if all(isinstance(t, (int, float)) and not isinstance(t, bool) for t in tokens):
            return tokens
    return value


def parse_config_text(text: str, model_cls: Type[ModelT], path: str = "<config>") -> ModelT:
    values: Dict[str, Any] = {}
    lines: Dict[str, int] = {}
    for line_number, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"Expected 'key = value', got {stripped!r}", line_number, path)
        key, raw = (part.strip() for part in stripped.split("=", 1))
        _check_key(model_cls, key, line_number, path)
        try:
            value = _parse_value(raw)
        except yaml.YAMLError as e:
            raise ConfigError(f"Cannot parse value for {key!r}: {e}", line_number, path)
        target = values
        parts = key.split(".")
        for part in parts[:-1]:
            target = target.setdefault(part, {})
        target[parts[-1]] = value
        lines[key] = line_number

    try:
        return model_cls.model_validate(values)
    except PydanticValidationError as e:
        first = e.errors()[0]
        key = ".".join(str(p) for p in first["loc"] if not isinstance(p, int))
        raise ConfigError(f"Invalid value for {key!r}: {first['msg']}", lines.get(key), path)


def load_config(path: Union[str, Path], model_cls: Type[ModelT]) -> ModelT:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"No such config file: {path}")
    config = parse_config_text(path.read_text(), model_cls, str(path))
    logger.info(f"Loaded {model_cls.__name__} from {path}")
    return config


def _flatten(model: BaseModel, prefix: str = "") -> List[str]:
    lines = []
    for name in type(model).model_fields:
        value = getattr(model, name)
        key = f"{prefix}{name}"
        if isinstance(value, BaseModel):
            lines.extend(_flatten(value, f"{key}."))
        elif value is None:
            continue
        elif isinstance(value, (tuple, list)):
            lines.append(f"{key} = {' '.join(str(v) for v in value)}")
        elif isinstance(value, bool):
            lines.append(f"{key} = {'true' if value else 'false'}")
        elif isinstance(value, float):
            lines.append(f"{key} = {value!r}")
        else:
            lines.append(f"{key} = {value}")
    return lines


def dump_config(model: BaseModel) -> str:
    """Inverse of parse_config_text"""
    return "\n".join(_flatten(model)) + "\n"


def save_config(model: BaseModel, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(f"# {type(model).__name__}\n" + dump_config(model))
    return path
