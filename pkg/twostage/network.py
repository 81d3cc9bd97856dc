"""
Contracting-expanding segmentation network
==========================================

Level l (1-based) of a depth-d network works at 1/2^(l-1) resolution with
F_l = F_1 * 2^(l-1) features. Every level sees the raw input through its own
convolution (kernel 2l+1, stride 2^(l-1)) and the outputs of all finer levels
through strided kernel-3 convolutions; the streams are concatenated, fused
back to F_l channels and passed through a residual module. The expanding path
up-convolves, crops to the skip's size, concatenates, fuses and runs a
residual module per level. A kernel-3 head and channel softmax give the
foreground probability.

Layer names:
    enc{l}.input   enc{l}.from{i}   enc{l}.fuse   enc{l}.res_a   enc{l}.res_b
    dec{l}.up      dec{l}.fuse      dec{l}.res_a  dec{l}.res_b   head
"""

from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union
import logging
import math

import numpy as np

from foundation.core.autodiff import (
    ConvParams,
    Tensor,
    add,
    channel_softmax,
    concat_channels,
    conv3d,
    conv_transpose3d,
    crop_spatial,
    dropout,
    no_grad,
    parameter,
    relu,
    select_channel,
)
from foundation.core.checkpoint import load_arrays, save_arrays
from foundation.core.errors import CorruptFileError, InvalidArgumentError
from foundation.core.volume import ProbMap, Volume

logger = logging.getLogger(__name__)

IntTriple = Tuple[int, int, int]
DEFAULT_DIMS: IntTriple = (128, 128, 72)


# ============================================================================
# ARCHITECTURE DESCRIPTION
# ============================================================================

@dataclass(frozen=True)
class NetworkSpec:
    """Declarative architecture: depth, width, dropout and input grid"""
    depth: int
    base_features: int = 16
    dropout_rate: float = 0.15
    in_dims: IntTriple = DEFAULT_DIMS

    def __post_init__(self):
        if self.depth < 2:
            raise InvalidArgumentError(f"Network depth must be >= 2, got {self.depth}")
        if self.base_features < 1:
            raise InvalidArgumentError(f"base_features must be >= 1, got {self.base_features}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise InvalidArgumentError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")
        object.__setattr__(self, "in_dims", tuple(int(n) for n in self.in_dims))

    def features(self, level: int) -> int:
        return self.base_features * 2 ** (level - 1)

    def kernel(self, level: int) -> int:
        return 2 * level + 1

    def factor(self, level: int) -> int:
        return 2 ** (level - 1)


def global_spec(in_dims: IntTriple = DEFAULT_DIMS) -> NetworkSpec:
    return NetworkSpec(depth=5, base_features=16, dropout_rate=0.15, in_dims=in_dims)


def local_spec(in_dims: IntTriple = DEFAULT_DIMS) -> NetworkSpec:
    return NetworkSpec(depth=3, base_features=16, dropout_rate=0.15, in_dims=in_dims)


def level_dims(spec: NetworkSpec) -> List[IntTriple]:
    """Spatial dims per level, ceil-divided"""
    return [
        tuple(-(-n // spec.factor(level)) for n in spec.in_dims)
        for level in range(1, spec.depth + 1)
    ]


# ============================================================================
# PARAMETERS
# ============================================================================

def _he_conv(rng: np.random.Generator, name: str, out_ch: int, in_ch: int, k: int,
             stride: int = 1) -> ConvParams:
    fan_in = in_ch * k ** 3
    w = rng.normal(0.0, math.sqrt(2.0 / fan_in), size=(out_ch, in_ch, k, k, k))
    return ConvParams(parameter(w, f"{name}.weight"), parameter(np.zeros(out_ch), f"{name}.bias"), stride)


def _he_up(rng: np.random.Generator, name: str, in_ch: int, out_ch: int) -> ConvParams:
    fan_in = in_ch * 27
    w = rng.normal(0.0, math.sqrt(2.0 / fan_in), size=(in_ch, out_ch, 3, 3, 3))
    return ConvParams(parameter(w, f"{name}.weight"), parameter(np.zeros(out_ch), f"{name}.bias"), 2)


class Network:
    """Realized parameter set of a NetworkSpec"""

    def __init__(self, spec: NetworkSpec, layers: Dict[str, ConvParams]):
        self.spec = spec
        self.layers = layers

    def parameters(self) -> Dict[str, Tensor]:
        params: Dict[str, Tensor] = {}
        for name, layer in self.layers.items():
            params[f"{name}.weight"] = layer.weight
            params[f"{name}.bias"] = layer.bias
        return params

    @property
    def parameter_count(self) -> int:
        return int(sum(t.value.size for t in self.parameters().values()))

    def zero_grad(self) -> None:
        for t in self.parameters().values():
            t.zero_grad()

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: t.value.copy() for name, t in self.parameters().items()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        params = self.parameters()
        missing = set(params) - set(state)
        if missing:
            raise CorruptFileError(f"Checkpoint lacks parameters: {sorted(missing)[:5]}")
        for name, t in params.items():
            if state[name].shape != t.value.shape:
                raise CorruptFileError(
                    f"Parameter {name} has shape {state[name].shape}, expected {t.value.shape}"
                )
            t.value = np.array(state[name], dtype=np.float64)

    # ------------------------------------------------------------------
    # persistence
    # ------------------------------------------------------------------

    def save(self, path: Union[str, Path]) -> None:
        arrays = {
            "spec.depth": np.array(self.spec.depth),
            "spec.base_features": np.array(self.spec.base_features),
            "spec.dropout_rate": np.array(self.spec.dropout_rate),
            "spec.in_dims": np.array(self.spec.in_dims),
        }
        arrays.update(self.state_dict())
        save_arrays(path, arrays)
        logger.info(f"Saved depth-{self.spec.depth} network ({self.parameter_count} parameters) to {path}")

    @classmethod
    def load(cls, path: Union[str, Path]) -> "Network":
        arrays = load_arrays(path)
        try:
            spec = NetworkSpec(
                depth=int(arrays["spec.depth"]),
                base_features=int(arrays["spec.base_features"]),
                dropout_rate=float(arrays["spec.dropout_rate"]),
                in_dims=tuple(int(n) for n in arrays["spec.in_dims"]),
            )
        except KeyError as e:
            raise CorruptFileError(f"{path}: missing network spec entry {e}")
        net = build(spec, np.random.default_rng(0))
        net.load_state_dict(arrays)
        return net

    # ------------------------------------------------------------------
    # forward
    # ------------------------------------------------------------------

    def _block(self, x: Tensor, name: str, training: bool, rng) -> Tensor:
        return dropout(relu(conv3d(x, self.layers[name])), self.spec.dropout_rate, training, rng)

    def _residual(self, x: Tensor, prefix: str, training: bool, rng) -> Tensor:
        h = self._block(x, f"{prefix}.res_a", training, rng)
        h = conv3d(h, self.layers[f"{prefix}.res_b"])
        return dropout(relu(add(h, x)), self.spec.dropout_rate, training, rng)

    def forward_tensor(self, x: Tensor, training: bool = False,
                       rng: Optional[np.random.Generator] = None) -> Tensor:
        """(1, 1, x, y, z) input tensor -> (1, 1, x, y, z) foreground probability"""
        spec = self.spec
        dims = level_dims(spec)
        rate = spec.dropout_rate

        levels: Dict[int, Tensor] = {}
        for level in range(1, spec.depth + 1):
            streams = [self._block(x, f"enc{level}.input", training, rng)]
            for finer in range(1, level):
                streams.append(self._block(levels[finer], f"enc{level}.from{finer}", training, rng))
            h = self._block(concat_channels(streams), f"enc{level}.fuse", training, rng)
            levels[level] = self._residual(h, f"enc{level}", training, rng)

        y = levels[spec.depth]
        for level in range(spec.depth - 1, 0, -1):
            up = dropout(relu(conv_transpose3d(y, self.layers[f"dec{level}.up"])), rate, training, rng)
            up = crop_spatial(up, dims[level - 1])
            h = self._block(concat_channels([up, levels[level]]), f"dec{level}.fuse", training, rng)
            y = self._residual(h, f"dec{level}", training, rng)

        logits = dropout(conv3d(y, self.layers["head"]), rate, training, rng)
        return select_channel(channel_softmax(logits), 1)

    def forward(self, image: Volume, training: bool = False,
                rng: Optional[np.random.Generator] = None) -> ProbMap:
        return forward(self, image, training, rng)


# ============================================================================
# OPERATIONS
# ============================================================================

def build(spec: NetworkSpec, rng: np.random.Generator) -> Network:
    """He-initialized network for `spec`; biases start at zero"""
    layers: Dict[str, ConvParams] = {}
    for level in range(1, spec.depth + 1):
        f = spec.features(level)
        layers[f"enc{level}.input"] = _he_conv(
            rng, f"enc{level}.input", f, 1, spec.kernel(level), spec.factor(level)
        )
        for finer in range(1, level):
            layers[f"enc{level}.from{finer}"] = _he_conv(
                rng, f"enc{level}.from{finer}", f, spec.features(finer), 3, 2 ** (level - finer)
            )
        layers[f"enc{level}.fuse"] = _he_conv(rng, f"enc{level}.fuse", f, level * f, 3)
        layers[f"enc{level}.res_a"] = _he_conv(rng, f"enc{level}.res_a", f, f, 3)
        layers[f"enc{level}.res_b"] = _he_conv(rng, f"enc{level}.res_b", f, f, 3)

    for level in range(spec.depth - 1, 0, -1):
        f = spec.features(level)
        layers[f"dec{level}.up"] = _he_up(rng, f"dec{level}.up", spec.features(level + 1), f)
        layers[f"dec{level}.fuse"] = _he_conv(rng, f"dec{level}.fuse", f, 2 * f, 3)
        layers[f"dec{level}.res_a"] = _he_conv(rng, f"dec{level}.res_a", f, f, 3)
        layers[f"dec{level}.res_b"] = _he_conv(rng, f"dec{level}.res_b", f, f, 3)

    layers["head"] = _he_conv(rng, "head", 2, spec.features(1), 3)
    net = Network(spec, layers)
    logger.debug(f"Built depth-{spec.depth} network, F1={spec.base_features}, {net.parameter_count} parameters")
    return net


def as_input_tensor(image: Volume) -> Tensor:
    return Tensor(np.asarray(image.data, dtype=np.float64)[None, None])


def forward(net: Network, image: Volume, training: bool = False,
            rng: Optional[np.random.Generator] = None) -> ProbMap:
    """Foreground probability map on the input's grid"""
    if image.dims != net.spec.in_dims:
        raise InvalidArgumentError(f"Network expects input dims {net.spec.in_dims}, got {image.dims}")
    x = as_input_tensor(image)
    if training:
        out = net.forward_tensor(x, training=True, rng=rng)
    else:
        with no_grad():
            out = net.forward_tensor(x, training=False)
    return Volume(out.value[0, 0], image.spacing, image.origin)
