"""
Reverse-mode differentiable tensors
===================================

A small tape-free autodiff core: every Tensor remembers its parents and a
closure that pushes its gradient back to them. backward() walks the graph in
reverse topological order. Only the operations the segmentation networks need
are provided.

Feature maps are 5-D: (batch, channels, x, y, z). All arithmetic is float64.
"""

from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple
import logging
import threading

import numpy as np

from .errors import InvalidArgumentError

logger = logging.getLogger(__name__)

DICE_EPSILON = 1e-5


class Tensor:
    """Node in a differentiable computation graph"""
    __slots__ = ("value", "grad", "requires_grad", "_parents", "_backward", "op", "name")

    def __init__(self, value, requires_grad: bool = False, parents: Tuple["Tensor", ...] = (),
                 op: str = "", name: Optional[str] = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents = parents
        self._backward: Callable[[], None] = lambda: None
        self.op = op
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        self.grad += g

    def backward(self) -> None:
        backward(self)

    def __add__(self, other):
        return add(self, _lift(other, self))

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, _lift(other, self))

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, Tensor(-1.0))

    def __sub__(self, other):
        return add(self, -_lift(other, self))

    def __rsub__(self, other):
        return add(_lift(other, self), -self)

    def __repr__(self):
        label = f" {self.name}" if self.name else ""
        return f"<Tensor{label} shape={self.shape} op={self.op or 'leaf'}>"


def _lift(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.broadcast_to(np.asarray(value, dtype=np.float64), like.shape).copy())


def parameter(array: np.ndarray, name: Optional[str] = None) -> Tensor:
    """Leaf tensor that collects gradients"""
    return Tensor(array, requires_grad=True, name=name)


_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Inference scope: results keep no parents, so no graph is retained"""
    previous = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = previous


def _node(value: np.ndarray, parents: Sequence[Tensor], op: str) -> Tensor:
    if not grad_enabled():
        return Tensor(value, op=op)
    return Tensor(value, requires_grad=any(p.requires_grad for p in parents),
                  parents=tuple(parents), op=op)


# ============================================================================
# BACKWARD PASS
# ============================================================================

def _topological_order(root: Tensor) -> List[Tensor]:
    order: List[Tensor] = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited and parent.requires_grad:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """
    Accumulate d(loss)/d(node) into .grad of every node that requires grad.
    Gradients add up across consumers and across calls; zero them between
    optimisation steps.
    """
    if loss.value.size != 1:
        raise InvalidArgumentError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise InvalidArgumentError("Loss does not depend on any parameter")
    order = _topological_order(loss)
    for node in order:
        if node is not loss and node._parents:
            node.grad = None
    loss.grad = np.ones_like(loss.value)
    for node in reversed(order):
        if node.grad is not None:
            node._backward()


# ============================================================================
# ELEMENTWISE
# ============================================================================

def add(x: Tensor, y: Tensor) -> Tensor:
    if x.shape != y.shape:
        raise InvalidArgumentError(f"add: shape mismatch {x.shape} vs {y.shape}")
    out = _node(x.value + y.value, (x, y), "add")

    def _backward():
        x.accumulate(out.grad)
        y.accumulate(out.grad)
    out._backward = _backward
    return out


def mul(x: Tensor, y: Tensor) -> Tensor:
    if y.value.ndim == 0 and x.value.ndim > 0:
        y = _lift(float(y.value), x)
    if x.shape != y.shape:
        raise InvalidArgumentError(f"mul: shape mismatch {x.shape} vs {y.shape}")
    out = _node(x.value * y.value, (x, y), "mul")

    def _backward():
        x.accumulate(out.grad * y.value)
        y.accumulate(out.grad * x.value)
    out._backward = _backward
    return out


def total(x: Tensor) -> Tensor:
    """Sum of all elements, as a scalar"""
    out = _node(np.asarray(x.value.sum()), (x,), "sum")

    def _backward():
        x.accumulate(np.broadcast_to(out.grad, x.shape))
    out._backward = _backward
    return out


def relu(x: Tensor) -> Tensor:
    positive = x.value > 0
    out = _node(np.where(positive, x.value, 0.0), (x,), "relu")

    def _backward():
        x.accumulate(np.where(positive, out.grad, 0.0))
    out._backward = _backward
    return out


def dropout(x: Tensor, rate: float, training: bool, rng: Optional[np.random.Generator]) -> Tensor:
    """Inverted dropout; identity at inference or with rate 0"""
    if not 0.0 <= rate < 1.0:
        raise InvalidArgumentError(f"Dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise InvalidArgumentError("Training-mode dropout needs a random generator")
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    out = _node(x.value * keep, (x,), "dropout")

    def _backward():
        x.accumulate(out.grad * keep)
    out._backward = _backward
    return out


# ============================================================================
# CHANNEL / SPATIAL PLUMBING
# ============================================================================

def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    if not xs:
        raise InvalidArgumentError("concat_channels needs at least one tensor")
    ref = xs[0].shape
    for t in xs[1:]:
        if t.shape[0] != ref[0] or t.shape[2:] != ref[2:]:
            raise InvalidArgumentError(
                f"concat_channels: batch/spatial mismatch {t.shape} vs {ref}"
            )
    if len(xs) == 1:
        return xs[0]
    out = _node(np.concatenate([t.value for t in xs], axis=1), xs, "concat")
    bounds = np.cumsum([0] + [t.shape[1] for t in xs])

    def _backward():
        for t, lo, hi in zip(xs, bounds[:-1], bounds[1:]):
            t.accumulate(out.grad[:, lo:hi])
    out._backward = _backward
    return out


def select_channel(x: Tensor, channel: int) -> Tensor:
    """Single channel kept as a 1-channel tensor"""
    out = _node(x.value[:, channel:channel + 1], (x,), "select")

    def _backward():
        g = np.zeros_like(x.value)
        g[:, channel:channel + 1] = out.grad
        x.accumulate(g)
    out._backward = _backward
    return out


def crop_spatial(x: Tensor, dims: Sequence[int]) -> Tensor:
    """Centred spatial crop (lower side gets the smaller half of the excess)"""
    dims = tuple(int(d) for d in dims)
    spatial = x.shape[2:]
    if any(d > n for d, n in zip(dims, spatial)):
        raise InvalidArgumentError(f"crop_spatial: target {dims} exceeds {spatial}")
    if dims == spatial:
        return x
    window = (slice(None), slice(None)) + tuple(
        slice((n - d) // 2, (n - d) // 2 + d) for n, d in zip(spatial, dims)
    )
    out = _node(x.value[window], (x,), "crop")

    def _backward():
        g = np.zeros_like(x.value)
        g[window] = out.grad
        x.accumulate(g)
    out._backward = _backward
    return out


def channel_softmax(x: Tensor) -> Tensor:
    if x.shape[1] < 2:
        raise InvalidArgumentError(f"channel_softmax needs >= 2 channels, got {x.shape[1]}")
    shifted = x.value - x.value.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=1, keepdims=True)
    out = _node(s, (x,), "softmax")

    def _backward():
        g = out.grad
        x.accumulate(s * (g - (g * s).sum(axis=1, keepdims=True)))
    out._backward = _backward
    return out


# ============================================================================
# CONVOLUTION
# ============================================================================

@dataclass
class ConvParams:
    """
    Convolution parameters. For conv3d the weight layout is
    (out_ch, in_ch, k, k, k); conv_transpose3d reads the same array as
    (in_ch, out_ch, k, k, k), so one array serves both sides of the adjoint.
    """
    weight: Tensor
    bias: Tensor
    stride: int = 1

    def __post_init__(self):
        w = self.weight.shape
        if len(w) != 5 or not (w[2] == w[3] == w[4]):
            raise InvalidArgumentError(f"Weights must be (out, in, k, k, k), got {w}")
        if w[2] % 2 == 0:
            raise InvalidArgumentError(f"Kernel size must be odd, got {w[2]}")
        if self.stride < 1:
            raise InvalidArgumentError(f"Stride must be >= 1, got {self.stride}")

    @property
    def kernel(self) -> int:
        return self.weight.shape[2]

    @property
    def out_ch(self) -> int:
        return self.weight.shape[0]

    @property
    def in_ch(self) -> int:
        return self.weight.shape[1]


def same_padding(n: int, k: int, stride: int) -> Tuple[int, int, int]:
    """(output size, low pad, high pad) for 'same' padding with ceil output size"""
    out = -(-n // stride)
    pad = max((out - 1) * stride + k - n, 0)
    return out, pad // 2, pad - pad // 2


def _pad(x: np.ndarray, pads: Sequence[Tuple[int, int]]) -> np.ndarray:
    return np.pad(x, ((0, 0), (0, 0)) + tuple(pads))


def _offset_window(offset: Sequence[int], stride: int, out_dims: Sequence[int]):
    return (slice(None), slice(None)) + tuple(
        slice(a, a + (n - 1) * stride + 1, stride) for a, n in zip(offset, out_dims)
    )


def _kernel_offsets(k: int):
    for a in range(k):
        for b in range(k):
            for c in range(k):
                yield a, b, c


def _correlate(xp: np.ndarray, w: np.ndarray, stride: int, out_dims: Sequence[int]) -> np.ndarray:
    """out[b,o] = sum_i sum_offset w[o,i,offset] * xp[b,i,stride*pos+offset]"""
    acc = np.zeros((w.shape[0], xp.shape[0]) + tuple(out_dims))
    for off in _kernel_offsets(w.shape[2]):
        slab = xp[_offset_window(off, stride, out_dims)]
        acc += np.tensordot(w[(slice(None), slice(None)) + off], slab, axes=([1], [1]))
    return np.moveaxis(acc, 0, 1)


def _scatter(g: np.ndarray, w: np.ndarray, stride: int, padded_dims: Sequence[int]) -> np.ndarray:
    """Adjoint of _correlate with respect to its input"""
    out_dims = g.shape[2:]
    acc = np.zeros((g.shape[0], w.shape[1]) + tuple(padded_dims))
    for off in _kernel_offsets(w.shape[2]):
        contrib = np.tensordot(w[(slice(None), slice(None)) + off], g, axes=([0], [1]))
        acc[_offset_window(off, stride, out_dims)] += np.moveaxis(contrib, 0, 1)
    return acc


def _weight_grad(g: np.ndarray, xp: np.ndarray, stride: int, k: int) -> np.ndarray:
    out_dims = g.shape[2:]
    gw = np.zeros((g.shape[1], xp.shape[1], k, k, k))
    for off in _kernel_offsets(k):
        slab = xp[_offset_window(off, stride, out_dims)]
        gw[(slice(None), slice(None)) + off] = np.tensordot(g, slab, axes=([0, 2, 3, 4], [0, 2, 3, 4]))
    return gw


def conv3d(x: Tensor, p: ConvParams) -> Tensor:
    """Cross-correlation with zero 'same' padding; spatial out = ceil(in / stride)"""
    if x.value.ndim != 5:
        raise InvalidArgumentError(f"conv3d expects a 5-D tensor, got {x.shape}")
    if x.shape[1] != p.in_ch:
        raise InvalidArgumentError(f"conv3d: input has {x.shape[1]} channels, weights expect {p.in_ch}")
    k, s = p.kernel, p.stride
    geometry = [same_padding(n, k, s) for n in x.shape[2:]]
    out_dims = [g[0] for g in geometry]
    pads = [(g[1], g[2]) for g in geometry]
    xp = _pad(x.value, pads)
    w = p.weight.value
    value = _correlate(xp, w, s, out_dims) + p.bias.value[None, :, None, None, None]
    out = _node(value, (x, p.weight, p.bias), "conv3d")

    def _backward():
        g = out.grad
        if x.requires_grad:
            gxp = _scatter(g, w, s, xp.shape[2:])
            crop = (slice(None), slice(None)) + tuple(
                slice(lo, lo + n) for (lo, _), n in zip(pads, x.shape[2:])
            )
            x.accumulate(gxp[crop])
        p.weight.accumulate(_weight_grad(g, xp, s, k))
        p.bias.accumulate(g.sum(axis=(0, 2, 3, 4)))
    out._backward = _backward
    return out


def conv_transpose3d(x: Tensor, p: ConvParams) -> Tensor:
    """
    Up-convolution doubling each spatial axis: the adjoint of a stride-2
    conv3d on the doubled grid. Weights are read as (in_ch, out_ch, k, k, k).
    """
    if p.stride != 2:
        raise InvalidArgumentError(f"conv_transpose3d supports stride 2 only, got {p.stride}")
    if x.value.ndim != 5 or x.shape[1] != p.weight.shape[0]:
        raise InvalidArgumentError(
            f"conv_transpose3d: input {x.shape} does not match weights {p.weight.shape}"
        )
    k, s = p.kernel, p.stride
    in_dims = x.shape[2:]
    full_dims = [2 * n for n in in_dims]
    pads = []
    for n, big in zip(in_dims, full_dims):
        _, lo, hi = same_padding(big, k, s)
        pads.append((lo, hi))
    padded = [big + lo + hi for big, (lo, hi) in zip(full_dims, pads)]
    crop = (slice(None), slice(None)) + tuple(slice(lo, lo + big) for (lo, _), big in zip(pads, full_dims))
    w = p.weight.value
    bias = p.bias.value
    if bias.shape != (w.shape[1],):
        raise InvalidArgumentError(f"conv_transpose3d: bias must have {w.shape[1]} entries")
    value = _scatter(x.value, w, s, padded)[crop] + bias[None, :, None, None, None]
    out = _node(value, (x, p.weight, p.bias), "conv_transpose3d")

    def _backward():
        gp = _pad(out.grad, pads)
        if x.requires_grad:
            x.accumulate(_correlate(gp, w, s, in_dims))
        p.weight.accumulate(_weight_grad(x.value, gp, s, k))
        p.bias.accumulate(out.grad.sum(axis=(0, 2, 3, 4)))
    out._backward = _backward
    return out


# ============================================================================
# OBJECTIVE
# ============================================================================

def soft_dice(p: Tensor, g, eps: float = DICE_EPSILON) -> Tensor:
    """
    D = (2 sum(p g) + eps) / (sum(p) + sum(g) + eps), differentiable in p.
    `g` is a binary array or tensor of the same shape; it receives no gradient.
    """
    target = g.value if isinstance(g, Tensor) else np.asarray(g, dtype=np.float64)
    if target.shape != p.shape:
        if target.size == p.value.size:
            target = target.reshape(p.shape)
        else:
            raise InvalidArgumentError(f"soft_dice: shape mismatch {p.shape} vs {target.shape}")
    num = 2.0 * float((p.value * target).sum()) + eps
    den = float(p.value.sum()) + float(target.sum()) + eps
    out = _node(np.asarray(num / den), (p,), "soft_dice")

    def _backward():
        p.accumulate(float(out.grad) * (2.0 * target * den - num) / (den * den))
    out._backward = _backward
    return out


def dice_loss(p: Tensor, g) -> Tensor:
    """1 - soft Dice"""
    return 1.0 - soft_dice(p, g)
