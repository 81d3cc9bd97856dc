"""
Training
========

One routine trains both networks: Adam on 1 - soft Dice, batch size one,
learning rate multiplied by lr_factor whenever the mean training loss of the
last plateau window fails to improve on the window before it. Around it sit
the training-pair preparation for both stages, k-fold cross-validation and the
difficulty-weighted final run.
"""

from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union
import csv
import logging
import time

import numpy as np

from foundation.core.autodiff import Tensor, backward, dice_loss, soft_dice
from foundation.core.config import GeometryConfig, TrainConfig
from foundation.core.database import store_training_run
from foundation.core.errors import InsufficientDataError, InvalidArgumentError
from foundation.core.metadata import calculate_content_hash
from foundation.core.volume import Box, Mask, Volume, normalize, threshold, tight_box

from .augment import augment_sample
from .locate import BoxTransform, resample_local
from .network import Network, NetworkSpec, as_input_tensor, build, forward
from .pipeline import dice_hard, mask_on_grid, to_global_grid
from .shapemodel import ShapeModel

logger = logging.getLogger(__name__)

Sample = Tuple[Volume, Mask]
PathLike = Union[str, Path]


# ============================================================================
# OPTIMIZER
# ============================================================================

@dataclass
class AdamState:
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_step(params: Dict[str, Tensor], grads: Dict[str, Optional[np.ndarray]], state: AdamState,
              lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    """Bias-corrected Adam update applied to params in place; missing grads count as zero"""
    state.step += 1
    t = state.step
    for name, p in params.items():
        g = grads.get(name)
        g = np.zeros_like(p.value) if g is None else np.asarray(g, dtype=np.float64)
        if g.shape != p.value.shape:
            raise InvalidArgumentError(f"Gradient for {name} has shape {g.shape}, parameter {p.value.shape}")
        m = state.m.get(name, np.zeros_like(p.value))
        v = state.v.get(name, np.zeros_like(p.value))
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1 ** t)
        v_hat = v / (1.0 - beta2 ** t)
        p.value = p.value - lr * m_hat / (np.sqrt(v_hat) + eps)
        state.m[name], state.v[name] = m, v
    return state


# ============================================================================
# TRAINING LOOP
# ============================================================================

@dataclass
class TrainReport:
    stage: str
    loss_history: List[float] = field(default_factory=list)
    final_dice: List[float] = field(default_factory=list)
    lr_changes: List[Tuple[int, float]] = field(default_factory=list)
    wall_clock_s: float = 0.0

    @property
    def epochs(self) -> int:
        return len(self.loss_history)

    @property
    def lr_history(self) -> List[float]:
        return [lr for _, lr in self.lr_changes]

    def to_dict(self):
        return {
            "stage": self.stage,
            "epochs": self.epochs,
            "final_loss": self.loss_history[-1] if self.loss_history else None,
            "final_lr": self.lr_changes[-1][1] if self.lr_changes else None,
            "mean_final_dice": float(np.mean(self.final_dice)) if self.final_dice else None,
            "lr_changes": [[e, lr] for e, lr in self.lr_changes],
            "wall_clock_s": round(self.wall_clock_s, 3),
        }


def _check_weights(weights: Optional[Sequence[float]], n: int) -> np.ndarray:
    if weights is None:
        return np.ones(n)
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (n,):
        raise InvalidArgumentError(f"Expected {n} sampling weights, got {w.shape}")
    if np.any(w < 0) or not np.all(np.isfinite(w)) or w.sum() <= 0:
        raise InvalidArgumentError("Sampling weights must be finite, nonnegative and not all zero")
    return w


def plateaued(history: Sequence[float], window: int, threshold_rel: float) -> bool:
    """Mean of the last window improved by less than threshold_rel on the window before"""
    if len(history) < 2 * window:
        return False
    previous = float(np.mean(history[-2 * window: -window]))
    current = float(np.mean(history[-window:]))
    return (previous - current) < threshold_rel * max(abs(previous), 1e-12)


def _parameter_hash(net: Network) -> str:
    return calculate_content_hash(net.state_dict())


def train(net: Network, dataset: Sequence[Sample], weights: Optional[Sequence[float]],
          cfg: TrainConfig, model: Optional[ShapeModel], stage: str = "global") -> TrainReport:
    """
    Train `net` in place. Each epoch visits len(dataset) samples: a permutation
    when the weights are equal, otherwise draws with replacement in proportion
    to the weights.
    """
    if not dataset:
        raise InsufficientDataError("Training needs at least one sample")
    w = _check_weights(weights, len(dataset))
    uniform = bool(np.allclose(w, w[0]))
    probabilities = w / w.sum()

    order_rng, dropout_rng, augment_rng = (
        np.random.default_rng(s) for s in np.random.SeedSequence(cfg.seed).spawn(3)
    )
    params = net.parameters()
    state = AdamState()
    lr = cfg.lr
    report = TrainReport(stage=stage, lr_changes=[(0, lr)])
    last_change = 0
    at_floor_logged = False
    started = time.perf_counter()

    for epoch in range(1, cfg.epochs + 1):
        if uniform:
            order = order_rng.permutation(len(dataset))
        else:
            order = order_rng.choice(len(dataset), size=len(dataset), p=probabilities)

        losses = []
        for i in order:
            image, mask = dataset[i]
            if cfg.augment_enabled:
                image, mask = augment_sample(image, mask, model, cfg.augment, augment_rng)
            net.zero_grad()
            prob = net.forward_tensor(as_input_tensor(image), training=True, rng=dropout_rng)
            loss = dice_loss(prob, np.asarray(mask.data, dtype=np.float64) > 0)
            backward(loss)
            adam_step(params, {name: p.grad for name, p in params.items()}, state, lr,
                      cfg.beta1, cfg.beta2, cfg.adam_eps)
            losses.append(float(loss.value))
        report.loss_history.append(float(np.mean(losses)))

        if epoch - last_change >= 2 * cfg.plateau_window and plateaued(
            report.loss_history, cfg.plateau_window, cfg.plateau_threshold
        ):
            lowered = lr * cfg.lr_factor
            if lowered >= cfg.lr_floor:
                lr = lowered
                last_change = epoch
                report.lr_changes.append((epoch, lr))
                logger.info(f"[{stage}] epoch {epoch}: loss plateaued, lr -> {lr:.3g}")
            elif not at_floor_logged:
                logger.warning(f"[{stage}] epoch {epoch}: loss plateaued but lr {lr:.3g} is at its floor")
                at_floor_logged = True

        if epoch % cfg.log_every == 0 or epoch == cfg.epochs:
            logger.info(f"[{stage}] epoch {epoch}/{cfg.epochs}: loss {report.loss_history[-1]:.5f}, lr {lr:.3g}")
        if cfg.checkpoint_dir and cfg.checkpoint_every and epoch % cfg.checkpoint_every == 0:
            net.save(Path(cfg.checkpoint_dir) / f"{stage}-epoch{epoch:04d}.ckpt")

    report.final_dice = [inference_dice(net, image, mask) for image, mask in dataset]
    report.wall_clock_s = time.perf_counter() - started
    logger.info(
        f"[{stage}] done: {report.epochs} epochs in {report.wall_clock_s:.1f} s, "
        f"mean soft Dice {np.mean(report.final_dice):.4f}"
    )
    store_training_run(
        stage=stage,
        epochs=report.epochs,
        final_loss=report.loss_history[-1],
        final_lr=lr,
        lr_changes=[[e, r] for e, r in report.lr_changes],
        mean_train_dice=float(np.mean(report.final_dice)),
        wall_clock_s=report.wall_clock_s,
        parameter_hash=_parameter_hash(net),
        config=cfg.model_dump(),
    )
    return report


def inference_dice(net: Network, image: Volume, mask: Mask) -> float:
    """Soft Dice of the deterministic forward pass"""
    prob = forward(net, image)
    return float(soft_dice(Tensor(prob.data), np.asarray(mask.data) > 0).value)


# ============================================================================
# TRAINING PAIRS
# ============================================================================

def prepare_global_pair(image: Volume, mask: Mask, geometry: Optional[GeometryConfig] = None) -> Sample:
    """Global network input (isotropic, cropped, normalized) and its mask"""
    geometry = geometry or GeometryConfig()
    global_image = to_global_grid(image, geometry)
    return normalize(global_image), mask_on_grid(mask, global_image)


def jittered_box(mask: Mask, rng: np.random.Generator, jitter_mm: float) -> Box:
    """Ground-truth tight box with every face moved by U[-jitter, +jitter] mm"""
    box = tight_box(mask)
    if jitter_mm <= 0:
        return box
    start = tuple(s + rng.uniform(-jitter_mm, jitter_mm) for s in box.start)
    end = tuple(e + rng.uniform(-jitter_mm, jitter_mm) for e in box.end)
    # keep at least one voxel of extent per axis
    end = tuple(max(e, s + sp) for s, e, sp in zip(start, end, mask.spacing))
    return Box(start, end)


def prepare_local_pair(image: Volume, mask: Mask, rng: np.random.Generator, jitter_mm: float = 3.0,
                       geometry: Optional[GeometryConfig] = None) -> Tuple[Volume, Mask, BoxTransform]:
    """Local network input around a jittered ground-truth box, with the mask on the same grid"""
    box = jittered_box(mask, rng, jitter_mm)
    local_image, t = resample_local(image, box, geometry)
    return local_image, mask_on_grid(mask, local_image), t


# ============================================================================
# CROSS-VALIDATION AND FINAL TRAINING
# ============================================================================

def fold_split(n: int, k: int, seed: int) -> List[np.ndarray]:
    """Contiguous folds of a seeded permutation"""
    if n < k:
        raise InsufficientDataError(f"{k}-fold cross-validation needs at least {k} samples, got {n}")
    return np.array_split(np.random.default_rng(seed).permutation(n), k)


def cross_validate(dataset: Sequence[Sample], k: int, cfg: TrainConfig, spec: NetworkSpec,
                   model: Optional[ShapeModel], stage: str = "cv") -> List[float]:
    """Hard Dice (threshold 0.5) of every sample, predicted by the fold that held it out"""
    folds = fold_split(len(dataset), k, cfg.seed)
    scores = np.full(len(dataset), np.nan)
    for f, held_out in enumerate(folds):
        held = set(int(i) for i in held_out)
        training = [dataset[i] for i in range(len(dataset)) if i not in held]
        net = build(spec, np.random.default_rng(cfg.seed + f))
        train(net, training, None, cfg, model, stage=f"{stage}-fold{f + 1}")
        for i in held_out:
            image, mask = dataset[int(i)]
            scores[int(i)] = dice_hard(threshold(forward(net, image), 0.5), mask)
        logger.info(f"[{stage}] fold {f + 1}/{k}: mean validation Dice {np.mean(scores[held_out]):.4f}")
    return [float(s) for s in scores]


def difficulty_weights(val_dice: Sequence[float]) -> np.ndarray:
    """w_i = 1 - D_i + 0.05, normalized to mean 1"""
    d = np.asarray(val_dice, dtype=np.float64)
    if d.size == 0:
        return d
    if np.any(d < 0) or np.any(d > 1):
        raise InvalidArgumentError("Validation Dice scores must lie in [0, 1]")
    w = 1.0 - d + 0.05
    return w / w.mean()


def train_final(dataset: Sequence[Sample], cfg: TrainConfig, spec: NetworkSpec, model: Optional[ShapeModel],
                k: int = 5, stage: str = "final") -> Tuple[Network, TrainReport, List[float]]:
    """Cross-validate, weight samples by difficulty, then train on everything"""
    scores = cross_validate(dataset, k, cfg, spec, model, stage=f"{stage}-cv")
    weights = difficulty_weights(scores)
    net = build(spec, np.random.default_rng(cfg.seed))
    report = train(net, dataset, weights, cfg, model, stage=stage)
    return net, report, scores


# ============================================================================
# REPORTS
# ============================================================================

def write_report(report: TrainReport, path: PathLike) -> Tuple[Path, Path]:
    """key = value summary at `path`, per-epoch history CSV next to it"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    summary = report.to_dict()
    lines = [f"{key} = {value}" for key, value in summary.items() if key != "lr_changes"]
    lines.append("lr_changes = " + " ".join(f"{e}:{lr:.6g}" for e, lr in report.lr_changes))
    lines += [f"final_dice.{i} = {d:.6f}" for i, d in enumerate(report.final_dice)]
    path.write_text("\n".join(lines) + "\n")

    history_path = path.with_suffix(".csv")
    lr_at = dict(report.lr_changes)
    lr = report.lr_changes[0][1] if report.lr_changes else float("nan")
    with open(history_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["epoch", "loss", "lr"])
        for epoch, loss in enumerate(report.loss_history, start=1):
            # a change recorded at epoch e takes effect from e + 1
            writer.writerow([epoch, f"{loss:.8f}", f"{lr:.6g}"])
            lr = lr_at.get(epoch, lr)
    return path, history_path
