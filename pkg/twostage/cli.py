"""
Command line
============

    python -m twostage make-phantoms --n 24 --out data/ --seed 1
    python -m twostage build-shape-model --masks data/ --out shape.model
    python -m twostage train --images data/ --masks data/ --stage global --shape-model shape.model --out global.ckpt
    python -m twostage cross-validate --k 5 --images data/ --masks data/ --out cv.csv
    python -m twostage make-bundle --global global.ckpt --local local.ckpt --shape-model shape.model --out bundle/
    python -m twostage infer --image case.mha --bundle bundle/ --out seg.mha --emit-box
    python -m twostage eval --pred seg.mha --gt case_mask.mha
    python -m twostage augment --image case.mha --mask case_mask.mha --shape-model shape.model --n 4 --out aug/
    python -m twostage serve --bundle bundle/ --port 8000

Exit status: 0 success, 1 usage or configuration error, 2 runtime failure.
"""

from pathlib import Path
from typing import List, Optional, Sequence, Tuple
import argparse
import json
import logging
import os
import sys

import numpy as np

from foundation.core.config import AugmentConfig, PipelineConfig, TrainConfig, load_config, save_config
from foundation.core.database import configure_database
from foundation.core.errors import ConfigError, SegmentationError
from foundation.core.metaimage import read_volume, write_volume
from foundation.core.volume import Mask, Volume

from . import network, shapemodel
from .augment import augment_sample
from .network import Network
from .phantoms import make_phantoms
from .pipeline import (
    PipelineBundle,
    evaluate,
    evaluate_cases,
    segment_with_trace,
    write_eval_csv,
)
from .train import (
    cross_validate,
    prepare_global_pair,
    prepare_local_pair,
    train,
    train_final,
    write_report,
)

logger = logging.getLogger(__name__)

VOLUME_SUFFIXES = (".mha", ".mhd")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ============================================================================
# HELPERS
# ============================================================================

def _expand(paths: Sequence[str], pattern: str = "") -> List[Path]:
    """Files as given; directories expand to their sorted volume files containing `pattern`"""
    files: List[Path] = []
    for p in map(Path, paths):
        if p.is_dir():
            files.extend(
                f for f in sorted(p.iterdir())
                if f.suffix.lower() in VOLUME_SUFFIXES and pattern in f.name
            )
        else:
            files.append(p)
    return files


def _load_pairs(images: Sequence[str], masks: Sequence[str]) -> List[Tuple[Volume, Mask]]:
    image_files = _expand(images, "_image")
    mask_files = _expand(masks, "_mask")
    if len(image_files) != len(mask_files):
        raise UsageError(f"{len(image_files)} images but {len(mask_files)} masks")
    if not image_files:
        raise UsageError("No training volumes found")
    return [(read_volume(i), read_volume(m)) for i, m in zip(image_files, mask_files)]


def _pipeline_config(path: Optional[str]) -> PipelineConfig:
    return load_config(path, PipelineConfig) if path else PipelineConfig()


def _train_config(path: Optional[str]) -> TrainConfig:
    return load_config(path, TrainConfig) if path else TrainConfig()


def _stage_data(args, pipeline: PipelineConfig, cfg: TrainConfig):
    """Training pairs and network spec for one stage"""
    geometry = pipeline.geometry()
    pairs = _load_pairs(args.images, args.masks)
    if args.stage == "global":
        data = [prepare_global_pair(image, mask, geometry) for image, mask in pairs]
        spec = network.NetworkSpec(
            args.depth or pipeline.global_depth, pipeline.base_features,
            pipeline.dropout_rate, tuple(geometry.global_dims),
        )
    else:
        rng = np.random.default_rng(cfg.seed)
        data = [
            prepare_local_pair(image, mask, rng, cfg.local_jitter_mm, geometry)[:2]
            for image, mask in pairs
        ]
        spec = network.NetworkSpec(
            args.depth or pipeline.local_depth, pipeline.base_features,
            pipeline.dropout_rate, tuple(geometry.local_dims),
        )
    return data, spec


def _shape_model(path: Optional[str]) -> Optional[shapemodel.ShapeModel]:
    return shapemodel.ShapeModel.load(path) if path else None


# ============================================================================
# COMMANDS
# ============================================================================

def cmd_make_phantoms(args) -> int:
    out = Path(args.out)
    phantoms = make_phantoms(args.n, np.random.default_rng(args.seed), tuple(args.dims), args.spacing)
    for i, (image, mask) in enumerate(phantoms):
        write_volume(image, out / f"case{i:03d}_image.mha")
        write_volume(mask, out / f"case{i:03d}_mask.mha")
    print(f"wrote {len(phantoms)} phantoms to {out}")
    return 0


def cmd_build_shape_model(args) -> int:
    pipeline = _pipeline_config(args.pipeline_config)
    masks = [read_volume(p) for p in _expand(args.masks, "_mask")]
    model = shapemodel.build(masks, args.modes or pipeline.shape_modes, pipeline.geometry())
    model.save(args.out)
    print(f"shape model: {len(masks)} shapes, {model.num_modes} modes -> {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = _train_config(args.config)
    pipeline = _pipeline_config(args.pipeline_config)
    model = _shape_model(args.shape_model)
    if cfg.augment_enabled and cfg.augment.deform_mode == "shape" and model is None:
        raise UsageError("Shape-model augmentation needs --shape-model (or augment.deform_mode = random|none)")
    data, spec = _stage_data(args, pipeline, cfg)

    if args.weights:
        weights = np.loadtxt(args.weights, delimiter=",", ndmin=1)
    else:
        weights = None
    net = network.build(spec, np.random.default_rng(cfg.seed))
    report = train(net, data, weights, cfg, model, stage=args.stage)
    net.save(args.out)
    write_report(report, Path(args.out).with_suffix(".report"))
    print(f"{args.stage}: {report.epochs} epochs, final loss {report.loss_history[-1]:.5f} -> {args.out}")
    return 0


def cmd_cross_validate(args) -> int:
    cfg = _train_config(args.config)
    pipeline = _pipeline_config(args.pipeline_config)
    model = _shape_model(args.shape_model)
    data, spec = _stage_data(args, pipeline, cfg)

    if args.final_out:
        net, report, scores = train_final(data, cfg, spec, model, k=args.k, stage=args.stage)
        net.save(args.final_out)
        write_report(report, Path(args.final_out).with_suffix(".report"))
    else:
        scores = cross_validate(data, args.k, cfg, spec, model, stage=args.stage)

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w") as f:
        f.write("index,dice\n")
        for i, d in enumerate(scores):
            f.write(f"{i},{d:.6f}\n")
    print(f"cross-validation: mean Dice {np.mean(scores):.4f} over {len(scores)} images -> {out}")
    return 0


def cmd_make_bundle(args) -> int:
    config = _pipeline_config(args.pipeline_config)
    bundle = PipelineBundle(
        global_net=Network.load(args.global_ckpt),
        local_net=Network.load(args.local_ckpt),
        shape_model=shapemodel.ShapeModel.load(args.shape_model),
        config=config,
    )
    bundle.save(args.out)
    print(f"bundle -> {args.out}")
    return 0


def cmd_infer(args) -> int:
    bundle = PipelineBundle.load(args.bundle)
    image = read_volume(args.image)
    trace = segment_with_trace(bundle, image)
    out = Path(args.out)
    write_volume(trace.mask, out)
    if args.emit_global_prob:
        write_volume(trace.global_prob, out.with_name(f"{out.stem}_global_prob.mha"), "MET_FLOAT")
    if args.emit_box:
        box_path = out.with_name(f"{out.stem}_box.json")
        box_path.write_text(json.dumps(trace.summary(), indent=2))
        print(json.dumps(trace.box.to_dict()))
    print(f"mask: {int(np.count_nonzero(trace.mask.data))} voxels -> {out}")
    return 0


def cmd_eval(args) -> int:
    preds, gts = _expand(args.pred, "_"), _expand(args.gt, "_")
    if len(preds) != len(gts):
        raise UsageError(f"{len(preds)} predictions but {len(gts)} ground truths")
    results = [evaluate(read_volume(p), read_volume(g), case_id=p.stem) for p, g in zip(preds, gts)]
    for r in results:
        print(
            f"{r.case_id}: dice={r.dice:.6f} "
            f"start_mm={' '.join(f'{e:.2f}' for e in r.start_errors)} "
            f"end_mm={' '.join(f'{e:.2f}' for e in r.end_errors)} "
            f"size_mm={' '.join(f'{e:.2f}' for e in r.size_errors)}"
        )
    if len(results) > 1:
        dice = evaluate_cases(results)["dice"]
        print(f"mean dice={dice['mean']:.6f} std={dice['std']:.6f} n={dice['n']}")
    if args.csv:
        write_eval_csv(results, args.csv)
    return 0


def cmd_augment(args) -> int:
    cfg = load_config(args.config, AugmentConfig) if args.config else AugmentConfig()
    model = _shape_model(args.shape_model)
    image, mask = read_volume(args.image), read_volume(args.mask)
    rng = np.random.default_rng(cfg.seed if args.seed is None else args.seed)
    out = Path(args.out)
    for i in range(args.n):
        aug_image, aug_mask = augment_sample(image, mask, model, cfg, rng)
        write_volume(aug_image, out / f"aug{i:03d}_image.mha", "MET_FLOAT")
        write_volume(aug_mask, out / f"aug{i:03d}_mask.mha", "MET_UCHAR")
    save_config(cfg, out / "augment.cfg")
    print(f"wrote {args.n} augmented pairs to {out}")
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    if args.bundle:
        os.environ["SEGMENTATION_BUNDLE_DIR"] = args.bundle
    uvicorn.run("main:app", host=args.host, port=args.port)
    return 0


# ============================================================================
# PARSER
# ============================================================================

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="twostage", description="Two-stage volumetric segmentation")
    parser.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    parser.add_argument("--db", default=None, help="SQLAlchemy URL of the run ledger")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("make-phantoms", help="Write synthetic image/mask pairs")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dims", type=int, nargs=3, default=[128, 128, 72])
    p.add_argument("--spacing", type=float, default=1.0)
    p.set_defaults(func=cmd_make_phantoms)

    p = sub.add_parser("build-shape-model", help="PCA shape model from training masks")
    p.add_argument("--masks", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--modes", type=int, default=None)
    p.add_argument("--pipeline-config", default=None)
    p.set_defaults(func=cmd_build_shape_model)

    for name, func, help_text in (
        ("train", cmd_train, "Train the global or local network"),
        ("cross-validate", cmd_cross_validate, "k-fold validation Dice per image"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--images", nargs="+", required=True)
        p.add_argument("--masks", nargs="+", required=True)
        p.add_argument("--stage", choices=["global", "local"], default="global")
        p.add_argument("--shape-model", default=None)
        p.add_argument("--config", default=None, help="TrainConfig key = value file")
        p.add_argument("--pipeline-config", default=None)
        p.add_argument("--depth", type=int, default=None)
        p.add_argument("--out", required=True)
        if name == "train":
            p.add_argument("--weights", default=None, help="File of comma-separated per-image sampling weights")
        else:
            p.add_argument("--k", type=int, default=5)
            p.add_argument("--final-out", default=None,
                           help="Also train a difficulty-weighted final network and save it here")
        p.set_defaults(func=func)

    p = sub.add_parser("make-bundle", help="Assemble a bundle directory")
    p.add_argument("--global", dest="global_ckpt", required=True)
    p.add_argument("--local", dest="local_ckpt", required=True)
    p.add_argument("--shape-model", required=True)
    p.add_argument("--pipeline-config", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_make_bundle)

    p = sub.add_parser("infer", help="Segment one image")
    p.add_argument("--image", required=True)
    p.add_argument("--bundle", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--emit-global-prob", action="store_true")
    p.add_argument("--emit-box", action="store_true")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="Dice and box errors")
    p.add_argument("--pred", nargs="+", required=True)
    p.add_argument("--gt", nargs="+", required=True)
    p.add_argument("--csv", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("augment", help="Write augmented copies of one pair")
    p.add_argument("--image", required=True)
    p.add_argument("--mask", required=True)
    p.add_argument("--shape-model", default=None)
    p.add_argument("--n", type=int, default=4)
    p.add_argument("--config", default=None, help="AugmentConfig key = value file")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("serve", help="Run the HTTP service")
    p.add_argument("--bundle", default=None)
    p.add_argument("--host", default="0.0.0.0")
    p.add_argument("--port", type=int, default=8000)
    p.set_defaults(func=cmd_serve)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(str(e), file=sys.stderr)
        return 1
    except SystemExit as e:
        # --help
        return int(e.code or 0)

    logging.basicConfig(level=getattr(logging, args.log_level))
    try:
        if args.db:
            configure_database(args.db)
        return args.func(args)
    except (UsageError, ConfigError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (SegmentationError, OSError) as e:
        logger.error(f"{args.command} failed: {e}")
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
