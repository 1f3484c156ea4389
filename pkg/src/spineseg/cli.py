"""Command-line pipeline: phantom -> make-masks -> train -> predict -> evaluate.

One binary with subcommands; a YAML config file with sections named after the
modules (``preprocess``, ``maskgen``, ``model``, ``train``) feeds the knobs,
and a few common flags override it per run.

Exit codes: 0 success, 2 config/usage error, 3 data error, 4 divergence.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import dataclass
from pathlib import Path

import yaml

from . import dataio, maskgen, net
from . import evaluation as ev
from . import train as tr
from . import volume as vol
from .errors import ConfigError, DataError, DivergenceError
from .preprocess import PreprocessConfig, denoise, resize_and_normalize, resize_mask

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_DIVERGENCE = 4

_SECTIONS = ("preprocess", "maskgen", "model", "train")


@dataclass
class RunConfig:
    """All knobs of a run: preprocessing, masking, model, and training."""

    preprocess: PreprocessConfig
    model: net.ModelConfig
    train: tr.TrainConfig
    black_threshold: float = maskgen.DEFAULT_BLACK_THRESHOLD

    @classmethod
    def load(cls, path: str | Path | None) -> "RunConfig":
        raw: dict = {}
        if path is not None:
            path = Path(path)
            if not path.is_file():
                raise ConfigError(f"config file not found: {path}")
            try:
                raw = yaml.safe_load(path.read_text()) or {}
            except yaml.YAMLError as exc:
                raise ConfigError(f"cannot parse {path}: {exc}") from exc
            if not isinstance(raw, dict):
                raise ConfigError(f"{path}: top level must be a mapping of sections")
            unknown = set(raw) - set(_SECTIONS)
            if unknown:
                raise ConfigError(f"{path}: unknown config sections {sorted(unknown)}")

        def section(name) -> dict:
            sec = raw.get(name, {})
            if not isinstance(sec, dict):
                raise ConfigError(f"config section {name!r} must be a mapping")
            return sec

        try:
            pp_sec = section("preprocess")
            if "crop" in pp_sec and pp_sec["crop"] is not None:
                pp_sec["crop"] = tuple(pp_sec["crop"])
            mask_sec = section("maskgen")
            threshold = float(mask_sec.pop("black_threshold", maskgen.DEFAULT_BLACK_THRESHOLD))
            if mask_sec:
                raise ConfigError(f"unknown maskgen keys {sorted(mask_sec)}")
            return cls(
                preprocess=PreprocessConfig(**pp_sec),
                model=net.ModelConfig(**section("model")),
                train=tr.TrainConfig(**section("train")),
                black_threshold=threshold,
            )
        except TypeError as exc:
            raise ConfigError(f"bad config field: {exc}") from exc


def _require_dir(path: str) -> Path:
    p = Path(path)
    if not p.is_dir():
        raise DataError(f"directory not found: {p}")
    return p


def cmd_phantom(args: argparse.Namespace) -> int:
    config = dataio.PhantomConfig(
        n_slices=args.slices,
        height=args.height,
        width=args.width,
        n_vertebrae=args.vertebrae,
        noise_sigma=args.noise,
        seed=args.seed,
        slice_gap_px=args.gap_px,
    )
    stack, annotations, masks = dataio.generate_phantom(config)
    out = Path(args.out)
    dataio.save_slice_stack(stack, out)
    dataio.save_annotations(annotations, out / "annotations.json")
    for i, mask in enumerate(masks):
        dataio.write_mask(mask, out / "masks" / f"{i:04d}.png")
    print(
        f"phantom: {stack.n_slices} slices {args.height}x{args.width}, "
        f"{args.vertebrae} vertebrae, noise {args.noise}, seed {args.seed} -> {out}"
    )
    return EXIT_OK


def cmd_make_masks(args: argparse.Namespace) -> int:
    run = RunConfig.load(args.config)
    data = _require_dir(args.data)
    stack = dataio.load_slice_stack(data)
    annotations = dataio.load_annotations(data / "annotations.json", stack.n_slices)
    volume = vol.reconstruct_volume(stack, target_gap_px=args.gap_px)
    step = stack.slice_gap_px // args.gap_px

    remapped = dataio.AnnotationSet(
        annotations=[
            dataio.VertebraAnnotation(
                slice_index=a.slice_index * step,
                label=a.label,
                centroid=a.centroid,
                corner_a=a.corner_a,
                corner_b=a.corner_b,
            )
            for a in annotations
        ]
    )
    filled = maskgen.fill_annotation_gaps(remapped, volume.n_slices)

    out = Path(args.out)
    dense = dataio.SliceStack(
        slices=volume.voxels, slice_gap_px=args.gap_px, pixel_per_mm=volume.pixel_per_mm
    )
    dataio.save_slice_stack(dense, out)
    dataio.save_annotations(filled, out / "annotations.json")
    for i in range(volume.n_slices):
        mask = maskgen.paint_mask(
            volume.voxels[i], filled.for_slice(i), black_threshold=run.black_threshold
        )
        dataio.write_mask(mask, out / "masks" / f"{i:04d}.png")
    print(
        f"make-masks: {stack.n_slices} slices densified to {volume.n_slices} "
        f"(gap {stack.slice_gap_px} -> {args.gap_px} px), masks written to {out / 'masks'}"
    )
    return EXIT_OK


def _load_pairs(data_dir: Path, run: RunConfig):
    stack = dataio.load_slice_stack(data_dir)
    masks = dataio.load_mask_dir(data_dir / "masks")
    if len(masks) != stack.n_slices:
        raise DataError(
            f"{data_dir}: {stack.n_slices} slices but {len(masks)} masks"
        )
    size = run.preprocess.target_size
    pairs = []
    for i in range(stack.n_slices):
        x = resize_and_normalize(denoise(stack.slices[i], run.preprocess), run.preprocess)
        y = resize_mask(masks[i], (size, size))
        pairs.append((x, y))
    return pairs


def cmd_train(args: argparse.Namespace) -> int:
    run = RunConfig.load(args.config)
    if args.epochs is not None:
        run.train.epochs = args.epochs
    if args.alpha is not None:
        run.train.alpha = args.alpha
    if args.seed is not None:
        run.train.seed = args.seed
    run.train = tr.TrainConfig(**vars(run.train))  # re-validate overrides

    pairs = _load_pairs(_require_dir(args.data), run)
    model = net.build_model(run.model, seed=run.train.seed)
    model, history = tr.train(model, pairs, run.train)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    net.save_checkpoint(model, run.train.seed, out / "checkpoint.pt")
    history.save_csv(out / "history.csv")
    print(
        f"train: {len(pairs)} pairs, {run.train.epochs} epochs -> {out}; "
        f"final val loss {history.val_loss[-1]:.6f}, val mean IoU {history.mean_iou[-1]:.4f}"
    )
    return EXIT_OK


def cmd_predict(args: argparse.Namespace) -> int:
    run = RunConfig.load(args.config)
    model, _ = net.load_checkpoint(args.checkpoint)
    stack = dataio.load_slice_stack(_require_dir(args.data))
    masks = ev.predict_volume(model, stack, run.preprocess)
    out = Path(args.out)
    for i, mask in enumerate(masks):
        dataio.write_mask(mask, out / f"{i:04d}.png")
    print(f"predict: {len(masks)} masks -> {out}")
    return EXIT_OK


def cmd_evaluate(args: argparse.Namespace) -> int:
    preds = dataio.load_mask_dir(_require_dir(args.pred))
    truths = dataio.load_mask_dir(_require_dir(args.truth))
    if len(preds) != len(truths):
        raise DataError(f"mask counts differ: {len(preds)} predicted vs {len(truths)} true")
    report = ev.compute_report(preds, truths)
    histories = [tr.TrainHistory.load_csv(args.history)] if args.history else []
    written = ev.emit_report(histories, report, args.out)
    print(
        f"evaluate: mean IoU {report.mean_iou:.4f}, mean Dice {report.mean_dice:.4f}, "
        f"{len(written)} files -> {args.out}"
    )
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="spineseg",
        description="Vertebra panoptic segmentation pipeline.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="generate a synthetic spine dataset")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--slices", type=int, default=9)
    p.add_argument("--height", type=int, default=320)
    p.add_argument("--width", type=int, default=256)
    p.add_argument("--vertebrae", type=int, default=5)
    p.add_argument("--noise", type=float, default=0.0, help="gaussian noise sigma")
    p.add_argument("--gap-px", type=int, default=12, help="slice gap in pixels")
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser(
        "make-masks", help="densify a stack and paint masks from annotations"
    )
    p.add_argument("--data", required=True, help="dataset directory (slices + annotations.json)")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--gap-px", type=int, default=1, help="target slice gap in pixels")
    p.add_argument("--config", default=None, help="YAML run config")
    p.set_defaults(func=cmd_make_masks)

    p = sub.add_parser("train", help="train the attention U-Net")
    p.add_argument("--data", required=True, help="dataset directory with masks/ subdirectory")
    p.add_argument("--out", required=True, help="run output directory")
    p.add_argument("--config", default=None, help="YAML run config")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="slice-wise volumetric inference")
    p.add_argument("--data", required=True, help="dataset directory to predict on")
    p.add_argument("--checkpoint", required=True, help="trained checkpoint file")
    p.add_argument("--out", required=True, help="output mask directory")
    p.add_argument("--config", default=None, help="YAML run config")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="compare predicted and true masks, emit report")
    p.add_argument("--pred", required=True, help="directory of predicted masks")
    p.add_argument("--truth", required=True, help="directory of ground-truth masks")
    p.add_argument("--out", required=True, help="report output directory")
    p.add_argument("--history", default=None, help="history.csv for loss/accuracy plots")
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits on --help (0) and usage errors (2)
        return int(exc.code or 0)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except (DataError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


def console_entry() -> None:
    raise SystemExit(main())


if __name__ == "__main__":
    console_entry()
