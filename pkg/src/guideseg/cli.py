"""Command-line entry points: datagen, mix-preview, train, eval, export."""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import evaluation, shapeworld, trainer


def _cmd_datagen(args: argparse.Namespace) -> int:
    shift = shapeworld.DomainShift(
        hue_shift=args.shift_hue,
        brightness_scale=args.shift_brightness,
        texture_noise_std=args.shift_noise,
    )
    source_dir, target_dir = shapeworld.write_domain_pair(
        args.out,
        seed=args.seed,
        count=args.count,
        image_size=args.size,
        shift=shift,
        val_count=args.val_count,
    )
    print(f"wrote source domain to {source_dir}")
    print(f"wrote target domain to {target_dir}")
    return 0


def _cmd_mix_preview(args: argparse.Namespace) -> int:
    source = shapeworld.read_dataset(args.source, split=args.split)
    target = shapeworld.read_dataset(args.target, split=args.split)
    idx = args.index % min(len(source), len(target))
    rng = np.random.default_rng(args.seed)
    # ground-truth target labels stand in for pseudo-labels in the preview
    written = evaluation.write_mix_preview(
        source[idx], target[idx], target[idx].labels, args.out, rng
    )
    for path in written:
        print(f"wrote {path}")
    return 0


def _load_run_config(args: argparse.Namespace) -> trainer.RunConfig:
    if args.config is not None:
        data = json.loads(Path(args.config).read_text())
        config = trainer.RunConfig.from_dict(data)
    else:
        config = trainer.RunConfig()

    train_over: dict = {}
    if args.method:
        train_over["method"] = args.method
    if args.seed is not None:
        train_over["seed"] = args.seed
    if args.steps is not None:
        train_over["total_steps"] = args.steps
    loss_over: dict = {}
    if args.lambda_gt is not None:
        loss_over["lambda_gt"] = args.lambda_gt
    if args.d_uncertainty is not None:
        loss_over["d"] = args.d_uncertainty
    if args.no_uncertainty:
        loss_over["uncertainty_off"] = True
    if args.per_pixel_q:
        loss_over["per_pixel_q"] = True
    guider_over: dict = {}
    if args.guider_dim is not None:
        guider_over["embed_dim"] = args.guider_dim
    if args.guider_blocks is not None:
        guider_over["num_blocks"] = args.guider_blocks
    if args.no_skip_connection:
        guider_over["skip_connection"] = False
    if args.no_zero_init:
        guider_over["zero_init"] = False

    config = dataclasses.replace(
        config,
        train=dataclasses.replace(config.train, **train_over) if train_over else config.train,
        loss=dataclasses.replace(config.loss, **loss_over) if loss_over else config.loss,
        guider=dataclasses.replace(config.guider, **guider_over) if guider_over else config.guider,
        source_data=args.source_data or config.source_data,
        target_data=args.target_data or config.target_data,
    )
    return config


def _cmd_train(args: argparse.Namespace) -> int:
    config = _load_run_config(args)
    if not config.source_data or not config.target_data:
        print("error: source_data and target_data must be set (config file or flags)", file=sys.stderr)
        return 2
    source = shapeworld.read_dataset(config.source_data, split="train")
    target = shapeworld.read_dataset(config.target_data, split="train")
    try:
        target_val = shapeworld.read_dataset(config.target_data, split="val")
    except ValueError:
        target_val = None

    out_dir = Path(args.out)
    result = trainer.fit(
        config,
        source,
        target,
        out_dir,
        target_val=target_val,
        resume_from=args.resume,
    )
    (out_dir / "config.json").write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n")
    trainer.export_inference(result.checkpoint_path, out_dir / "checkpoint_infer.ckpt")
    print(f"checkpoint: {result.checkpoint_path}")
    print(f"metrics:    {result.metrics_path}")
    if result.final_miou is not None:
        print(f"final target mIoU: {result.final_miou:.4f}")
    return 0


def _cmd_eval(args: argparse.Namespace) -> int:
    model = trainer.load_model_for_inference(args.checkpoint)
    images = shapeworld.read_dataset(args.data, split=args.split)
    report = evaluation.evaluate_model(model, images)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(report.to_dict(), indent=2) + "\n")
    print(f"mIoU over {len(images)} images: {report.miou():.4f}")
    print(f"report: {out}")

    if args.dump_dir:
        tensors, meta = trainer.load_archive(args.checkpoint)
        guider_obj = None
        if any(k.startswith("guider/") for k in tensors):
            state = trainer.load_checkpoint(args.checkpoint)
            guider_obj = state.guider
        evaluation.dump_predictions(model, images, args.dump_dir, guider=guider_obj)
        print(f"panels: {args.dump_dir}")
    return 0


def _cmd_export(args: argparse.Namespace) -> int:
    trainer.export_inference(args.checkpoint, args.out)
    print(f"wrote inference checkpoint: {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="guideseg")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("datagen", help="generate a source/target domain pair")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--count", type=int, default=200)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--shift-hue", type=float, default=0.3)
    p.add_argument("--shift-brightness", type=float, default=0.8)
    p.add_argument("--shift-noise", type=float, default=0.05)
    p.add_argument("--val-count", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_datagen)

    p = sub.add_parser("mix-preview", help="dump class-mixing panels for visual audit")
    p.add_argument("--source", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--split", default="train")
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_mix_preview)

    p = sub.add_parser("train", help="run adaptation training")
    p.add_argument("--config", default=None, help="JSON run config")
    p.add_argument("--method", choices=trainer.METHODS, default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", default=None)
    p.add_argument("--source-data", default=None)
    p.add_argument("--target-data", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--steps", type=int, default=None)
    # ablation switches
    p.add_argument("--lambda-gt", type=float, default=None)
    p.add_argument("--d-uncertainty", type=float, default=None)
    p.add_argument("--no-uncertainty", action="store_true")
    p.add_argument("--per-pixel-q", action="store_true")
    p.add_argument("--guider-dim", type=int, default=None)
    p.add_argument("--guider-blocks", type=int, default=None)
    p.add_argument("--no-skip-connection", action="store_true")
    p.add_argument("--no-zero-init", action="store_true")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="val")
    p.add_argument("--out", required=True)
    p.add_argument("--dump-dir", default=None)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("export", help="strip a checkpoint to inference-only weights")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_export)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    raise SystemExit(main())
