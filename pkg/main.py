"""
Feed-Forward Splatting - Main Entry Point
Command-line surface: train, render, export-ply, merge-demo, grad-check, eval, make-dataset
"""

import argparse
import json
import os
import sys
from pathlib import Path
from typing import List, Optional

from dotenv import load_dotenv

# Load environment variables before anything reads them
load_dotenv()

import numpy as np
import pandas as pd
from loguru import logger

from checkpoint import load_checkpoint
from decoder import StagePoint, merge_demo_rows
from errors import ConfigError, DatasetError, SplatError
from evaluation import evaluate, write_report
from geometry import CameraPose, Intrinsics
from grad_check import run_verification_suite
from image_io import write_image
from log_setup import configure_logging
from ply_io import read_ply, write_ply
from renderer import render
from run_config import RunConfig, load_config, parse_config_text, save_config
from synthetic_data import load_posed_directory, make_synthetic_scene, write_posed_directory
from trainer import Trainer, evenly_spaced, load_dataset, predict_scene


def _run_root() -> Path:
    return Path(os.getenv("SPLAT_RUN_DIR", "runs"))


def _config_for(args) -> RunConfig:
    if getattr(args, "config", None):
        return load_config(args.config)
    return RunConfig.full_scale() if getattr(args, "preset", "toy") == "full" else RunConfig.toy()


def _restore(checkpoint_path: str):
    ckpt = load_checkpoint(checkpoint_path)
    config = parse_config_text(ckpt.config_text, source=f"{checkpoint_path} (embedded config)")
    return ckpt, config


def _dataset_for(config: RunConfig, dataset_dir: Optional[str]):
    if dataset_dir:
        return load_posed_directory(dataset_dir, resolution=config.training.resolution)
    return load_dataset(config)


def _context(dataset, count: int):
    return [dataset.view(i) for i in evenly_spaced(len(dataset), count)]


def _read_camera(path: str):
    """Camera spec JSON: {rotation, center, fx, fy, cx, cy, width, height}"""
    try:
        spec = json.loads(Path(path).read_text())
        pose = CameraPose(np.asarray(spec["rotation"], dtype=np.float64), np.asarray(spec["center"], dtype=np.float64))
        intr = Intrinsics(spec["fx"], spec["fy"], spec["cx"], spec["cy"], int(spec["width"]), int(spec["height"]))
    except FileNotFoundError as exc:
        raise DatasetError(f"Camera file not found: {path}") from exc
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise DatasetError(f"Malformed camera file {path}: {exc}") from exc
    return pose, intr


def _parse_counts(text: str) -> List[int]:
    try:
        counts = [int(part) for part in text.split(",") if part.strip()]
    except ValueError as exc:
        raise ConfigError(f"--context-views expects comma-separated integers, got {text!r}") from exc
    if any(c < 1 for c in counts):
        raise ConfigError("--context-views values must be positive")
    return counts


# ---- subcommands -------------------------------------------------------------------------------


def cmd_train(args) -> int:
    config = _config_for(args)
    if args.run_dir:
        config.io.run_dir = args.run_dir
    elif not args.config:
        config.io.run_dir = str(_run_root() / ("full" if args.preset == "full" else "toy"))
    if args.steps is not None:
        config.training.total_steps = args.steps

    run_dir = Path(config.io.run_dir)
    if args.resume:
        ckpt = load_checkpoint(run_dir / config.io.checkpoint_file)
        trainer = Trainer.from_checkpoint(ckpt, config, dataset=_dataset_for(config, args.dataset))
    else:
        if args.dataset:
            config.io.dataset_dir = args.dataset
        trainer = Trainer(config)
    run_dir.mkdir(parents=True, exist_ok=True)
    save_config(config, run_dir / "config.txt")

    result = trainer.run(progress=not args.no_progress)
    print(f"steps: {result.steps}")
    print(f"checkpoint: {result.checkpoint_path}")
    print(f"metrics: {result.metrics_path}")
    return 0


def cmd_render(args) -> int:
    pose, intr = _read_camera(args.camera)
    if args.ply:
        scene = read_ply(args.ply)
        config = _config_for(args)
    else:
        if not args.checkpoint:
            raise ConfigError("render needs --checkpoint or --ply")
        ckpt, config = _restore(args.checkpoint)
        dataset = _dataset_for(config, args.dataset)
        scene, norm = predict_scene(ckpt.store, config, _context(dataset, args.context_views or config.training.context_views))
        scene = scene.detached()
        pose = norm.to_canonical(pose)

    background = np.asarray(config.renderer.background, dtype=np.float64)
    out = render(scene, pose, intr, background, config.renderer.to_settings())
    write_image(args.out, out.color.data)
    logger.info(f"Rendered {out.num_visible}/{scene.count} Gaussians to {args.out}")
    print(args.out)
    return 0


def cmd_export_ply(args) -> int:
    ckpt, config = _restore(args.checkpoint)
    dataset = _dataset_for(config, args.dataset)
    scene, _ = predict_scene(ckpt.store, config, _context(dataset, args.context_views or config.training.context_views))
    size = write_ply(scene.detached(), args.out)
    logger.info(f"Exported {scene.count} Gaussians to {args.out}")
    print(f"gaussians: {scene.count}")
    print(f"bytes: {size}")
    return 0


def cmd_merge_demo(args) -> int:
    point = StagePoint(args.stage, args.lam)
    table = pd.DataFrame(merge_demo_rows(point, scale=args.scale, alpha=args.alpha, tau=args.tau))
    print(f"stage {point.stage}, lambda {point.lam}: {point.gaussians_per_token} Gaussians per token, group size {point.group_size}")
    print(table.to_string(index=False, float_format=lambda v: f"{v:.9f}"))
    return 0


def cmd_grad_check(args) -> int:
    results = run_verification_suite(seed=args.seed, points=args.points)
    table = pd.DataFrame(
        [
            {"check": r.name, "points": r.points, "error": r.error, "tolerance": r.tolerance, "seconds": r.seconds, "passed": r.passed}
            for r in results
        ]
    )
    print(table.to_string(index=False))
    failed = int((~table["passed"]).sum())
    print(f"{len(results) - failed}/{len(results)} checks passed")
    return 1 if failed else 0


def cmd_eval(args) -> int:
    ckpt, config = _restore(args.checkpoint)
    dataset = _dataset_for(config, args.dataset)
    counts = _parse_counts(args.context_views) if args.context_views else []
    report = evaluate(ckpt.store, config, dataset, context_views=args.input_views, context_counts=counts)
    print(report.views.to_string(float_format=lambda v: f"{v:.4f}"))
    print()
    print(report.summary().to_string(float_format=lambda v: f"{v:.4f}"))
    if args.out:
        write_report(report, args.out)
        print(f"report: {args.out}")
    return 0 if report.count_invariant else 1


def cmd_make_dataset(args) -> int:
    scene = make_synthetic_scene(
        seed=args.seed,
        num_blobs=args.blobs,
        num_frames=args.frames,
        resolution=args.resolution,
        num_held_out=args.held_out,
    )
    root = write_posed_directory(scene, args.out, image_ext=f".{args.format}")
    print(root)
    return 0


# ---- parser ------------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="splat", description="Feed-forward Gaussian splatting at desk scale")
    parser.add_argument("--log-level", default=None, help="overrides SPLAT_LOG_LEVEL")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--config", help="config file (sectioned key = value)")
    p.add_argument("--preset", choices=("toy", "full"), default="toy")
    p.add_argument("--dataset", help="posed-image directory instead of the synthetic scene")
    p.add_argument("--steps", type=int, help="override training.total_steps")
    p.add_argument("--run-dir", help="override io.run_dir")
    p.add_argument("--resume", action="store_true", help="continue from the run directory's checkpoint")
    p.add_argument("--no-progress", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("render", help="render one image from a checkpoint or a PLY asset")
    p.add_argument("--checkpoint")
    p.add_argument("--ply")
    p.add_argument("--config", help="renderer settings for --ply (defaults to the toy preset)")
    p.add_argument("--dataset")
    p.add_argument("--context-views", type=int)
    p.add_argument("--camera", required=True, help="camera JSON {rotation, center, fx, fy, cx, cy, width, height}")
    p.add_argument("--out", required=True, help=".ppm or .png")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("export-ply", help="reconstruct a scene and write it as a splat asset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset")
    p.add_argument("--context-views", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_ply)

    p = sub.add_parser("merge-demo", help="print a worked merge / split example")
    p.add_argument("--stage", type=int, default=3)
    p.add_argument("--lam", type=float, default=1.0)
    p.add_argument("--scale", type=float, default=0.5)
    p.add_argument("--alpha", type=float, default=0.5)
    p.add_argument("--tau", type=float, default=1.0)
    p.set_defaults(func=cmd_merge_demo)

    p = sub.add_parser("grad-check", help="finite-difference verification of every gradient")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--points", type=int, default=10, help="random points per check")
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("eval", help="held-out PSNR / SSIM, #G, timing and memory")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset")
    p.add_argument("--input-views", type=int, help="context frames for the quality metrics")
    p.add_argument("--context-views", help="comma-separated context sizes for the #G check, e.g. 12,24,36")
    p.add_argument("--out", help="CSV report path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("make-dataset", help="write a synthetic posed-image directory")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--blobs", type=int, default=20)
    p.add_argument("--frames", type=int, default=240)
    p.add_argument("--resolution", type=int, default=64)
    p.add_argument("--held-out", type=int, default=4)
    p.add_argument("--format", choices=("ppm", "png"), default="ppm")
    p.set_defaults(func=cmd_make_dataset)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(level=args.log_level)
    try:
        return args.func(args)
    except (SplatError, FileNotFoundError) as exc:
        logger.error(f"{args.command} failed: {exc}")
        return 2


if __name__ == "__main__":
    sys.exit(main())
