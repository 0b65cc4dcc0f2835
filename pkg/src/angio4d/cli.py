"""Command-line surface: generate, train, evaluate, render, bench.

Exit codes: 0 success, 1 runtime failure, 2 usage/config error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import dataclass, fields as dc_fields

import numpy as np

from . import geometry, io, metrics, phantom, renderer
from .dataset import AngioDataset
from .trainer import RunConfig, TrainState, train

__all__ = ["main", "GenerateConfig"]


@dataclass
class GenerateConfig:
    """Dataset synthesis configuration (strict: unknown keys rejected)."""

    seed: int = 0
    n_phases: int = 10
    n_views: int = 9
    volume_resolution: int = 128
    detector_width: int = 200
    detector_height: int = 200
    pixel_pitch_mm: float = 1.5
    source_to_isocenter_mm: float = 750.0
    source_to_detector_mm: float = 1200.0
    world_scale_mm: float = 64.0
    motion_scale: float = 0.2
    oversample: int = 2
    static_only: bool = False

    @classmethod
    def from_dict(cls, data: dict) -> "GenerateConfig":
        known = {f.name for f in dc_fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_json(cls, path) -> "GenerateConfig":
        with open(path) as f:
            return cls.from_dict(json.load(f))


def generate_dataset(cfg: GenerateConfig, out_dir) -> AngioDataset:
    tree, motion, background = phantom.build_default_phantom(
        cfg.seed, n_phases=cfg.n_phases, motion_scale=cfg.motion_scale
    )
    if cfg.static_only:
        tree, motion = None, None
    poses = geometry.default_pose_set(cfg.source_to_isocenter_mm, cfg.source_to_detector_mm)[
        : cfg.n_views
    ]
    det = geometry.DetectorGrid(cfg.detector_width, cfg.detector_height, cfg.pixel_pitch_mm)
    bounds = geometry.SceneBounds(world_scale_mm=cfg.world_scale_mm)
    info = {k: getattr(cfg, k) for k in ("seed", "motion_scale", "static_only", "volume_resolution")}
    return phantom.synthesize_dataset(
        out_dir,
        tree,
        motion,
        background,
        poses,
        det,
        cfg.n_phases,
        grid_resolution=cfg.volume_resolution,
        bounds=bounds,
        oversample=cfg.oversample,
        phantom_info=info,
    )


def cmd_generate(args) -> int:
    cfg = GenerateConfig.from_json(args.config) if args.config else GenerateConfig()
    generate_dataset(cfg, args.out)
    print(f"dataset written to {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = RunConfig.from_json(args.config) if args.config else RunConfig()
    if args.dataset:
        cfg.dataset = args.dataset
    if args.views is not None:
        cfg.views = args.views
    if args.iterations is not None:
        cfg.iterations = args.iterations
    if args.out:
        cfg.out_dir = args.out
    if args.deterministic:
        cfg.deterministic = True
    if not cfg.dataset or not os.path.exists(cfg.dataset):
        raise ValueError(f"dataset path {cfg.dataset!r} does not exist")
    state, _ = train(cfg, resume=args.resume)
    final = os.path.join(cfg.out_dir, "checkpoint.a4c")
    print(f"trained {state.iteration} iterations; checkpoint at {final}")
    report = metrics.evaluate(
        state.grid,
        state.field,
        AngioDataset(cfg.dataset),
        cfg.validation_views(len(AngioDataset(cfg.dataset).poses)),
        alpha=cfg.schedule().window_at(state.iteration),
        n_samples=cfg.eval_samples,
        threshold_policy=cfg.eval_threshold_policy,
        training_minutes=state.wall_clock_seconds / 60.0,
    )
    report.write_csv(os.path.join(cfg.out_dir, "eval.csv"))
    report.write_json(os.path.join(cfg.out_dir, "eval.json"))
    print(json.dumps(report.summary(), indent=2, sort_keys=True))
    return 0


def _check_geometry(state_meta: dict | None, data: AngioDataset):
    if not state_meta:
        return
    for i, (saved, pose) in enumerate(zip(state_meta["poses"], data.poses)):
        current = {
            "primary_angle_deg": pose.primary_angle_deg,
            "secondary_angle_deg": pose.secondary_angle_deg,
            "source_to_isocenter_mm": pose.source_to_isocenter_mm,
            "source_to_detector_mm": pose.source_to_detector_mm,
        }
        if saved != current:
            raise ValueError(
                f"geometry mismatch at pose {i}: checkpoint {saved} vs dataset {current}"
            )
    if len(state_meta["poses"]) != len(data.poses):
        raise ValueError(
            f"geometry mismatch: checkpoint has {len(state_meta['poses'])} poses, "
            f"dataset has {len(data.poses)}"
        )


def cmd_evaluate(args) -> int:
    state = TrainState.from_checkpoint(args.checkpoint)
    data = AngioDataset(args.dataset).validate()
    _check_geometry(state.geometry_meta, data)
    if args.views:
        views = [int(v) for v in args.views.split(",")]
    else:
        views = state.config.validation_views(data.n_views)
    report = metrics.evaluate(
        state.grid,
        state.field,
        data,
        views,
        n_samples=args.samples,
        threshold_policy=args.threshold_policy,
        training_minutes=state.wall_clock_seconds / 60.0,
    )
    out = args.out or "."
    os.makedirs(out, exist_ok=True)
    report.write_csv(os.path.join(out, "eval.csv"))
    report.write_json(os.path.join(out, "eval.json"))
    print(json.dumps(report.summary(), indent=2, sort_keys=True))
    return 0


def cmd_render(args) -> int:
    state = TrainState.from_checkpoint(args.checkpoint)
    if not 0 <= args.phase < state.n_phases:
        raise ValueError(f"phase {args.phase} out of range [0, {state.n_phases})")
    pose = geometry.CArmPose(args.primary, args.secondary)
    det = geometry.DetectorGrid(args.size, args.size)
    bounds = geometry.SceneBounds()
    alpha = float(state.config.n_bands)

    def static_fn(x):
        return state.grid.forward(x)[0]

    def dynamic_fn(x):
        return state.field.forward(x, args.phase, alpha)[0]

    def composed_fn(x):
        return static_fn(x) + dynamic_fn(x)

    os.makedirs(args.out, exist_ok=True)
    images = {
        "composed": renderer.render_view(composed_fn, pose, det, bounds, args.samples),
        "static": renderer.render_view(static_fn, pose, det, bounds, args.samples),
        "dynamic": renderer.render_view(dynamic_fn, pose, det, bounds, args.samples),
        "mip": renderer.render_view(dynamic_fn, pose, det, bounds, args.samples, mip=True),
    }
    for name, img in images.items():
        io.write_image(os.path.join(args.out, f"{name}.a4f"), img)
        export = img / img.max() if name == "mip" and img.max() > 0 else img
        io.write_png(os.path.join(args.out, f"{name}.png"), export)
    print(f"renders written to {args.out}")
    return 0


def cmd_bench(args) -> int:
    if args.batch < 1:
        raise ValueError("batch size must be >= 1")
    if args.checkpoint:
        state = TrainState.from_checkpoint(args.checkpoint)
        grid, field = state.grid, state.field
    else:
        from .fields import AxisEncoding, DynamicField, VMGrid

        rng = np.random.default_rng(0)
        grid = VMGrid(48, 3, rng=rng)
        field = DynamicField(10, encoding=AxisEncoding(10), width=128, n_layers=4, rng=rng)

    rng = np.random.default_rng(1)
    x = rng.uniform(-1, 1, (args.batch, 3)).astype(np.float32)

    def throughput(fn):
        fn(x)  # warmup
        best = float("inf")
        for _ in range(args.repeats):
            t0 = time.perf_counter()
            fn(x)
            best = min(best, time.perf_counter() - t0)
        return args.batch / best

    grid_tp = throughput(lambda q: grid.forward(q))
    dyn_tp = throughput(lambda q: field.forward(q, 0))

    det = geometry.DetectorGrid(args.frame_size, args.frame_size)
    bounds = geometry.SceneBounds()
    pose = geometry.CArmPose(0.0, 0.0)

    def frame(x_unused=None):
        def composed(q):
            return grid.forward(q)[0] + field.forward(q, 0)[0]

        renderer.render_view(composed, pose, det, bounds, args.frame_samples)

    t0 = time.perf_counter()
    frame()
    frame_fps = 1.0 / (time.perf_counter() - t0)

    report = {
        "batch": args.batch,
        "grid_eval_points_per_s": grid_tp,
        "dyn_eval_points_per_s": dyn_tp,
        "grid_over_dyn_ratio": grid_tp / dyn_tp,
        "render_fps": frame_fps,
        "frame_size": args.frame_size,
        "frame_samples": args.frame_samples,
    }
    print(json.dumps(report, indent=2, sort_keys=True))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="angio4d",
        description="Sparse-view 4D angiography reconstruction: dataset synthesis, "
        "training, evaluation, rendering and benchmarking.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="synthesize a phantom dataset")
    p.add_argument("--config", help="GenerateConfig JSON file")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.set_defaults(fn=cmd_generate)

    p = sub.add_parser("train", help="train a reconstruction")
    p.add_argument("--config", help="RunConfig JSON file")
    p.add_argument("--dataset", help="dataset directory")
    p.add_argument("--views", type=int, help="train on the first N views")
    p.add_argument("--iterations", type=int)
    p.add_argument("--out", help="output run directory")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.add_argument("--deterministic", action="store_true")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("evaluate", help="score a checkpoint against a dataset")
    p.add_argument("checkpoint")
    p.add_argument("dataset")
    p.add_argument("--views", help="comma-separated validation view indices")
    p.add_argument("--samples", type=int, default=256)
    p.add_argument("--threshold-policy", choices=["fixed", "sweep"], default="sweep")
    p.add_argument("--out", help="report output directory")
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("render", help="render a checkpoint from a new viewpoint")
    p.add_argument("checkpoint")
    p.add_argument("--primary", type=float, default=0.0)
    p.add_argument("--secondary", type=float, default=0.0)
    p.add_argument("--phase", type=int, default=0)
    p.add_argument("--size", type=int, default=200)
    p.add_argument("--samples", type=int, default=256)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_render)

    p = sub.add_parser("bench", help="field evaluation and rendering throughput")
    p.add_argument("--checkpoint")
    p.add_argument("--batch", type=int, default=65536)
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--frame-size", type=int, default=200)
    p.add_argument("--frame-samples", type=int, default=256)
    p.set_defaults(fn=cmd_bench)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ValueError, KeyError, FileNotFoundError, io.FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
