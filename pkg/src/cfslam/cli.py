"""Command-line entry points: run, evaluate, export-ply, make-synthetic, decoder-info."""

from __future__ import annotations

import argparse
import json
import os
import sys

import yaml

from .decoder import load_decoder, save_decoder, build_synthetic_decoder
from .pipeline import (
    RunConfig,
    evaluate_run,
    export_pointcloud_from_run,
    run_slam,
    scene_from_spec,
)
from .synthetic import DEFAULT_INTRINSICS, generate_sequence
from .tum import write_tum_sequence


def _load_config_file(path: str) -> dict:
    with open(path) as f:
        if path.endswith((".yaml", ".yml")):
            return yaml.safe_load(f) or {}
        return json.load(f)


def _parse_override(text: str):
    key, _, raw = text.partition("=")
    if not _:
        raise ValueError(f"override {text!r} is not key=value")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key, value


def _cmd_run(args) -> int:
    data = _load_config_file(args.config) if args.config else {}
    if args.tum:
        data["input_kind"] = "tum"
        data["input_path"] = args.tum
    if args.scene:
        data["input_kind"] = "synthetic"
        data["input_path"] = args.scene
    if args.decoder:
        data["decoder_path"] = args.decoder
    if args.output:
        data["output_dir"] = args.output
    if args.factors:
        data["factors"] = [f.strip() for f in args.factors.split(",") if f.strip()]
    if args.seed is not None:
        data["seed"] = args.seed
    if args.max_frames is not None:
        data["max_frames"] = args.max_frames
    for override in args.set or []:
        key, value = _parse_override(override)
        data[key] = value
    config = RunConfig.from_dict(data)
    report = run_slam(config)
    print(json.dumps({k: report[k] for k in ("status", "frames", "wall_time_s") if k in report}))
    print(f"outputs in {config.output_dir}")
    return 0 if report.get("status") == "ok" else 1


def _cmd_evaluate(args) -> int:
    metrics = evaluate_run(args.run_dir, symmetric_pc110=not args.one_sided_pc110)
    print(json.dumps(metrics, indent=2, default=float))
    return 0 if metrics.get("status") in ("ok", "no_groundtruth") else 1


def _cmd_export_ply(args) -> int:
    out = args.out or os.path.join(args.run_dir, "map.ply")
    count = export_pointcloud_from_run(args.run_dir, out, stride=args.stride)
    print(f"wrote {count} vertices to {out}")
    return 0


def _cmd_make_synthetic(args) -> int:
    with open(args.scene) as f:
        spec = json.load(f)
    scene = scene_from_spec(spec)
    frames = generate_sequence(
        scene, DEFAULT_INTRINSICS,
        noise_sigma=float(spec.get("noise_sigma", 0.005)),
        seed=args.seed,
    )
    write_tum_sequence(args.output, frames, DEFAULT_INTRINSICS)
    print(f"wrote {len(frames)} frames to {args.output} (TUM layout)")
    return 0


def _cmd_decoder_info(args) -> int:
    dec = load_decoder(args.path)
    info = {
        "width": dec.width,
        "height": dec.height,
        "code_size": dec.code_size,
        "d_min": dec.d_min,
        "d_max": dec.d_max,
        "zero_depth_mean": float(dec.zero_depth.mean()),
        "basis_abs_max": float(abs(dec.basis).max()),
    }
    print(json.dumps(info, indent=2))
    return 0


def _cmd_make_decoder(args) -> int:
    dec = build_synthetic_decoder(
        args.width, args.height, args.code_size, kind=args.kind, d0=args.d0
    )
    save_decoder(dec, args.out)
    print(f"wrote {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cfslam",
        description="Dense monocular SLAM on a compact linear depth-code manifold",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run the full pipeline on a dataset or scene spec")
    run.add_argument("--config", help="JSON or YAML run configuration file")
    run.add_argument("--tum", help="TUM RGB-D sequence directory")
    run.add_argument("--scene", help="synthetic scene spec (JSON)")
    run.add_argument("--decoder", help="decoder file to load instead of building")
    run.add_argument("--output", help="output directory")
    run.add_argument("--factors", help="comma list from pho,rep,geo")
    run.add_argument("--seed", type=int)
    run.add_argument("--max-frames", type=int, dest="max_frames")
    run.add_argument("--set", action="append", metavar="KEY=VALUE",
                     help="override any config field (JSON-parsed value)")
    run.set_defaults(func=_cmd_run)

    ev = sub.add_parser("evaluate", help="compute metrics JSON for a finished run")
    ev.add_argument("run_dir")
    ev.add_argument("--one-sided-pc110", action="store_true",
                    help="use |d-d*|/d* < 0.1 instead of the symmetric ratio")
    ev.set_defaults(func=_cmd_evaluate)

    ply = sub.add_parser("export-ply", help="export the run's point cloud as ASCII PLY")
    ply.add_argument("run_dir")
    ply.add_argument("--out")
    ply.add_argument("--stride", type=int, default=4)
    ply.set_defaults(func=_cmd_export_ply)

    mk = sub.add_parser("make-synthetic", help="render a scene spec into a TUM-layout dataset")
    mk.add_argument("--scene", required=True, help="scene spec JSON")
    mk.add_argument("--output", required=True, help="dataset directory to create")
    mk.add_argument("--seed", type=int, default=0)
    mk.set_defaults(func=_cmd_make_synthetic)

    info = sub.add_parser("decoder-info", help="print decoder file header fields")
    info.add_argument("path")
    info.set_defaults(func=_cmd_decoder_info)

    mkdec = sub.add_parser("make-decoder", help="build and save a synthetic decoder")
    mkdec.add_argument("--out", required=True)
    mkdec.add_argument("--width", type=int, default=256)
    mkdec.add_argument("--height", type=int, default=192)
    mkdec.add_argument("--code-size", type=int, default=32, dest="code_size")
    mkdec.add_argument("--kind", default="smooth", choices=("smooth",))
    mkdec.add_argument("--d0", type=float, default=2.0)
    mkdec.set_defaults(func=_cmd_make_decoder)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
