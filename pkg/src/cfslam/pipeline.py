"""Pipeline driver: configuration, full runs, artifact outputs, evaluation.

A run consumes a TUM-layout directory or a synthetic scene spec, executes
track -> keyframe/one-way decisions -> interleaved mapping -> loop closure ->
final batch optimisation, and writes the trajectory, per-keyframe depth maps,
a machine-readable report, and metrics when ground truth is available. The
metrics JSON is the single source the acceptance assertions read.
"""

from __future__ import annotations

import dataclasses
import json
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from .decoder import LinearDecoder, build_synthetic_decoder, load_decoder
from .evaluation import AlignmentError, Trajectory, align_similarity, depth_metrics
from .factors import RobustLoss
from .frontend import FrontendConfig, KeyframePolicy, SlamFrontend, TrackingConfig
from .geometry import PinholeIntrinsics, backproject
from .graph import GraphConfig, SolverConfig
from .synthetic import (
    DEFAULT_INTRINSICS,
    Plane,
    Sphere,
    SyntheticScene,
    generate_sequence,
    loop_trajectory,
    orbit_trajectory,
    sweep_trajectory,
)
from .tum import (
    DEFAULT_TUM_INTRINSICS,
    load_tum_sequence,
    read_trajectory_file,
    save_gray_png,
    write_trajectory_file,
)

FACTOR_NAMES = ("pho", "rep", "geo")


@dataclass
class RunConfig:
    # input / output
    input_kind: str = "synthetic"  # "synthetic" | "tum"
    input_path: str | None = None  # tum directory or scene-spec json path
    scene_spec: dict | None = None  # inline scene spec (overrides input_path)
    decoder_path: str | None = None  # load a decoder file instead of building
    output_dir: str = "run_output"
    max_frames: int | None = None
    seed: int = 0
    # decoder
    code_size: int = 32
    decoder_d0: float = 2.0
    basis_gain: float = 1.0
    d_min: float = 0.1
    d_max: float = 12.0
    # factor selection and weights
    factors: tuple[str, ...] = ("pho",)
    connect_last: int = 4
    photometric_stride: int = 2
    photometric_weight: float = 20.0
    cauchy_scale_px: float = 2.0
    huber_scale_m: float = 0.1
    geometric_grid: tuple[int, int] = (32, 24)
    geometric_reseed: bool = False
    sigma_code: float = 1.0
    gauge_sigma: float = 1e-4
    min_matches: int = 8
    match_ratio: float = 0.8
    # tracking and keyframing
    tracking_levels: tuple[int, ...] = (3, 2, 1, 0)
    tracking_iterations: int = 10
    tracking_stride: int = 2
    inlier_threshold: float = 0.1
    kf_translation: float = 0.15
    kf_rotation_deg: float = 10.0
    kf_min_inlier_ratio: float = 0.7
    # mapping and one-way frames
    mapping_iterations: int = 10
    mapping_levels: tuple[int, ...] = (1, 0)
    active_window: int = 10
    oneway_cap: int = 8
    oneway_marginalize_after: int = 8
    oneway_every: int = 1
    final_iterations: int = 25
    # loops / relocalization
    local_loops: bool = True
    global_loops: bool = True
    global_loop_min_matches: int = 30
    global_loop_min_ratio: float = 0.6
    reloc_min_ratio: float = 0.6
    # initialization and data
    code_init: str = "zero"  # "zero" | "proxy"
    noise_sigma: float = 0.005
    max_features: int = 500
    feature_seed: int = 7
    save_depth: bool = True
    save_images: bool = True
    lambda_init: float = 1e-4
    cost_tolerance: float = 1e-6

    def __post_init__(self):
        if not self.factors:
            raise ValueError("at least one factor type must be enabled")
        for f in self.factors:
            if f not in FACTOR_NAMES:
                raise ValueError(f"unknown factor type {f!r}")
        if "pho" not in self.factors:
            raise ValueError("tracking is photometric; 'pho' must stay enabled")

    @staticmethod
    def from_dict(data: dict) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(RunConfig)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        coerced = dict(data)
        for key in ("factors", "tracking_levels", "mapping_levels", "geometric_grid"):
            if key in coerced and coerced[key] is not None:
                coerced[key] = tuple(coerced[key])
        return RunConfig(**coerced)

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        for key in ("factors", "tracking_levels", "mapping_levels", "geometric_grid"):
            out[key] = list(out[key])
        return out

    def graph_config(self) -> GraphConfig:
        return GraphConfig(
            enable_photometric="pho" in self.factors,
            enable_reprojection="rep" in self.factors,
            enable_geometric="geo" in self.factors,
            connect_last=self.connect_last,
            photometric_stride=self.photometric_stride,
            photometric_weight=self.photometric_weight,
            reprojection_loss=RobustLoss("cauchy", self.cauchy_scale_px),
            min_matches=self.min_matches,
            match_ratio=self.match_ratio,
            geometric_loss=RobustLoss("huber", self.huber_scale_m),
            geometric_grid=self.geometric_grid,
            geometric_reseed=self.geometric_reseed,
            sigma_code=self.sigma_code,
            gauge_sigma=self.gauge_sigma,
            seed=self.seed,
        )

    def frontend_config(self) -> FrontendConfig:
        return FrontendConfig(
            tracking=TrackingConfig(
                levels=self.tracking_levels,
                iterations=self.tracking_iterations,
                stride=self.tracking_stride,
                inlier_threshold=self.inlier_threshold,
            ),
            keyframes=KeyframePolicy(
                self.kf_translation, self.kf_rotation_deg, self.kf_min_inlier_ratio
            ),
            active_window=self.active_window,
            oneway_cap=self.oneway_cap,
            oneway_marginalize_after=self.oneway_marginalize_after,
            oneway_every=self.oneway_every,
            mapping_iterations=self.mapping_iterations,
            mapping_levels=self.mapping_levels,
            solver=SolverConfig(
                lambda_init=self.lambda_init, cost_tolerance=self.cost_tolerance
            ),
            local_loops=self.local_loops,
            global_loops=self.global_loops,
            global_loop_min_matches=self.global_loop_min_matches,
            global_loop_min_ratio=self.global_loop_min_ratio,
            reloc_min_ratio=self.reloc_min_ratio,
            code_init=self.code_init,
            max_features=self.max_features,
            feature_seed=self.feature_seed,
        )


# --- scene specs --------------------------------------------------------------


def scene_from_spec(spec: dict) -> SyntheticScene:
    surfaces = []
    for s in spec.get("surfaces", []):
        if s["kind"] == "plane":
            surfaces.append(
                Plane(
                    np.asarray(s["point"], dtype=float),
                    np.asarray(s["normal"], dtype=float),
                    half_extents=tuple(s["half_extents"]) if s.get("half_extents") else None,
                    albedo=s.get("albedo", 0.9),
                    texture_scale=s.get("texture_scale", 1.5),
                )
            )
        elif s["kind"] == "sphere":
            surfaces.append(
                Sphere(
                    np.asarray(s["center"], dtype=float),
                    float(s["radius"]),
                    albedo=s.get("albedo", 0.9),
                    texture_scale=s.get("texture_scale", 1.5),
                )
            )
        else:
            raise ValueError(f"unknown surface kind {s['kind']!r}")
    traj_spec = spec.get("trajectory", {})
    kind = traj_spec.get("kind", "orbit")
    frames = int(traj_spec.get("frames", 40))
    rate = float(traj_spec.get("rate", 30.0))
    if kind == "orbit":
        traj = orbit_trajectory(
            np.asarray(traj_spec.get("target", [0.0, 0.0, 2.0])),
            float(traj_spec.get("standoff", 2.0)),
            frames,
            span_degrees=float(traj_spec.get("span_degrees", 50.0)),
            rate=rate,
            bob=float(traj_spec.get("bob", 0.0)),
        )
    elif kind == "loop":
        traj = loop_trajectory(
            np.asarray(traj_spec.get("target", [0.0, 0.0, 2.0])),
            float(traj_spec.get("radius", 0.8)),
            frames,
            rate=rate,
            closure_fraction=float(traj_spec.get("closure_fraction", 1.0)),
            standoff=float(traj_spec.get("standoff", 2.0)),
        )
    elif kind == "sweep":
        traj = sweep_trajectory(
            np.asarray(traj_spec["start"], dtype=float),
            np.asarray(traj_spec["end"], dtype=float),
            np.asarray(traj_spec.get("target", [0.0, 0.0, 2.0])),
            frames,
            rate=rate,
            there_and_back=bool(traj_spec.get("there_and_back", False)),
        )
    else:
        raise ValueError(f"unknown trajectory kind {kind!r}")
    scene = SyntheticScene(
        surfaces,
        light_dir=np.asarray(spec.get("light", [0.3, -0.5, 0.8]), dtype=float),
        ambient=float(spec.get("ambient", 0.45)),
        texture_seed=int(spec.get("seed", 11)),
        trajectory=traj,
    )
    return scene


# --- running -------------------------------------------------------------------


@dataclass
class FrameSource:
    intrinsics: PinholeIntrinsics
    frames: list  # (timestamp, image, gt_depth or None, gt_pose or None)
    gt_trajectory: list  # (timestamp, SE3Pose) pairs, possibly empty


def _load_input(config: RunConfig) -> FrameSource:
    if config.input_kind == "synthetic":
        if config.scene_spec is not None:
            spec = config.scene_spec
        elif config.input_path:
            with open(config.input_path) as f:
                spec = json.load(f)
        else:
            raise ValueError("synthetic input needs scene_spec or input_path")
        scene = scene_from_spec(spec)
        seq = generate_sequence(
            scene,
            DEFAULT_INTRINSICS,
            noise_sigma=float(spec.get("noise_sigma", config.noise_sigma)),
            seed=config.seed,
        )
        frames = [(f.timestamp, f.image, f.depth, f.pose) for f in seq]
        gt = [(f.timestamp, f.pose) for f in seq]
        return FrameSource(DEFAULT_INTRINSICS, frames, gt)
    if config.input_kind == "tum":
        if not config.input_path:
            raise ValueError("tum input needs input_path")
        seq = load_tum_sequence(config.input_path)
        frames = []
        for idx in range(len(seq)):
            ts = seq.frames[idx].timestamp
            frames.append((ts, seq.read_image(idx), seq.read_depth(idx), None))
        return FrameSource(seq.intrinsics, frames, list(seq.groundtruth))
    raise ValueError(f"unknown input kind {config.input_kind!r}")


def _build_decoder(config: RunConfig, K: PinholeIntrinsics) -> LinearDecoder:
    if config.decoder_path:
        dec = load_decoder(config.decoder_path)
        if (dec.width, dec.height) != (K.width, K.height):
            raise ValueError(
                f"decoder {dec.width}x{dec.height} does not match working size "
                f"{K.width}x{K.height}"
            )
        return dec
    return build_synthetic_decoder(
        K.width,
        K.height,
        config.code_size,
        d0=config.decoder_d0,
        gain=config.basis_gain,
        d_min=config.d_min,
        d_max=config.d_max,
    )


def run_slam(config: RunConfig) -> dict:
    """Execute the full pipeline and write all artifacts; returns the report."""
    t_start = time.time()
    os.makedirs(config.output_dir, exist_ok=True)
    with open(os.path.join(config.output_dir, "config.json"), "w") as f:
        json.dump(config.to_dict(), f, indent=2)

    report: dict = {"status": "ok", "version": __version__}
    try:
        source = _load_input(config)
    except (ValueError, OSError) as e:
        report.update(status="input_error", error=str(e))
        _write_report(config.output_dir, report)
        raise

    frames = source.frames
    if config.max_frames is not None:
        frames = frames[: config.max_frames]
    if not frames:
        report.update(status="input_error", error="empty sequence")
        _write_report(config.output_dir, report)
        raise ValueError("empty sequence")

    decoder = _build_decoder(config, source.intrinsics)
    frontend = SlamFrontend(
        decoder, source.intrinsics, config.graph_config(), config.frontend_config()
    )
    use_proxy = config.code_init == "proxy"
    for ts, image, gt_depth, _ in frames:
        frontend.process_frame(ts, image, proxy_depth=gt_depth if use_proxy else None)
    frontend.finalize(
        SolverConfig(
            max_iterations=config.final_iterations,
            photometric_levels=config.mapping_levels,
            lambda_init=config.lambda_init,
            cost_tolerance=config.cost_tolerance,
        )
    )

    lost = sum(1 for r in frontend.records if r.kind == "lost")
    if frontend.state.status == "lost":
        report["status"] = "lost"
    report.update(
        frames=len(frames),
        lost_frames=lost,
        stats=frontend.stats,
        factor_counts=frontend.graph.factor_counts(),
        events=frontend.events,
    )

    _write_outputs(config, source, frontend, report)
    report["wall_time_s"] = time.time() - t_start
    _write_report(config.output_dir, report)

    metrics = evaluate_run(config.output_dir)
    report["metrics"] = metrics
    _write_report(config.output_dir, report)
    return report


def _write_report(output_dir: str, report: dict) -> None:
    with open(os.path.join(output_dir, "report.json"), "w") as f:
        json.dump(report, f, indent=2, default=float)


def _write_outputs(config: RunConfig, source: FrameSource, frontend: SlamFrontend, report: dict):
    out = config.output_dir
    write_trajectory_file(os.path.join(out, "trajectory.txt"), frontend.trajectory())
    keyframes = frontend.keyframes()
    write_trajectory_file(
        os.path.join(out, "keyframes.txt"),
        [(kf.timestamp, kf.pose) for kf in keyframes],
    )
    if source.gt_trajectory:
        write_trajectory_file(os.path.join(out, "groundtruth.txt"), source.gt_trajectory)

    if config.save_depth:
        os.makedirs(os.path.join(out, "depth"), exist_ok=True)
        os.makedirs(os.path.join(out, "depth_gt"), exist_ok=True)
        gt_by_time = {ts: d for ts, _, d, _ in source.frames if d is not None}
        for kf in keyframes:
            np.save(os.path.join(out, "depth", f"kf_{kf.id:06d}.npy"), kf.depth(0).depths)
            gt = gt_by_time.get(kf.timestamp)
            if gt is not None:
                np.save(os.path.join(out, "depth_gt", f"kf_{kf.id:06d}.npy"), gt)
    if config.save_images:
        os.makedirs(os.path.join(out, "keyframe_images"), exist_ok=True)
        for kf in keyframes:
            save_gray_png(
                os.path.join(out, "keyframe_images", f"kf_{kf.id:06d}.png"),
                kf.pyramid.image(0),
            )
    with open(os.path.join(out, "intrinsics.json"), "w") as f:
        K = source.intrinsics
        json.dump(
            {"fx": K.fx, "fy": K.fy, "cx": K.cx, "cy": K.cy,
             "width": K.width, "height": K.height},
            f, indent=2,
        )


def evaluate_run(output_dir: str, max_dt: float = 0.02, symmetric_pc110: bool = True) -> dict:
    """Compute metrics from a run directory; the single metrics code path.

    Reads keyframes.txt / trajectory.txt against groundtruth.txt, aligns with
    a similarity transform, scores depth maps with the recovered scale, and
    writes metrics.json.
    """
    def read_traj(name):
        path = os.path.join(output_dir, name)
        if not os.path.exists(path):
            return None
        pairs = read_trajectory_file(path)
        return Trajectory.from_pairs(pairs) if pairs else None

    metrics: dict = {"status": "ok"}
    gt = read_traj("groundtruth.txt")
    est_full = read_traj("trajectory.txt")
    est_kf = read_traj("keyframes.txt")
    if gt is None:
        metrics["status"] = "no_groundtruth"
        metrics["notice"] = "groundtruth.txt missing; trajectory metrics omitted"
    else:
        try:
            alignment = align_similarity(est_full, gt, max_dt)
            metrics["ate_rmse"] = alignment.rmse
            metrics["alignment_scale"] = alignment.scale
            metrics["trajectory_pairs"] = alignment.pairs
        except AlignmentError as e:
            metrics["status"] = "alignment_failed"
            metrics["notice"] = str(e)
        if est_kf is not None and len(est_kf) >= 3:
            try:
                kf_alignment = align_similarity(est_kf, gt, max_dt)
                metrics["ate_rmse_keyframes"] = kf_alignment.rmse
            except AlignmentError:
                pass

    depth_dir = os.path.join(output_dir, "depth")
    gt_dir = os.path.join(output_dir, "depth_gt")
    scale = metrics.get("alignment_scale", 1.0)
    per_kf = []
    if os.path.isdir(depth_dir) and os.path.isdir(gt_dir):
        for name in sorted(os.listdir(depth_dir)):
            gt_path = os.path.join(gt_dir, name)
            if not name.endswith(".npy") or not os.path.exists(gt_path):
                continue
            est_depth = np.load(os.path.join(depth_dir, name))
            gt_depth = np.load(gt_path)
            rep = depth_metrics(est_depth, gt_depth, scale=scale, symmetric=symmetric_pc110)
            per_kf.append(
                {
                    "keyframe": name[:-4],
                    "absrel": rep.absrel,
                    "pc110": rep.pc110,
                    "valid_pixels": rep.valid_pixel_count,
                }
            )
    if per_kf:
        metrics["absrel"] = float(np.mean([k["absrel"] for k in per_kf]))
        metrics["pc110"] = float(np.mean([k["pc110"] for k in per_kf]))
        metrics["per_keyframe"] = per_kf

    with open(os.path.join(output_dir, "metrics.json"), "w") as f:
        json.dump(metrics, f, indent=2, default=float)
    return metrics


def export_pointcloud(keyframes, path: str, stride: int = 4) -> int:
    """ASCII PLY of back-projected keyframe depths with per-vertex grayscale.

    Returns the vertex count. Clamped depths are skipped.
    """
    rows = []
    for kf in keyframes:
        K = kf.intrinsics(0)
        dm = kf.depth(0)
        image = kf.pyramid.image(0)
        us, vs = np.meshgrid(
            np.arange(0, K.width, stride), np.arange(0, K.height, stride)
        )
        us, vs = us.ravel(), vs.ravel()
        keep = ~dm.clamped[vs, us]
        us, vs = us[keep], vs[keep]
        pts_cam = backproject(
            np.stack([us, vs], axis=1).astype(float), dm.depths[vs, us], K
        )
        pts_w = kf.pose.apply(pts_cam)
        gray = np.clip(np.round(image[vs, us] * 255), 0, 255).astype(int)
        rows.extend(
            f"{p[0]:.6f} {p[1]:.6f} {p[2]:.6f} {g} {g} {g}"
            for p, g in zip(pts_w, gray)
        )
    with open(path, "w") as f:
        f.write(
            "ply\nformat ascii 1.0\n"
            f"element vertex {len(rows)}\n"
            "property float x\nproperty float y\nproperty float z\n"
            "property uchar red\nproperty uchar green\nproperty uchar blue\n"
            "end_header\n"
        )
        f.write("\n".join(rows) + ("\n" if rows else ""))
    return len(rows)


def export_pointcloud_from_run(output_dir: str, path: str, stride: int = 4) -> int:
    """Rebuild the cloud from a run directory's saved artifacts."""
    import cv2

    with open(os.path.join(output_dir, "intrinsics.json")) as f:
        ki = json.load(f)
    K = PinholeIntrinsics(ki["fx"], ki["fy"], ki["cx"], ki["cy"], ki["width"], ki["height"])
    kf_traj = read_trajectory_file(os.path.join(output_dir, "keyframes.txt"))
    depth_dir = os.path.join(output_dir, "depth")
    img_dir = os.path.join(output_dir, "keyframe_images")
    names = sorted(n for n in os.listdir(depth_dir) if n.endswith(".npy"))
    rows = []
    for (_, pose), name in zip(kf_traj, names):
        depth = np.load(os.path.join(depth_dir, name))
        img_path = os.path.join(img_dir, name.replace(".npy", ".png"))
        image = cv2.imread(img_path, cv2.IMREAD_GRAYSCALE)
        gray_img = (image if image is not None else np.full(depth.shape, 128)).astype(int)
        us, vs = np.meshgrid(
            np.arange(0, K.width, stride), np.arange(0, K.height, stride)
        )
        us, vs = us.ravel(), vs.ravel()
        keep = depth[vs, us] > 0
        us, vs = us[keep], vs[keep]
        pts_cam = backproject(
            np.stack([us, vs], axis=1).astype(float), depth[vs, us], K
        )
        pts_w = pose.apply(pts_cam)
        rows.extend(
            f"{p[0]:.6f} {p[1]:.6f} {p[2]:.6f} {g} {g} {g}"
            for p, g in zip(pts_w, gray_img[vs, us])
        )
    with open(path, "w") as f:
        f.write(
            "ply\nformat ascii 1.0\n"
            f"element vertex {len(rows)}\n"
            "property float x\nproperty float y\nproperty float z\n"
            "property uchar red\nproperty uchar green\nproperty uchar blue\n"
            "end_header\n"
        )
        f.write("\n".join(rows) + ("\n" if rows else ""))
    return len(rows)
