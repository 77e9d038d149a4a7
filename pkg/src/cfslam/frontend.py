"""System frontend: direct tracking, keyframing, one-way frames, loop closure.

Tracking is whole-image photometric alignment of each new frame against the
reference keyframe, coarse to fine, optimising the 6-DoF pose only. Mapping
rounds (batch LM over the keyframe graph) are opened at keyframe events and
interleaved one iteration per tracked frame; one-way frames feed photometric
observations to the latest keyframe until they are marginalised out.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .decoder import LinearDecoder
from .factors import grid_pixels
from .features import match_features
from .geometry import PinholeIntrinsics, SE3Pose, relative_pose, retract, warp_points
from .graph import (
    FactorGraph,
    GraphConfig,
    LMState,
    ReprojectionFactor,
    SolverConfig,
    code_key,
    pose_key,
)
from .image import ImagePyramid, bilinear_sample, build_pyramid
from .keyframe import Keyframe, OneWayFrame, make_keyframe
from .features import flip_matches


@dataclass
class TrackingConfig:
    levels: tuple[int, ...] = (3, 2, 1, 0)  # coarse to fine
    iterations: int = 10
    stride: int = 2  # finest-level stride; coarser levels run dense
    inlier_threshold: float = 0.1  # intensity units
    min_valid_fraction: float = 0.1
    update_tolerance: float = 1e-10


@dataclass
class TrackResult:
    pose: SE3Pose
    inlier_ratio: float
    converged: bool


@dataclass
class TrackingState:
    status: str = "tracking"  # or "lost"
    pose: SE3Pose = field(default_factory=SE3Pose.identity)
    ref_id: int = -1
    inlier_ratio: float = 1.0


def photometric_overlap(
    ref: Keyframe,
    pyramid: ImagePyramid,
    pose_j: SE3Pose,
    level: int = 0,
    threshold: float = 0.1,
    stride: int = 2,
) -> float:
    """Fraction of reference pixels that warp validly into the frame with an
    intensity residual below the threshold (denominator: all attempted)."""
    img_i = ref.pyramid.image(level)
    img_j = pyramid.image(level)
    K = ref.pyramid.intrinsics(level)
    us, vs = grid_pixels(K.width, K.height, max(1, stride // (1 << level)))
    dm = ref.depth(level)
    pixels = np.stack([us, vs], axis=1).astype(np.float64)
    T = relative_pose(ref.pose, pose_j)
    pix_j, _, valid = warp_points(pixels, dm.depths[vs, us], T, K)
    vals, _, sample_ok = bilinear_sample(img_j, pix_j)
    ok = valid & sample_ok & ~dm.clamped[vs, us]
    inliers = ok & (np.abs(img_i[vs, us] - vals) < threshold)
    return float(inliers.sum()) / max(len(us), 1)


def track_frame(
    pyramid: ImagePyramid,
    ref: Keyframe,
    init: SE3Pose,
    config: TrackingConfig | None = None,
) -> TrackResult:
    """Direct whole-image alignment of the frame against the reference
    keyframe, Gauss-Newton over the frame pose only (code frozen)."""
    from .factors import eval_photometric

    config = config or TrackingConfig()
    pose = init
    converged = True
    for level in config.levels:
        if level >= pyramid.num_levels:
            continue
        stride = max(1, config.stride // (1 << level))
        total = len(grid_pixels(ref.pyramid.intrinsics(level).width,
                                ref.pyramid.intrinsics(level).height, stride)[0])
        shim = OneWayFrame(-1, 0.0, pose, pyramid)
        cost = None
        for _ in range(config.iterations):
            ev = eval_photometric(
                ref, shim, level=level, stride=stride, weight=1.0, pose_j=pose
            )
            if level == config.levels[0] and ev.valid_count < config.min_valid_fraction * total:
                return TrackResult(init, 0.0, False)
            J = ev.jacobians["pose_j"]
            H = J.T @ J
            g = J.T @ ev.residual
            if np.linalg.eigvalsh(H).min() < 1e-12 * max(np.abs(H).max(), 1e-12):
                return TrackResult(init, 0.0, False)
            step = -np.linalg.solve(H, g)
            if np.linalg.norm(step) < config.update_tolerance:
                break
            cost = ev.cost if cost is None else cost
            accepted = False
            scale = 1.0
            for _ in range(6):  # backtracking keeps the per-level error non-increasing
                cand = retract(pose, scale * step)
                ev_c = eval_photometric(
                    ref, shim, level=level, stride=stride, weight=1.0,
                    pose_j=cand, with_jacobians=False,
                )
                if ev_c.cost < cost:
                    pose = cand
                    cost = ev_c.cost
                    accepted = True
                    break
                scale *= 0.5
            if not accepted:
                break
    ratio = photometric_overlap(
        ref, pyramid, pose, level=0,
        threshold=config.inlier_threshold, stride=config.stride,
    )
    return TrackResult(pose, ratio, converged)


@dataclass
class KeyframePolicy:
    translation_fraction: float = 0.15  # of median reference depth
    rotation_deg: float = 10.0
    min_inlier_ratio: float = 0.7


def should_create_keyframe(
    state: TrackingState, ref: Keyframe, policy: KeyframePolicy | None = None
) -> bool:
    """Baseline/rotation/overlap test against the reference keyframe."""
    policy = policy or KeyframePolicy()
    rel = relative_pose(ref.pose, state.pose)
    if np.linalg.norm(rel.t) > policy.translation_fraction * ref.median_depth():
        return True
    if rel.rotation_angle() > math.radians(policy.rotation_deg):
        return True
    return state.inlier_ratio < policy.min_inlier_ratio


def initialize_keyframe(
    frame_id: int,
    timestamp: float,
    image: np.ndarray,
    K: PinholeIntrinsics,
    pose: SE3Pose,
    decoder: LinearDecoder,
    proxy_depth: np.ndarray | None = None,
    levels: int = 4,
    max_features: int = 500,
    feature_seed: int = 7,
) -> Keyframe:
    """New keyframe with either a zero code or a code fitted to proxy depth."""
    code = None if proxy_depth is None else decoder.fit_code(proxy_depth)
    return make_keyframe(
        frame_id, timestamp, image, K, pose, decoder,
        code=code, levels=levels, max_features=max_features, feature_seed=feature_seed,
    )


@dataclass
class FrontendConfig:
    tracking: TrackingConfig = field(default_factory=TrackingConfig)
    keyframes: KeyframePolicy = field(default_factory=KeyframePolicy)
    pyramid_levels: int = 4
    active_window: int = 10
    oneway_cap: int = 8
    oneway_marginalize_after: int = 8  # mapping iterations before removal
    oneway_every: int = 1  # attach every n-th tracked frame
    mapping_iterations: int = 10
    mapping_levels: tuple[int, ...] = (1, 0)
    solver: SolverConfig = field(default_factory=SolverConfig)
    global_loops: bool = True
    local_loops: bool = True
    global_loop_min_matches: int = 30
    global_loop_min_ratio: float = 0.6
    reloc_level: int = 2
    reloc_min_ratio: float = 0.6
    reloc_inlier_threshold: float = 0.05  # tighter than tracking: gates acceptance
    code_init: str = "zero"  # or "proxy"
    max_features: int = 500
    feature_seed: int = 7


@dataclass
class FrameRecord:
    frame_id: int
    timestamp: float
    kind: str  # keyframe / tracked / lost
    ref_id: int
    rel_to_ref: SE3Pose  # ref.pose^-1 * pose at track time
    inlier_ratio: float


class SlamFrontend:
    """Single-writer orchestration of tracking, mapping, and loop closure."""

    def __init__(
        self,
        decoder: LinearDecoder,
        K: PinholeIntrinsics,
        graph_config: GraphConfig | None = None,
        config: FrontendConfig | None = None,
    ):
        self.decoder = decoder
        self.K = K
        self.config = config or FrontendConfig()
        self.graph = FactorGraph(graph_config or GraphConfig())
        self.state = TrackingState()
        self.records: list[FrameRecord] = []
        self.active_oneways: dict[int, int] = {}  # frame id -> mapping steps seen
        self._mapping_queue: list[int] = []
        self._lm_state: LMState | None = None
        self._frame_count = 0
        self._last_rel = SE3Pose.identity()  # constant-velocity model
        self._prev_pose: SE3Pose | None = None
        self.events: list[dict] = []
        self.stats = {
            "keyframes": 0, "tracked": 0, "lost": 0, "relocalized": 0,
            "mapping_iterations": 0, "oneway_marginalized": 0,
            "local_loops": 0, "global_loops": 0,
        }

    # -- helpers --

    def keyframes(self) -> list[Keyframe]:
        return [self.graph.frames[i] for i in self.graph.keyframe_ids]

    def latest_keyframe(self) -> Keyframe:
        return self.graph.frames[self.graph.keyframe_ids[-1]]

    def _open_mapping_round(self):
        cfg = self.config
        per_level = max(1, cfg.mapping_iterations // max(len(cfg.mapping_levels), 1))
        self._mapping_queue = [
            lvl for lvl in cfg.mapping_levels for _ in range(per_level)
        ]
        self._lm_state = LMState(self.config.solver.lambda_init)

    def _run_mapping_iteration(self):
        if not self._mapping_queue:
            return
        level = self._mapping_queue.pop(0)
        self.graph.lm_step(self._lm_state, self.config.solver, level=level)
        self.graph.sync_frames()
        self.stats["mapping_iterations"] += 1
        for fid in list(self.active_oneways):
            self.active_oneways[fid] += 1
            if self.active_oneways[fid] >= self.config.oneway_marginalize_after:
                self._marginalize_oneway(fid)

    def _flush_mapping_round(self):
        while self._mapping_queue:
            self._run_mapping_iteration()

    def _marginalize_oneway(self, fid: int):
        self.graph.marginalize_frame(pose_key(fid), level=min(self.config.mapping_levels))
        self.active_oneways.pop(fid, None)
        self.stats["oneway_marginalized"] += 1

    def _marginalize_all_oneways(self):
        for fid in list(self.active_oneways):
            self._marginalize_oneway(fid)

    # -- spec operations --

    def attach_oneway_frame(self, pyramid: ImagePyramid, pose: SE3Pose, timestamp: float, frame_id: int):
        """Pose-only frame refining the latest keyframe; capped and transient."""
        while len(self.active_oneways) >= self.config.oneway_cap:
            oldest = min(self.active_oneways)
            self._marginalize_oneway(oldest)
        owf = OneWayFrame(frame_id, timestamp, pose, pyramid)
        self.graph.add_oneway_frame(owf, self.graph.keyframe_ids[-1])
        self.active_oneways[frame_id] = 0

    def close_local_loops(self) -> list[tuple[int, int]]:
        """Connect unconnected keyframe pairs inside the active window whose
        relative pose passes the keyframe baseline criteria in reverse."""
        window = self.graph.keyframe_ids[-self.config.active_window:]
        policy = self.config.keyframes
        added = []
        for a_idx in range(len(window)):
            for b_idx in range(a_idx + 1, len(window)):
                i, j = window[a_idx], window[b_idx]
                if self.graph.are_connected(i, j):
                    continue
                kf_i, kf_j = self.graph.frames[i], self.graph.frames[j]
                rel = relative_pose(kf_i.pose, kf_j.pose)
                close_t = np.linalg.norm(rel.t) < policy.translation_fraction * kf_i.median_depth()
                close_r = rel.rotation_angle() < math.radians(policy.rotation_deg)
                if close_t and close_r:
                    if self.graph.connect_keyframes(i, j) > 0:
                        added.append((i, j))
                        self.stats["local_loops"] += 1
        return added

    def detect_global_loop(self, keyframe: Keyframe) -> tuple[int, SE3Pose] | None:
        """Linear-scan match-count ranking outside the active window, with
        photometric verification by tracking from the candidate's pose."""
        window = set(self.graph.keyframe_ids[-self.config.active_window:])
        candidates = [
            i for i in self.graph.keyframe_ids
            if i not in window and i != keyframe.id
        ]
        if not candidates or keyframe.features is None:
            return None
        counts = []
        for i in candidates:
            kf = self.graph.frames[i]
            if kf.features is None:
                continue
            counts.append((len(match_features(keyframe.features, kf.features)), i))
        if not counts:
            return None
        counts.sort(reverse=True)
        best_count, best_id = counts[0]
        if best_count <= self.config.global_loop_min_matches:
            return None
        cand = self.graph.frames[best_id]
        result = track_frame(keyframe.pyramid, cand, cand.pose, self.config.tracking)
        if not result.converged or result.inlier_ratio <= self.config.global_loop_min_ratio:
            return None
        return best_id, relative_pose(cand.pose, result.pose)

    def _close_global_loop(self, keyframe: Keyframe, match: tuple[int, SE3Pose]):
        """On acceptance only reprojection factors are added (wider basin)."""
        other_id, _ = match
        other = self.graph.frames[other_id]
        matches = match_features(keyframe.features, other.features,
                                 self.graph.config.match_ratio)
        if len(matches) < self.graph.config.min_matches:
            return
        loss = self.graph.config.reprojection_loss
        self.graph.add_factor(ReprojectionFactor(keyframe.id, other_id, matches, loss))
        self.graph.add_factor(
            ReprojectionFactor(other_id, keyframe.id, flip_matches(matches), loss)
        )
        self.stats["global_loops"] += 1
        self.events.append({"event": "global_loop", "from": keyframe.id, "to": other_id})

    def relocalize(self, pyramid: ImagePyramid) -> tuple[SE3Pose, int] | None:
        """Coarse-level alignment against every keyframe from its own pose."""
        best = None
        level = min(self.config.reloc_level, pyramid.num_levels - 1)
        cfg = TrackingConfig(
            levels=(level,), iterations=self.config.tracking.iterations,
            stride=1, inlier_threshold=self.config.reloc_inlier_threshold,
        )
        for kf in self.keyframes():
            result = track_frame(pyramid, kf, kf.pose, cfg)
            if not result.converged:
                continue
            ratio = photometric_overlap(
                kf, pyramid, result.pose, level=level,
                threshold=self.config.reloc_inlier_threshold, stride=1,
            )
            if ratio > self.config.reloc_min_ratio and (best is None or ratio > best[2]):
                best = (result.pose, kf.id, ratio)
        if best is None:
            return None
        return best[0], best[1]

    # -- main loop --

    def process_frame(
        self, timestamp: float, image: np.ndarray, proxy_depth: np.ndarray | None = None
    ) -> FrameRecord:
        cfg = self.config
        frame_id = self._frame_count
        self._frame_count += 1
        pyramid = build_pyramid(image, self.K, cfg.pyramid_levels)

        if not self.graph.keyframe_ids:
            record = self._create_keyframe(frame_id, timestamp, image, SE3Pose.identity(), proxy_depth)
            self.state = TrackingState("tracking", self.latest_keyframe().pose, frame_id, 1.0)
            self._prev_pose = self.state.pose
            return record

        if self.state.status == "lost":
            found = self.relocalize(pyramid)
            if found is None:
                self.stats["lost"] += 1
                record = FrameRecord(frame_id, timestamp, "lost", self.state.ref_id,
                                     self._ref().pose.inverse().compose(self.state.pose), 0.0)
                self.records.append(record)
                return record
            self.state = TrackingState("tracking", found[0], found[1], 1.0)
            self.stats["relocalized"] += 1
            self._prev_pose = found[0]
            self._last_rel = SE3Pose.identity()

        ref = self._ref()
        warm = self.state.pose.compose(self._last_rel)
        result = track_frame(pyramid, ref, warm, cfg.tracking)
        if not result.converged:
            self.state.status = "lost"
            self.stats["lost"] += 1
            record = FrameRecord(frame_id, timestamp, "lost", ref.id,
                                 ref.pose.inverse().compose(self.state.pose), 0.0)
            self.records.append(record)
            return record

        if self._prev_pose is not None:
            self._last_rel = self._prev_pose.inverse().compose(result.pose)
        self._prev_pose = result.pose
        self.state = TrackingState("tracking", result.pose, ref.id, result.inlier_ratio)
        self.stats["tracked"] += 1

        if should_create_keyframe(self.state, ref, cfg.keyframes):
            record = self._create_keyframe(frame_id, timestamp, image, result.pose, proxy_depth)
            self.state = TrackingState("tracking", self.latest_keyframe().pose,
                                       self.latest_keyframe().id, 1.0)
            self._prev_pose = self.state.pose
            return record

        record = FrameRecord(frame_id, timestamp, "tracked", ref.id,
                             ref.pose.inverse().compose(result.pose), result.inlier_ratio)
        self.records.append(record)
        if cfg.oneway_every > 0 and frame_id % cfg.oneway_every == 0:
            self.attach_oneway_frame(pyramid, result.pose, timestamp, frame_id)
        self._run_mapping_iteration()
        return record

    def _ref(self) -> Keyframe:
        return self.graph.frames[self.state.ref_id]

    def _create_keyframe(self, frame_id, timestamp, image, pose, proxy_depth):
        cfg = self.config
        self._flush_mapping_round()
        self._marginalize_all_oneways()
        kf = initialize_keyframe(
            frame_id, timestamp, image, self.K, pose, self.decoder,
            proxy_depth=proxy_depth if cfg.code_init == "proxy" else None,
            levels=cfg.pyramid_levels, max_features=cfg.max_features,
            feature_seed=cfg.feature_seed,
        )
        self.graph.add_keyframe(kf)
        self.stats["keyframes"] += 1
        if cfg.local_loops:
            self.close_local_loops()
        if cfg.global_loops:
            match = self.detect_global_loop(kf)
            if match is not None:
                self._close_global_loop(kf, match)
        self._open_mapping_round()
        self._run_mapping_iteration()
        record = FrameRecord(frame_id, timestamp, "keyframe", kf.id,
                             SE3Pose.identity(), 1.0)
        self.records.append(record)
        return record

    def finalize(self, config: SolverConfig | None = None):
        """Flush the open round, remove one-way frames, catch end-of-sequence
        local loops, and batch-optimise the full map."""
        self._flush_mapping_round()
        self._marginalize_all_oneways()
        if self.config.local_loops and len(self.graph.keyframe_ids) >= 2:
            self.close_local_loops()
        solver = config or SolverConfig(
            max_iterations=25, photometric_levels=self.config.mapping_levels
        )
        report = self.graph.optimise(solver)
        self.graph.sync_frames()
        return report

    def trajectory(self) -> list[tuple[float, SE3Pose]]:
        """Keyframe poses plus tracked poses recomposed onto the final map."""
        out = []
        for rec in self.records:
            if rec.kind == "keyframe":
                out.append((rec.timestamp, self.graph.frames[rec.ref_id].pose))
            else:
                ref = self.graph.frames.get(rec.ref_id)
                if ref is None:
                    continue
                out.append((rec.timestamp, ref.pose.compose(rec.rel_to_ref)))
        return out
