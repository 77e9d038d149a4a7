"""Factor graph over keyframe poses and codes with batch Levenberg-Marquardt.

Variables are world poses (6-dim tangent) and depth codes (K-dim). The
batch MAP problem is solved by LM over dense block normal equations, which
is exact at desk scale (a few thousand tangent dimensions). One-way frames
are removed by Schur-complement marginalisation at the current linearization
point; the resulting Gaussian priors stay anchored there.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np
import scipy.linalg

from . import factors as F
from .features import FeatureMatch, flip_matches, match_features
from .geometry import SE3Pose, retract, se3_log
from .keyframe import Keyframe, OneWayFrame


class VariableKey(NamedTuple):
    kind: str  # "pose" or "code"
    frame_id: int


def pose_key(frame_id: int) -> VariableKey:
    return VariableKey("pose", frame_id)


def code_key(frame_id: int) -> VariableKey:
    return VariableKey("code", frame_id)


class EliminationOrderError(RuntimeError):
    """Marginalisation requested for a variable that is not a leaf."""


@dataclass
class GraphConfig:
    enable_photometric: bool = True
    enable_reprojection: bool = False
    enable_geometric: bool = False
    connect_last: int = 4
    photometric_stride: int = 2
    photometric_weight: float = 20.0
    reprojection_loss: F.RobustLoss = field(default_factory=lambda: F.RobustLoss("cauchy", 2.0))
    min_matches: int = 8
    match_ratio: float = 0.8
    geometric_loss: F.RobustLoss = field(default_factory=lambda: F.RobustLoss("huber", 0.1))
    geometric_grid: tuple[int, int] = (32, 24)
    geometric_reseed: bool = False
    sigma_code: float = 1.0
    gauge_sigma: float = 1e-4
    auto_gauge: bool = True
    seed: int = 0


@dataclass
class SolverConfig:
    max_iterations: int = 50
    lambda_init: float = 1e-4
    lambda_up: float = 10.0
    lambda_down: float = 2.0
    lambda_max: float = 1e8
    cost_tolerance: float = 1e-6  # relative cost decrease
    update_tolerance: float = 1e-8
    photometric_levels: tuple[int, ...] = (0,)


@dataclass
class SolveReport:
    iterations: int
    initial_cost: float
    final_cost: float
    converged: bool
    no_progress: bool
    cost_trace: list[float] = field(default_factory=list)


@dataclass
class LMState:
    lam: float


@dataclass
class StepResult:
    accepted: bool
    converged: bool
    no_progress: bool
    cost_before: float
    cost_after: float
    step_norm: float


@dataclass(eq=False)
class LinearPrior:
    """Gaussian produced by marginalisation, anchored at its linearization."""

    keys: list[VariableKey]
    information: np.ndarray
    info_vector: np.ndarray
    anchors: dict[VariableKey, object]


def _dim(value) -> int:
    return 6 if isinstance(value, SE3Pose) else len(value)


def _local_delta(value, anchor) -> np.ndarray:
    if isinstance(value, SE3Pose):
        return se3_log(value.compose(anchor.inverse())).vector()
    return np.asarray(value) - np.asarray(anchor)


def _retract_value(value, delta):
    if isinstance(value, SE3Pose):
        return retract(value, delta)
    return value + delta


# --- factor records ---------------------------------------------------------
# Thin bookkeeping around the math in factors.py: which variables a factor
# touches and how its jacobian names map onto them.


@dataclass(eq=False)
class PhotometricFactor:
    i: int
    j: int
    stride: int = 1
    weight: float = 20.0

    def keys(self):
        return [pose_key(self.i), code_key(self.i), pose_key(self.j)]

    def evaluate(self, graph, values, level=0, with_jacobians=True, rng=None):
        ev = F.eval_photometric(
            graph.frames[self.i],
            graph.frames[self.j],
            level=level,
            stride=max(1, self.stride // (1 << level)),  # coarse levels keep density
            weight=self.weight,
            pose_i=values[pose_key(self.i)],
            code_i=values[code_key(self.i)],
            pose_j=values[pose_key(self.j)],
            with_jacobians=with_jacobians,
        )
        return ev, {"pose_i": pose_key(self.i), "code_i": code_key(self.i), "pose_j": pose_key(self.j)}


@dataclass(eq=False)
class ReprojectionFactor:
    i: int
    j: int
    matches: list[FeatureMatch]
    loss: F.RobustLoss = field(default_factory=lambda: F.RobustLoss("cauchy", 2.0))

    def keys(self):
        return [pose_key(self.i), code_key(self.i), pose_key(self.j)]

    def evaluate(self, graph, values, level=0, with_jacobians=True, rng=None):
        ev = F.eval_reprojection(
            graph.frames[self.i],
            graph.frames[self.j],
            self.matches,
            loss=self.loss,
            pose_i=values[pose_key(self.i)],
            code_i=values[code_key(self.i)],
            pose_j=values[pose_key(self.j)],
            with_jacobians=with_jacobians,
        )
        return ev, {"pose_i": pose_key(self.i), "code_i": code_key(self.i), "pose_j": pose_key(self.j)}


@dataclass(eq=False)
class GeometricFactor:
    i: int
    j: int
    loss: F.RobustLoss = field(default_factory=lambda: F.RobustLoss("huber", 0.1))
    grid: tuple[int, int] = (32, 24)
    reseed: bool = False

    def keys(self):
        return [pose_key(self.i), code_key(self.i), pose_key(self.j), code_key(self.j)]

    def evaluate(self, graph, values, level=0, with_jacobians=True, rng=None):
        kf_i = graph.frames[self.i]
        K = kf_i.pyramid.intrinsics(0)
        samples = F.geometric_sample_grid(
            K.width, K.height, self.grid[0], self.grid[1],
            rng=rng if self.reseed else None,
        )
        ev = F.eval_geometric(
            kf_i,
            graph.frames[self.j],
            samples=samples,
            loss=self.loss,
            pose_i=values[pose_key(self.i)],
            code_i=values[code_key(self.i)],
            pose_j=values[pose_key(self.j)],
            code_j=values[code_key(self.j)],
            with_jacobians=with_jacobians,
        )
        return ev, {
            "pose_i": pose_key(self.i),
            "code_i": code_key(self.i),
            "pose_j": pose_key(self.j),
            "code_j": code_key(self.j),
        }


@dataclass(eq=False)
class CodePriorFactor:
    i: int
    sigma: float = 1.0

    def keys(self):
        return [code_key(self.i)]

    def evaluate(self, graph, values, level=0, with_jacobians=True, rng=None):
        ev = F.eval_zero_code_prior(values[code_key(self.i)], self.sigma)
        if not with_jacobians:
            ev = F.FactorEvaluation(ev.residual, {}, ev.valid_count, ev.cost)
        return ev, {"code": code_key(self.i)}


@dataclass(eq=False)
class PosePriorFactor:
    i: int
    target: SE3Pose
    sigma: float

    def keys(self):
        return [pose_key(self.i)]

    def evaluate(self, graph, values, level=0, with_jacobians=True, rng=None):
        ev = F.eval_pose_prior(values[pose_key(self.i)], self.target, self.sigma)
        if not with_jacobians:
            ev = F.FactorEvaluation(ev.residual, {}, ev.valid_count, ev.cost)
        return ev, {"pose": pose_key(self.i)}


@dataclass(eq=False)
class LinearFactor:
    """Generic Gaussian factor sum_k A_k x_k - z over vector variables."""

    blocks: list[tuple[VariableKey, np.ndarray]]
    z: np.ndarray

    def keys(self):
        return [k for k, _ in self.blocks]

    def evaluate(self, graph, values, level=0, with_jacobians=True, rng=None):
        r = -np.asarray(self.z, dtype=np.float64)
        names = {}
        jacs = {}
        for idx, (key, A) in enumerate(self.blocks):
            r = r + A @ np.asarray(values[key], dtype=np.float64)
            name = f"x{idx}"
            names[name] = key
            jacs[name] = A
        ev = F.FactorEvaluation(
            residual=r,
            jacobians=jacs if with_jacobians else {},
            valid_count=len(r),
            cost=0.5 * float(r @ r),
        )
        return ev, names


# --- the graph ---------------------------------------------------------------


class FactorGraph:
    def __init__(self, config: GraphConfig | None = None):
        self.config = config or GraphConfig()
        self.variables: dict[VariableKey, object] = {}
        self.transient: set[VariableKey] = set()
        self.factors: list = []
        self.linear_priors: list[LinearPrior] = []
        self.frames: dict[int, Keyframe | OneWayFrame] = {}
        self.keyframe_ids: list[int] = []
        self._gauge_fixed = False
        self._rng = np.random.default_rng(self.config.seed)

    # -- construction --

    def add_variable(self, key: VariableKey, value, transient: bool = False) -> None:
        if key in self.variables:
            raise ValueError(f"duplicate variable {key}")
        self.variables[key] = value
        if transient:
            self.transient.add(key)

    def add_factor(self, factor) -> None:
        for key in factor.keys():
            if key not in self.variables:
                raise KeyError(f"factor references unknown variable {key}")
        self.factors.append(factor)

    def add_keyframe(self, kf: Keyframe, connect_last: int | None = None) -> None:
        """Add pose+code variables, a zero-code prior, and directed pairwise
        factors both ways to each of the last N keyframes."""
        if kf.id in self.frames:
            raise ValueError(f"duplicate keyframe id {kf.id}")
        n = self.config.connect_last if connect_last is None else connect_last
        self.frames[kf.id] = kf
        self.add_variable(pose_key(kf.id), kf.pose)
        self.add_variable(code_key(kf.id), kf.code.copy())
        self.add_factor(CodePriorFactor(kf.id, self.config.sigma_code))
        if not self.keyframe_ids and self.config.auto_gauge:
            self.gauge_fix(kf.id)
        for other in self.keyframe_ids[-n:] if n > 0 else []:
            self.connect_keyframes(other, kf.id)
        self.keyframe_ids.append(kf.id)

    def connect_keyframes(self, i: int, j: int) -> int:
        """Add the enabled pairwise factor types in both directions.

        Returns the number of factors added. Reprojection factors are only
        added when the match count clears the configured minimum.
        """
        cfg = self.config
        added = 0
        if cfg.enable_photometric:
            for a, b in ((i, j), (j, i)):
                self.add_factor(
                    PhotometricFactor(a, b, cfg.photometric_stride, cfg.photometric_weight)
                )
                added += 1
        if cfg.enable_reprojection:
            kf_i, kf_j = self.frames[i], self.frames[j]
            if kf_i.features is not None and kf_j.features is not None:
                matches = match_features(kf_i.features, kf_j.features, cfg.match_ratio)
                if len(matches) >= cfg.min_matches:
                    self.add_factor(ReprojectionFactor(i, j, matches, cfg.reprojection_loss))
                    self.add_factor(
                        ReprojectionFactor(j, i, flip_matches(matches), cfg.reprojection_loss)
                    )
                    added += 2
        if cfg.enable_geometric:
            for a, b in ((i, j), (j, i)):
                self.add_factor(
                    GeometricFactor(a, b, cfg.geometric_loss, cfg.geometric_grid, cfg.geometric_reseed)
                )
                added += 1
        return added

    def are_connected(self, i: int, j: int) -> bool:
        pair = {pose_key(i), pose_key(j)}
        return any(pair <= set(f.keys()) for f in self.factors)

    def add_oneway_frame(self, owf: OneWayFrame, target_kf_id: int) -> None:
        """Pose-only variable plus one directed photometric factor kf -> owf."""
        if owf.id in self.frames:
            raise ValueError(f"duplicate frame id {owf.id}")
        if target_kf_id not in self.frames:
            raise KeyError(f"unknown keyframe {target_kf_id}")
        self.frames[owf.id] = owf
        self.add_variable(pose_key(owf.id), owf.pose, transient=True)
        self.add_factor(
            PhotometricFactor(
                target_kf_id, owf.id, self.config.photometric_stride, self.config.photometric_weight
            )
        )

    def gauge_fix(self, frame_id: int | None = None) -> None:
        """Strong unary pose prior on the first (or given) keyframe."""
        if self._gauge_fixed:
            return
        if frame_id is None:
            if not self.keyframe_ids:
                raise ValueError("gauge fix needs at least one keyframe")
            frame_id = self.keyframe_ids[0]
        target = self.variables[pose_key(frame_id)]
        self.add_factor(PosePriorFactor(frame_id, target, self.config.gauge_sigma))
        self._gauge_fixed = True

    def factor_counts(self) -> dict[str, int]:
        counts: dict[str, int] = {}
        for f in self.factors:
            name = type(f).__name__
            counts[name] = counts.get(name, 0) + 1
        return counts

    # -- values --

    def values_copy(self) -> dict[VariableKey, object]:
        return dict(self.variables)

    def sync_frames(self) -> None:
        """Push optimised poses/codes back into the frame objects."""
        for fid, frame in self.frames.items():
            frame.pose = self.variables[pose_key(fid)]
            ck = code_key(fid)
            if ck in self.variables and isinstance(frame, Keyframe):
                if not np.array_equal(frame.code, self.variables[ck]):
                    frame.set_code(self.variables[ck])

    # -- linearization and solving --

    def _index_map(self):
        index = {}
        offset = 0
        for key, value in self.variables.items():
            d = _dim(value)
            index[key] = (offset, d)
            offset += d
        return index, offset

    def linearize(self, values=None, level: int = 0):
        """Assemble dense normal equations H, b at the given values.

        H = sum J^T W J plus marginal-prior information; b = -sum J^T W r
        plus prior contributions. Degenerate factors (no valid terms) are
        skipped. Returns (H, b, index_map, cost).
        """
        values = self.variables if values is None else values
        index, total = self._index_map()
        H = np.zeros((total, total))
        b = np.zeros(total)
        cost = 0.0
        for f in self.factors:
            ev, keymap = f.evaluate(self, values, level=level, with_jacobians=True, rng=self._rng)
            if ev.degenerate:
                continue
            cost += ev.cost
            items = [(index[keymap[name]], jac) for name, jac in ev.jacobians.items()]
            for (off_a, dim_a), jac_a in items:
                b[off_a : off_a + dim_a] -= jac_a.T @ ev.residual
                for (off_b, dim_b), jac_b in items:
                    if off_b < off_a:
                        continue  # fill upper triangle, mirror below
                    block = jac_a.T @ jac_b
                    H[off_a : off_a + dim_a, off_b : off_b + dim_b] += block
                    if off_b > off_a:
                        H[off_b : off_b + dim_b, off_a : off_a + dim_a] += block.T
        for prior in self.linear_priors:
            cost += self._apply_prior(prior, values, index, H, b)
        return H, b, index, cost

    def _apply_prior(self, prior: LinearPrior, values, index, H, b) -> float:
        offs = [index[k] for k in prior.keys]
        delta = np.concatenate(
            [_local_delta(values[k], prior.anchors[k]) for k in prior.keys]
        )
        grad = prior.information @ delta - prior.info_vector
        cost = 0.5 * float(delta @ prior.information @ delta) - float(
            prior.info_vector @ delta
        )
        pos = 0
        spans = []
        for k, (off, dim) in zip(prior.keys, offs):
            spans.append((slice(off, off + dim), slice(pos, pos + dim)))
            pos += dim
        for g_sl, l_sl in spans:
            b[g_sl] -= grad[l_sl]
            for g_sl2, l_sl2 in spans:
                H[g_sl, g_sl2] += prior.information[l_sl, l_sl2]
        return cost

    def total_cost(self, values=None, level: int = 0) -> float:
        values = self.variables if values is None else values
        cost = 0.0
        for f in self.factors:
            ev, _ = f.evaluate(self, values, level=level, with_jacobians=False, rng=self._rng)
            if not ev.degenerate:
                cost += ev.cost
        if self.linear_priors:
            index, total = self._index_map()
            Hd = np.zeros((total, total))
            bd = np.zeros(total)
            for prior in self.linear_priors:
                cost += self._apply_prior(prior, values, index, Hd, bd)
        return cost

    def _retract_all(self, values, delta, index):
        out = {}
        for key, value in values.items():
            off, dim = index[key]
            out[key] = _retract_value(value, delta[off : off + dim])
        return out

    def lm_step(self, state: LMState, config: SolverConfig, level: int = 0) -> StepResult:
        """One damped Gauss-Newton iteration with lambda adaptation.

        Accepts only strict cost decreases; a vanishing step reports
        convergence, exhausting lambda_max reports no progress.
        """
        H, b, index, cost0 = self.linearize(level=level)
        if H.shape[0] == 0:
            return StepResult(False, True, False, cost0, cost0, 0.0)
        diag = np.maximum(np.diag(H), 1e-8)
        while True:
            damped = H + np.diag(state.lam * diag)
            try:
                chol = scipy.linalg.cho_factor(damped, lower=True)
                delta = scipy.linalg.cho_solve(chol, b)
            except scipy.linalg.LinAlgError:
                delta = None
            if delta is not None:
                step_norm = float(np.linalg.norm(delta))
                if step_norm < config.update_tolerance:
                    return StepResult(False, True, False, cost0, cost0, step_norm)
                trial = self._retract_all(self.variables, delta, index)
                cost1 = self.total_cost(trial, level=level)
                if cost1 < cost0:
                    self.variables = trial
                    state.lam = max(state.lam / config.lambda_down, 1e-12)
                    rel = (cost0 - cost1) / max(cost0, 1e-300)
                    return StepResult(True, rel < config.cost_tolerance, False, cost0, cost1, step_norm)
            state.lam *= config.lambda_up
            if state.lam > config.lambda_max:
                return StepResult(False, False, True, cost0, cost0, 0.0)

    def optimise(self, config: SolverConfig | None = None) -> SolveReport:
        """LM over the coarse-to-fine photometric level schedule."""
        if not self.variables:
            raise ValueError("cannot optimise an empty graph")
        config = config or SolverConfig()
        trace: list[float] = []
        initial = None
        final = 0.0
        iterations = 0
        converged = False
        no_progress = False
        for level in config.photometric_levels:
            state = LMState(config.lambda_init)
            converged = False
            no_progress = False
            for _ in range(config.max_iterations):
                res = self.lm_step(state, config, level=level)
                iterations += 1
                if initial is None:
                    initial = res.cost_before
                trace.append(res.cost_after)
                final = res.cost_after
                if res.no_progress:
                    no_progress = True
                    break
                if res.converged:
                    converged = True
                    break
        self.sync_frames()
        return SolveReport(iterations, float(initial or 0.0), float(final), converged, no_progress, trace)

    # -- marginalisation --

    def marginalize_frame(self, key: VariableKey, level: int = 0) -> None:
        """Schur-complement the variable out at the current linearization.

        All factors and priors touching the key are replaced by one Gaussian
        prior on the remaining connected variables; the key must be a leaf
        (its factors may not touch another transient, to-be-removed variable).
        """
        if key not in self.variables:
            raise KeyError(f"unknown variable {key}")
        touching = [f for f in self.factors if key in f.keys()]
        touching_priors = [p for p in self.linear_priors if key in p.keys]
        neighbors: list[VariableKey] = []
        for f in touching:
            for k in f.keys():
                if k != key and k not in neighbors:
                    neighbors.append(k)
        for p in touching_priors:
            for k in p.keys:
                if k != key and k not in neighbors:
                    neighbors.append(k)
        bad = [k for k in neighbors if k in self.transient]
        if bad:
            raise EliminationOrderError(
                f"{key} is not a leaf: factors also touch transient {bad[0]}"
            )

        if touching or touching_priors:
            self._build_marginal_prior(key, neighbors, touching, touching_priors, level)
        self.factors = [f for f in self.factors if f not in touching]
        self.linear_priors = [p for p in self.linear_priors if p not in touching_priors]
        del self.variables[key]
        self.transient.discard(key)
        fid = key.frame_id
        if pose_key(fid) not in self.variables and code_key(fid) not in self.variables:
            self.frames.pop(fid, None)

    def _build_marginal_prior(self, key, neighbors, touching, touching_priors, level):
        local_keys = neighbors + [key]
        index = {}
        offset = 0
        for k in local_keys:
            d = _dim(self.variables[k])
            index[k] = (offset, d)
            offset += d
        H = np.zeros((offset, offset))
        b = np.zeros(offset)
        for f in touching:
            ev, keymap = f.evaluate(self, self.variables, level=level, with_jacobians=True, rng=self._rng)
            if ev.degenerate:
                continue
            items = [(index[keymap[name]], jac) for name, jac in ev.jacobians.items()]
            for (off_a, dim_a), jac_a in items:
                b[off_a : off_a + dim_a] -= jac_a.T @ ev.residual
                for (off_b, dim_b), jac_b in items:
                    H[off_a : off_a + dim_a, off_b : off_b + dim_b] += jac_a.T @ jac_b
        for p in touching_priors:
            self._apply_prior(p, self.variables, index, H, b)

        nk = offset - _dim(self.variables[key])
        H_nn, H_nd = H[:nk, :nk], H[:nk, nk:]
        H_dd, b_d = H[nk:, nk:], b[nk:]
        b_n = b[:nk]
        if np.linalg.norm(H_dd) < 1e-300:
            lam = H_nn
            eta = b_n
        else:
            H_dd_inv = np.linalg.pinv(H_dd, hermitian=True)
            lam = H_nn - H_nd @ H_dd_inv @ H_nd.T
            eta = b_n - H_nd @ (H_dd_inv @ b_d)
        lam = 0.5 * (lam + lam.T)
        if neighbors and np.linalg.norm(lam) > 0:
            anchors = {k: self.variables[k] for k in neighbors}
            self.linear_priors.append(LinearPrior(list(neighbors), lam, eta, anchors))
