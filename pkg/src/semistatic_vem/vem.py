"""Per-frame variational EM pipeline.

One call to :func:`process_frame` predicts the new robot pose from odometry,
associates the observed point clusters with the object library, alternates
E-steps (landmark responsibilities and per-object Beta posteriors) with
M-steps (a robust factor-graph solve over the sliding window) and finally
updates the library: accepted objects are refreshed, inconsistent ones are
flagged and eventually removed, and unexplained clusters become new objects.
"""

from __future__ import annotations

import functools
import logging
import math
from collections.abc import Iterable
from dataclasses import dataclass, field, fields, replace
from typing import TextIO

import numpy as np

from .consistency import (
    BetaState,
    EStepWeights,
    MixtureParams,
    apply_pseudo_change,
    bernoulli_entropy,
    beta_accumulate,
    beta_entropy,
    expected_log_1mv,
    expected_log_beta_prior,
    expected_log_v,
    static_probability,
    update_change_magnitude,
)
from .factors import (
    MAX_MIXTURE,
    POINT_MIXTURE,
    WEIGHTED,
    FactorGraph,
    LMOptions,
    Problem,
    SolveReport,
    VariableSet,
    dump_graph,
    landmark_key,
    landmark_measurement_factor,
    landmark_prior_factor,
    object_key,
    odometry_factor,
    pose_key,
    pose_prior_factor,
    rigid_factor,
    solve_problem,
)
from .geom import (
    Point2,
    Pose2,
    apply_points,
    compose,
    inverse,
    rotation_error,
    translation_error,
)

log = logging.getLogger(__name__)

ACTIVE = "active"
PENDING = "rejected_pending"
REMOVED = "removed"
NEW_LANDMARK = -1

VARIANTS = ("full", "point_estimate", "no_max_mixture", "gate_by_E_pi")
_LANDMARK_MODEL = {
    "full": MAX_MIXTURE,
    "gate_by_E_pi": MAX_MIXTURE,
    "no_max_mixture": WEIGHTED,
    "point_estimate": POINT_MIXTURE,
}


class ConfigError(ValueError):
    """Raised with every validation problem of a configuration at once."""

    def __init__(self, problems: list[str]):
        self.problems = list(problems)
        super().__init__("invalid configuration:\n  " + "\n  ".join(self.problems))


# ---------------------------------------------------------------------------
# data types


@dataclass
class Observation:
    frame_id: int
    points_body: np.ndarray
    assoc_object: int | None = None
    assoc_landmark_indices: tuple[int, ...] | None = None

    def __post_init__(self) -> None:
        self.points_body = np.asarray(self.points_body, dtype=float).reshape(-1, 2)
        if self.assoc_landmark_indices is not None and \
                len(self.assoc_landmark_indices) != len(self.points_body):
            raise ValueError("one landmark index per observed point is required")


@dataclass
class ObjectModel:
    id: int
    class_label: int
    pose: Pose2
    template: list[Point2]
    landmarks_world: list[Point2]
    consistency: BetaState
    change_magnitude: float = 0.0
    status: str = ACTIVE
    created_frame: int = 0
    mean_responsibility: float = float("nan")

    def __post_init__(self) -> None:
        if len(self.template) != len(self.landmarks_world):
            raise ValueError("template and landmarks_world must have equal length")

    @classmethod
    def from_points(cls, obj_id: int, points_world, prior: BetaState, frame: int = 0,
                    class_label: int = 0) -> ObjectModel:
        """Object frame at the point centroid, axis-aligned with the world."""
        pts = np.asarray(points_world, dtype=float).reshape(-1, 2)
        c = pts.mean(axis=0)
        return cls(obj_id, class_label, Pose2(-c[0], -c[1], 0.0),
                   [Point2(*p) for p in pts - c], [Point2(*p) for p in pts], prior,
                   created_frame=frame)

    @property
    def centroid(self) -> np.ndarray:
        return np.mean(np.asarray(self.landmarks_world, dtype=float), axis=0)

    def add_landmark(self, world) -> int:
        self.landmarks_world.append(Point2(float(world[0]), float(world[1])))
        local = apply_points(self.pose, np.asarray(world, dtype=float))[0]
        self.template.append(Point2(*local))
        return len(self.landmarks_world) - 1


@dataclass
class VEMConfig:
    window: int = 8
    em_iters: int = 30
    elbo_tol: float = 1e-6
    theta_consist: float = 0.2
    alpha0: float = 1.0
    beta0: float = 1.0
    count_cap: float = 50.0
    pseudo_change: float = 4.0
    min_points: int = 3
    sigma_pose_xy: float = 0.05
    sigma_pose_theta: float = 0.02
    sigma_rigid: float = 0.01
    sigma_prior: float = 0.05
    sigma_keypt: float = 0.2
    e_max: float = 5.0
    init_sigma_xy: float = 0.2
    init_sigma_theta: float = 0.1
    change_rate: float = 0.5
    new_landmark_cost: float = 0.3
    fov_max_range: float = math.inf
    fov_half_angle: float = math.pi
    fov_margin: float = 0.3
    variant: str = "full"
    lm_max_iters: int = 20
    init_search: int = 6
    init_search_iters: int = 3

    def problems(self) -> list[str]:
        out = []
        positive = ("elbo_tol", "alpha0", "beta0", "count_cap", "pseudo_change", "sigma_pose_xy",
                    "sigma_pose_theta", "sigma_rigid", "sigma_prior", "sigma_keypt", "e_max",
                    "init_sigma_xy", "init_sigma_theta", "fov_max_range", "fov_half_angle")
        for name in positive:
            v = getattr(self, name)
            if not (isinstance(v, (int, float)) and v > 0.0):
                out.append(f"{name} must be positive, got {v!r}")
        if not (isinstance(self.init_search, int) and self.init_search >= 0):
            out.append("init_search must be an integer >= 0")
        for name in ("window", "em_iters", "min_points", "lm_max_iters", "init_search_iters"):
            v = getattr(self, name)
            if not (isinstance(v, int) and v >= 1):
                out.append(f"{name} must be an integer >= 1, got {v!r}")
        if not 0.0 < self.theta_consist < 1.0:
            out.append("theta_consist must lie in (0, 1)")
        if not 0.0 < self.change_rate <= 1.0:
            out.append("change_rate must lie in (0, 1]")
        if self.new_landmark_cost < 0.0:
            out.append("new_landmark_cost must be >= 0")
        if self.variant not in VARIANTS:
            out.append(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        return out

    def validate(self) -> VEMConfig:
        problems = self.problems()
        if problems:
            raise ConfigError(problems)
        return self

    @property
    def prior(self) -> BetaState:
        return BetaState(self.alpha0, self.beta0)

    @property
    def mixture(self) -> MixtureParams:
        return MixtureParams(self.sigma_keypt, self.e_max)

    @classmethod
    def from_dict(cls, d: dict) -> VEMConfig:
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError([f"unknown VEM option {k!r}" for k in unknown])
        return cls(**d).validate()


@dataclass
class Measurement:
    obj: int
    idx: int
    obs: tuple[float, float]
    w_static: float = 1.0


@dataclass
class WindowFrame:
    frame_id: int
    pose: Pose2
    odometry: Pose2 | None
    measurements: list[Measurement] = field(default_factory=list)


@dataclass
class EMIteration:
    frame_id: int
    em_iter: int
    elbo: float
    pose_error: float
    rot_error: float
    expected_v: dict[int, float]
    expected_pi: dict[int, float]
    solve: SolveReport
    mode_flips: int = 0


@dataclass
class FrameReport:
    frame_id: int
    iterations: list[EMIteration]
    accepted: list[int]
    rejected: list[int]
    removed: list[int]
    created: list[int]
    pseudo_changed: list[int]
    statuses: dict[int, str]


@dataclass
class PipelineState:
    config: VEMConfig
    object_library: dict[int, ObjectModel] = field(default_factory=dict)
    trajectory: dict[int, Pose2] = field(default_factory=dict)
    window_frames: list[WindowFrame] = field(default_factory=list)
    rng_seed: int = 0
    next_object_id: int = 1
    reports: list[FrameReport] = field(default_factory=list)
    last_solver: FrameSolver | None = None
    last_x: np.ndarray | None = None

    @property
    def window(self) -> VariableSet:
        vs = VariableSet()
        for wf in self.window_frames:
            vs.window_poses[wf.frame_id] = wf.pose
        if len(self.window_frames) > 1:
            vs.fixed.add(pose_key(self.window_frames[0].frame_id))
        return vs

    @property
    def frames_processed(self) -> int:
        return len(self.trajectory)


def initial_state(config: VEMConfig | None = None,
                  prior_objects: Iterable[ObjectModel] = (), rng_seed: int = 0) -> PipelineState:
    config = (config or VEMConfig()).validate()
    lib = {o.id: o for o in prior_objects}
    return PipelineState(config, lib, rng_seed=rng_seed,
                         next_object_id=max(lib, default=0) + 1)


# ---------------------------------------------------------------------------
# association


@dataclass
class AssociationResult:
    observations: list[Observation]
    proposals: list[int]


@functools.lru_cache(maxsize=64)
def _injections(k: int, n: int) -> np.ndarray:
    """All partial one-to-one maps of ``k`` points into ``n`` landmarks.

    Rows list a landmark index or ``NEW_LANDMARK`` per point, in
    lexicographic order with "new" last, which fixes tie-breaking.
    """
    rows: list[tuple[int, ...]] = []
    cur: list[int] = []

    def rec(i: int, used: int) -> None:
        if i == k:
            rows.append(tuple(cur))
            return
        for j in range(n):
            if not used >> j & 1:
                cur.append(j)
                rec(i + 1, used | 1 << j)
                cur.pop()
        cur.append(NEW_LANDMARK)
        rec(i + 1, used)
        cur.pop()

    rec(0, 0)
    out = np.array(rows, dtype=np.int64).reshape(-1, k)
    out.setflags(write=False)
    return out


def assign_points(points_world: np.ndarray, landmarks: np.ndarray, e_max: float,
                  new_cost: float) -> tuple[int, ...]:
    """Match observed points to an object's landmarks (or mark them new).

    Small problems are solved exactly over all partial one-to-one maps.  The
    score is the shape residual after removing the mean offset of the
    matched pairs, so a uniformly offset pose prediction does not break the
    correspondence, plus ``new_cost**2`` per unmatched point and a small
    raw-distance term that separates otherwise equal candidates.  Larger
    problems fall back to gated greedy nearest neighbour.
    """
    P = np.asarray(points_world, dtype=float).reshape(-1, 2)
    L = np.asarray(landmarks, dtype=float).reshape(-1, 2)
    k, n = len(P), len(L)
    if k == 0:
        return ()
    if n == 0:
        return (NEW_LANDMARK,) * k
    diff = P[:, None, :] - L[None, :, :]
    dist = np.linalg.norm(diff, axis=2)
    if k > 5 or n > 8:
        out = [NEW_LANDMARK] * k
        used = set()
        for d, i, j in sorted((dist[i, j], i, j) for i in range(k) for j in range(n)):
            if d <= e_max and out[i] == NEW_LANDMARK and j not in used:
                out[i] = j
                used.add(j)
        return tuple(out)

    A = _injections(k, n)
    matched = A >= 0
    cols = np.where(matched, A, 0)
    rows = np.arange(k)
    D = diff[rows, cols] * matched[..., None]
    m = matched.sum(axis=1)
    S = D.sum(axis=1)
    sumsq = np.einsum("nkd,nkd->n", D, D)
    aligned = sumsq - np.einsum("nd,nd->n", S, S) / np.maximum(m, 1)
    cost = aligned + 0.01 * sumsq + (k - m) * new_cost * new_cost
    gated = np.any(matched & (dist[rows, cols] > e_max), axis=1)
    cost[gated] = np.inf
    return tuple(int(v) for v in A[int(np.argmin(cost))])


def associate(obs: list[Observation], lib: dict[int, ObjectModel], predicted_pose: Pose2,
              e_max: float, new_landmark_cost: float = 0.3) -> AssociationResult:
    """Greedy gated nearest-centroid association of clusters to objects."""
    candidates = [o for o in lib.values() if o.status != REMOVED and o.landmarks_world]
    worlds = [apply_points(predicted_pose, o.points_body) for o in obs]
    pairs = []
    for i, pw in enumerate(worlds):
        if len(pw) == 0:
            continue
        c = pw.mean(axis=0)
        for o in candidates:
            d = float(np.linalg.norm(c - o.centroid))
            if d <= e_max:
                pairs.append((d, i, o.id))
    pairs.sort()
    matched: dict[int, int] = {}
    taken: set[int] = set()
    for _, i, oid in pairs:
        if i in matched or oid in taken:
            continue
        matched[i] = oid
        taken.add(oid)
    out, proposals = [], []
    for i, ob in enumerate(obs):
        if i in matched:
            o = lib[matched[i]]
            idx = assign_points(worlds[i], np.asarray(o.landmarks_world), e_max, new_landmark_cost)
            out.append(replace(ob, assoc_object=o.id, assoc_landmark_indices=idx))
        else:
            out.append(replace(ob, assoc_object=None, assoc_landmark_indices=None))
            proposals.append(i)
    return AssociationResult(out, proposals)


# ---------------------------------------------------------------------------
# per-frame EM


class FrameSolver:
    """Factor graph over the current window plus per-object posteriors."""

    def __init__(self, state: PipelineState, pose_prior: tuple[Pose2, float, float] | None):
        cfg = state.config
        self.config = cfg
        self.variant = cfg.variant
        lib = state.object_library
        frames = state.window_frames
        self.frame_id = frames[-1].frame_id

        vs = VariableSet()
        for wf in frames:
            vs.window_poses[wf.frame_id] = wf.pose
        involved = sorted({m.obj for wf in frames for m in wf.measurements
                           if lib[m.obj].status != REMOVED})
        for oid in involved:
            o = lib[oid]
            vs.object_poses[oid] = o.pose
            for j, lw in enumerate(o.landmarks_world):
                vs.landmark_positions[(oid, j)] = lw
        if pose_prior is None:
            vs.fixed.add(pose_key(frames[0].frame_id))
        graph = FactorGraph(vs, [], _LANDMARK_MODEL[cfg.variant])
        for prev, cur in zip(frames, frames[1:]):
            graph.add(odometry_factor(prev.frame_id, cur.frame_id, cur.odometry,
                                      cfg.sigma_pose_xy, cfg.sigma_pose_theta))
        if pose_prior is not None:
            p, sxy, sth = pose_prior
            graph.add(pose_prior_factor(frames[0].frame_id, p, sxy, sth))
        for oid in involved:
            o = lib[oid]
            for j, (t, lw) in enumerate(zip(o.template, o.landmarks_world)):
                graph.add(rigid_factor(oid, j, t, cfg.sigma_rigid))
                graph.add(landmark_prior_factor(oid, j, lw, cfg.sigma_prior))
        mix = cfg.mixture
        cur_pos, factor_obj = [], []
        for wf in frames:
            current = wf is frames[-1]
            for m in wf.measurements:
                if m.obj not in vs.object_poses:
                    continue
                if current:
                    cur_pos.append(len(factor_obj))
                factor_obj.append(m.obj)
                graph.add(landmark_measurement_factor(
                    wf.frame_id, m.obj, m.idx, m.obs, mix,
                    weights=EStepWeights(m.w_static, 1.0 - m.w_static)))
        self.graph = graph
        self.problem = Problem(graph)
        self.cur = np.array(cur_pos, dtype=np.int64)
        # Objects observed in the current frame carry a variational q(v).
        self.obj_ids = sorted({factor_obj[k] for k in cur_pos})
        index = {oid: i for i, oid in enumerate(self.obj_ids)}
        self.cur_obj = np.array([index[factor_obj[k]] for k in cur_pos], dtype=np.int64)
        self.factor_obj = factor_obj
        self.prior = [lib[oid].consistency for oid in self.obj_ids]
        self.library_mean = {oid: lib[oid].consistency.mean for oid in involved}
        self.q = list(self.prior)
        self.w = np.array([self.problem.w_static[k] for k in cur_pos], dtype=float)
        self.pose_offset = self.problem.offsets[pose_key(self.frame_id)]
        self._refresh_gates()

    # -- E-step -------------------------------------------------------------

    def _mode_log_priors(self) -> tuple[np.ndarray, np.ndarray]:
        if self.variant == "point_estimate":
            m = np.array([s.mean for s in self.q])
            return np.log(m), np.log1p(-m)
        ls = np.array([expected_log_v(s) for s in self.q])
        lc = np.array([expected_log_1mv(s) for s in self.q])
        return ls, lc

    def e_step(self, x: np.ndarray) -> np.ndarray:
        """Refresh landmark responsibilities, then each object's q(v)."""
        if len(self.cur) == 0:
            return self.w
        E = self.problem.landmark_residuals(x)[self.cur]
        sq = np.einsum("ki,ki->k", E, E)
        ls, lc = self._mode_log_priors()
        self.w = static_probability(sq, self.config.mixture, ls[self.cur_obj], lc[self.cur_obj])
        n = len(self.obj_ids)
        ws = np.bincount(self.cur_obj, self.w, n)
        wc = np.bincount(self.cur_obj, 1.0 - self.w, n)
        self.q = [BetaState(p.alpha + a, p.beta_ + b) for p, a, b in zip(self.prior, ws, wc)]
        self.problem.w_static[self.cur] = self.w
        self.problem.w_changed[self.cur] = 1.0 - self.w
        self._refresh_gates()
        return self.w

    def _refresh_gates(self) -> None:
        p = self.problem
        if len(self.factor_obj) == 0:
            return
        means = dict(self.library_mean)
        means.update({oid: s.mean for oid, s in zip(self.obj_ids, self.q)})
        if self.variant == "gate_by_E_pi":
            gate = p.w_static.copy()
        else:
            gate = np.array([means[o] for o in self.factor_obj])
        p.gate[:] = np.clip(gate, 1e-300, 1.0 - 1e-16)

    # -- M-step -------------------------------------------------------------

    def lm_options(self) -> LMOptions:
        kind = "surrogate" if self.variant == "point_estimate" else "elbo"
        return LMOptions(max_iters=self.config.lm_max_iters, objective=kind)

    def m_step(self, x: np.ndarray) -> tuple[np.ndarray, SolveReport]:
        """Max-mixture guided solve, polished on the exact bound.

        Max-mixture search directions ignore changed-mode landmarks, so their
        fixed point is not a stationary point of the bound while those
        landmarks keep a small static responsibility.  A second solve with
        every landmark weighted by its responsibility finishes the ascent;
        both solves only accept steps that do not lower the bound.
        """
        opts = self.lm_options()
        x, report = solve_problem(self.problem, x, opts)
        if self.problem.landmark_model != MAX_MIXTURE or opts.objective != "elbo":
            return x, report
        self.problem.landmark_model = WEIGHTED
        try:
            x, polish = solve_problem(self.problem, x, opts)
        finally:
            self.problem.landmark_model = MAX_MIXTURE
        report.iterations += polish.iterations
        report.final_cost = polish.final_cost
        report.cost_trace.extend(polish.cost_trace[1:])
        report.converged = polish.converged
        report.status = polish.status
        return x, report

    # -- bound --------------------------------------------------------------

    def elbo(self, x: np.ndarray) -> float:
        """Mean-field bound at ``x`` for the current responsibilities and q(v)."""
        F = -self.problem.objective(x, kind="elbo")
        if len(self.cur):
            ls = np.array([expected_log_v(s) for s in self.q])
            lc = np.array([expected_log_1mv(s) for s in self.q])
            w = self.w
            F += float(np.sum(w * ls[self.cur_obj] + (1.0 - w) * lc[self.cur_obj]))
            F += sum(bernoulli_entropy(v) for v in w)
        for q, p in zip(self.q, self.prior):
            F += expected_log_beta_prior(q, p) + beta_entropy(q)
        return F

    def bound_at(self, x: np.ndarray, max_iters: int = 500, tol: float = 1e-12) -> float:
        """Bound at ``x`` maximized over responsibilities and q(v).

        Solver state (weights, q, gates) is restored afterwards.
        """
        saved = (self.w.copy(), list(self.q), self.problem.w_static.copy(),
                 self.problem.w_changed.copy(), self.problem.gate.copy(), self.variant)
        self.variant = "full" if self.variant == "point_estimate" else self.variant
        try:
            self.q = list(self.prior)
            prev = -math.inf
            F = prev
            for _ in range(max_iters):
                self.e_step(x)
                F = self.elbo(x)
                if abs(F - prev) <= tol * (1.0 + abs(F)):
                    break
                prev = F
            return F
        finally:
            (self.w, self.q, ws, wc, gate, self.variant) = saved
            self.problem.w_static[:] = ws
            self.problem.w_changed[:] = wc
            self.problem.gate[:] = gate

    # -- accessors ----------------------------------------------------------

    def pose(self, x: np.ndarray) -> Pose2:
        o = self.pose_offset
        return Pose2(x[o], x[o + 1], x[o + 2])

    def with_pose(self, x: np.ndarray, pose: Pose2) -> np.ndarray:
        out = x.copy()
        out[self.pose_offset:self.pose_offset + 3] = pose.to_array()
        return out

    def expected_v(self) -> dict[int, float]:
        return {oid: s.mean for oid, s in zip(self.obj_ids, self.q)}

    def expected_pi(self) -> dict[int, float]:
        out = {}
        for i, oid in enumerate(self.obj_ids):
            sel = self.cur_obj == i
            out[oid] = float(np.mean(self.w[sel])) if sel.any() else float("nan")
        return out

    def accepted(self, x: np.ndarray) -> dict[int, bool]:
        """Per-object max-mixture verdict on the current frame's landmarks."""
        if len(self.cur) == 0:
            return {}
        E = self.problem.landmark_residuals(x)
        static = self.problem.static_mask(E)[self.cur]
        return {oid: bool(np.mean(static[self.cur_obj == i]) >= 0.5)
                for i, oid in enumerate(self.obj_ids)}


def e_step(solver: FrameSolver, x: np.ndarray) -> list[EStepWeights]:
    w = solver.e_step(x)
    return [EStepWeights(float(v), float(1.0 - v)) for v in w]


def m_step(solver: FrameSolver, x: np.ndarray) -> tuple[VariableSet, SolveReport, np.ndarray]:
    x_new, report = solver.m_step(x)
    return solver.problem.to_variables(x_new), report, x_new


def run_vem(solver: FrameSolver, n_iters: int, gt_pose: Pose2 | None = None,
            elbo_tol: float = 1e-6, dump: TextIO | None = None,
            x0: np.ndarray | None = None) -> tuple[np.ndarray, list[EMIteration]]:
    """Alternate E- and M-steps until ``n_iters`` or the bound stalls."""
    if n_iters < 1:
        raise ValueError("n_iters must be >= 1")
    x = (solver.problem.x0 if x0 is None else np.asarray(x0, dtype=float)).copy()
    trace: list[EMIteration] = []
    prev = None
    modes = None
    problem = solver.problem
    for it in range(1, n_iters + 1):
        solver.e_step(x)
        # Decisions revised by the refreshed gates count as flips too.
        start = problem.static_mask(problem.landmark_residuals(x))
        flips = 0 if modes is None else int(np.count_nonzero(start != modes))
        x, report = solver.m_step(x)
        modes = problem.static_mask(problem.landmark_residuals(x))
        flips += report.mode_flips
        F = solver.elbo(x)
        pose = solver.pose(x)
        te = translation_error(pose, gt_pose) if gt_pose is not None else float("nan")
        re = rotation_error(pose, gt_pose) if gt_pose is not None else float("nan")
        trace.append(EMIteration(solver.frame_id, it, F, te, re, solver.expected_v(),
                                 solver.expected_pi(), report, flips))
        if dump is not None:
            dump_graph(solver.graph, dump, it, solver.problem.to_variables(x))
        if prev is not None and abs(F - prev) < elbo_tol:
            break
        prev = F
    return x, trace


# ---------------------------------------------------------------------------
# library update and frame loop


def _in_view(config: VEMConfig, pose: Pose2, pts_world) -> bool:
    body = apply_points(inverse(pose), np.asarray(pts_world, dtype=float))
    r = np.hypot(body[:, 0], body[:, 1])
    b = np.abs(np.arctan2(body[:, 1], body[:, 0]))
    margin_angle = config.fov_margin / np.maximum(r, 1e-9)
    ok = (r <= config.fov_max_range - config.fov_margin) & \
        ((config.fov_half_angle >= math.pi) | (b <= config.fov_half_angle - margin_angle))
    return bool(ok.any())


def _set_status(o: ObjectModel, theta: float) -> None:
    if o.consistency.mean < theta:
        o.status = REMOVED if o.status == PENDING else PENDING
    else:
        o.status = ACTIVE


def update_object_library(state: PipelineState, solver: FrameSolver, x: np.ndarray,
                          assoc: AssociationResult) -> FrameReport:
    cfg = state.config
    lib = state.object_library
    current = state.window_frames[-1]
    pose = solver.pose(x)
    verdict = solver.accepted(x)
    E = solver.problem.landmark_residuals(x)[solver.cur] if len(solver.cur) else np.zeros((0, 2))
    accepted, rejected, removed, created, pseudo = [], [], [], [], []

    for i, oid in enumerate(solver.obj_ids):
        o = lib[oid]
        sel = solver.cur_obj == i
        w = solver.w[sel]
        o.consistency = beta_accumulate(solver.prior[i], float(w.sum()),
                                        float((1.0 - w).sum()), cfg.count_cap)
        o.mean_responsibility = float(w.mean())
        if verdict[oid]:
            accepted.append(oid)
            o.pose = Pose2(*solver.problem.variable(x, object_key(oid)))
            o.landmarks_world = [Point2(*solver.problem.variable(x, landmark_key(oid, j)))
                                 for j in range(len(o.landmarks_world))]
            o.change_magnitude = update_change_magnitude(
                o.change_magnitude, float(np.mean(np.linalg.norm(E[sel], axis=1))),
                cfg.change_rate)
        else:
            rejected.append(oid)

    # Integrate points that had no landmark yet, for accepted objects only.
    for ob in assoc.observations:
        if ob.assoc_object is None or ob.assoc_object not in accepted:
            continue
        o = lib[ob.assoc_object]
        world = apply_points(pose, ob.points_body)
        for p, d, idx in zip(world, ob.points_body, ob.assoc_landmark_indices):
            if idx == NEW_LANDMARK:
                j = o.add_landmark(p)
                current.measurements.append(Measurement(o.id, j, (float(d[0]), float(d[1]))))

    observed = {ob.assoc_object for ob in assoc.observations if ob.assoc_object is not None}
    for oid in sorted(lib):
        o = lib[oid]
        if o.status == REMOVED or oid in observed:
            continue
        if _in_view(cfg, pose, o.landmarks_world):
            o.consistency = apply_pseudo_change(o.consistency, cfg.pseudo_change, cfg.count_cap)
            pseudo.append(oid)
            _set_status(o, cfg.theta_consist)
            if o.status == REMOVED:
                removed.append(oid)

    relocalize = []
    for oid in solver.obj_ids:
        o = lib[oid]
        _set_status(o, cfg.theta_consist)
        if o.status == REMOVED:
            removed.append(oid)
            relocalize.append(oid)

    if removed:
        gone = set(removed)
        for wf in state.window_frames:
            wf.measurements = [m for m in wf.measurements if m.obj not in gone]

    # New objects: unexplained clusters and clusters of objects just removed.
    sources = [assoc.observations[i] for i in assoc.proposals]
    sources += [ob for ob in assoc.observations if ob.assoc_object in relocalize]
    for ob in sources:
        if len(ob.points_body) < cfg.min_points:
            continue
        oid = state.next_object_id
        state.next_object_id += 1
        cls = lib[ob.assoc_object].class_label if ob.assoc_object is not None else 0
        o = ObjectModel.from_points(oid, apply_points(pose, ob.points_body), cfg.prior,
                                    current.frame_id, cls)
        lib[oid] = o
        created.append(oid)
        for j, p in enumerate(ob.points_body):
            current.measurements.append(Measurement(oid, j, (float(p[0]), float(p[1])), 1.0))

    return FrameReport(current.frame_id, [], accepted, rejected, removed, created, pseudo,
                       {oid: o.status for oid, o in lib.items()})


def predict_pose(state: PipelineState, odometry: Pose2, init_pose: Pose2 | None) -> Pose2:
    if not state.trajectory:
        return init_pose if init_pose is not None else Pose2.identity()
    last = state.window_frames[-1].pose if state.window_frames else \
        state.trajectory[max(state.trajectory)]
    return compose(last, odometry)


def _window_frame(frame, pose: Pose2, odometry: Pose2 | None,
                  assoc: AssociationResult) -> WindowFrame:
    wf = WindowFrame(frame.frame_id, pose, odometry)
    for ob in assoc.observations:
        if ob.assoc_object is None:
            continue
        for p, idx in zip(ob.points_body, ob.assoc_landmark_indices):
            if idx != NEW_LANDMARK:
                wf.measurements.append(Measurement(ob.assoc_object, idx, (float(p[0]), float(p[1]))))
    return wf


def relocalize(state: PipelineState, frame, pose_prior: tuple[Pose2, float, float]) -> Pose2:
    """Starting pose for the first frame against a prior map.

    A local EM run cannot recover from a heading error that pushes every
    landmark out of the static basin (or breaks association), so headings
    spanning three prior standard deviations are each associated and given
    a short EM run.  Points left without a landmark are scored as outliers
    so that hypotheses with different associations stay comparable.  Ties
    keep the hypothesis closest to the prior.
    """
    cfg = state.config
    base, _, sth = pose_prior
    step = 3.0 * sth / cfg.init_search
    order = sorted(range(-cfg.init_search, cfg.init_search + 1), key=lambda k: (abs(k), k))
    saved = state.window_frames
    best_F, best_pose = -math.inf, base
    try:
        for k in order:
            cand = Pose2(base.x, base.y, base.theta + k * step)
            assoc = associate(list(frame.observations), state.object_library, cand, cfg.e_max,
                              cfg.new_landmark_cost)
            wf = _window_frame(frame, cand, None, assoc)
            n_points = sum(len(ob.points_body) for ob in assoc.observations)
            state.window_frames = [wf]
            solver = FrameSolver(state, pose_prior)
            x, _ = run_vem(solver, cfg.init_search_iters, None, 0.0)
            F = solver.bound_at(x) - (n_points - len(wf.measurements)) * math.log(cfg.e_max)
            if F > best_F + 1e-9:
                best_F, best_pose = F, solver.pose(x)
    finally:
        state.window_frames = saved
    log.debug("relocalization: bound %.6g at %s", best_F, best_pose)
    return best_pose


def process_frame(state: PipelineState, frame, dump: TextIO | None = None) -> PipelineState:
    """Run the whole per-frame pipeline; ``frame`` is a ``sim.FrameData``.

    The ground-truth pose carried by ``frame`` is only used for the error
    columns of the iteration trace.
    """
    cfg = state.config
    first = not state.trajectory
    predicted = predict_pose(state, frame.odometry_meas, getattr(frame, "init_pose", None))
    start = predicted
    if first and state.object_library and cfg.init_search > 0:
        start = relocalize(state, frame, (predicted, cfg.init_sigma_xy, cfg.init_sigma_theta))
    assoc = associate(list(frame.observations), state.object_library, start, cfg.e_max,
                      cfg.new_landmark_cost)
    wf = _window_frame(frame, start, None if first else frame.odometry_meas, assoc)
    state.window_frames.append(wf)
    if len(state.window_frames) > cfg.window:
        del state.window_frames[:len(state.window_frames) - cfg.window]

    pose_prior = None
    if len(state.window_frames) == 1:
        if first and state.object_library:
            pose_prior = (predicted, cfg.init_sigma_xy, cfg.init_sigma_theta)
        elif not first:
            pose_prior = (predicted, cfg.sigma_pose_xy, cfg.sigma_pose_theta)
    solver = FrameSolver(state, pose_prior)
    x, trace = run_vem(solver, cfg.em_iters, frame.gt_pose, cfg.elbo_tol, dump)

    for wfk in state.window_frames:
        wfk.pose = Pose2(*solver.problem.variable(x, pose_key(wfk.frame_id)))
        state.trajectory[wfk.frame_id] = wfk.pose
    for k, m in zip(solver.cur, [m for m in wf.measurements if m.obj in solver.library_mean]):
        m.w_static = float(solver.problem.w_static[k])
    report = update_object_library(state, solver, x, assoc)
    report.iterations = trace
    state.reports.append(report)
    log.info("frame %d: %d EM iters, accepted=%s rejected=%s removed=%s new=%s",
             frame.frame_id, len(trace), report.accepted, report.rejected, report.removed,
             report.created)
    state.last_solver = solver
    state.last_x = x
    return state
