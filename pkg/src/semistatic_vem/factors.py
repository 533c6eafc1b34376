"""Factor graph construction and Levenberg-Marquardt optimization.

Conventions
-----------
* Robot poses are stored as the robot's pose in the world (robot -> world),
  so a body-frame observation ``d`` lands in the world at ``apply(T, d)``.
* Object poses are stored world -> object, so ``apply(T_ow, l_w)`` gives the
  landmark in the object frame.
* Every variable is updated with the additive retraction of
  :func:`semistatic_vem.geom.retract`; Jacobians are taken with respect to
  those additive parameters.

Per-factor functions (``*_residual``, :func:`jacobians`, :func:`factor_cost`)
are plain scalar code.  The solver works on a compiled :class:`Problem` whose
hot loops live in :mod:`semistatic_vem.kernels`.
"""

from __future__ import annotations

import logging
import math
from collections.abc import Hashable, Iterable
from dataclasses import dataclass, field
from typing import TextIO

import numpy as np

from . import kernels
from .consistency import (
    BetaState,
    EStepWeights,
    MixtureParams,
    gaussian_log_density,
    uniform_log_density,
)
from .geom import Point2, Pose2, normalize_angle, wrap_angles

log = logging.getLogger(__name__)

ODOMETRY = "odometry"
POSE_PRIOR = "pose_prior"
RIGID = "rigid"
LANDMARK_PRIOR = "landmark_prior"
LANDMARK_MEASUREMENT = "landmark_measurement"
FACTOR_KINDS = (ODOMETRY, POSE_PRIOR, RIGID, LANDMARK_PRIOR, LANDMARK_MEASUREMENT)

STATIC = "static"
CHANGED = "changed"

# How landmark measurement factors drive the search direction.
MAX_MIXTURE = "max_mixture"
WEIGHTED = "weighted"
POINT_MIXTURE = "point_mixture"
LANDMARK_MODELS = (MAX_MIXTURE, WEIGHTED, POINT_MIXTURE)


class MissingVariableError(KeyError):
    pass


def pose_key(frame: int) -> tuple:
    return ("pose", frame)


def object_key(obj: int) -> tuple:
    return ("obj", obj)


def landmark_key(obj: int, idx: int) -> tuple:
    return ("lm", obj, idx)


# ---------------------------------------------------------------------------
# residuals


def _rot(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


def _rot_s(theta: float, v) -> np.ndarray:
    """``R(theta) @ S @ v``: derivative of ``R(theta) v`` w.r.t. theta."""
    c, s = math.cos(theta), math.sin(theta)
    return np.array([-c * v[1] - s * v[0], -s * v[1] + c * v[0]])


def odometry_residual(prev: Pose2, curr: Pose2, meas: Pose2) -> np.ndarray:
    """Deviation of the measured relative motion from the estimated one.

    Returns ``(dx, dy, dtheta)`` of ``inverse(between(prev, curr)) o meas``.
    """
    ux, uy = curr.x - prev.x, curr.y - prev.y
    a = prev.theta - curr.theta
    rt = _rot(a) @ [meas.x, meas.y] - _rot(-curr.theta) @ [ux, uy]
    return np.array([rt[0], rt[1], normalize_angle(meas.theta - curr.theta + prev.theta)])


def pose_prior_residual(pose: Pose2, prior: Pose2) -> np.ndarray:
    return np.array([pose.x - prior.x, pose.y - prior.y, normalize_angle(pose.theta - prior.theta)])


def rigid_residual(object_pose: Pose2, landmark_world, template) -> np.ndarray:
    """Landmark expressed in the object frame minus its template position."""
    lw = np.asarray(landmark_world, dtype=float)
    return _rot(object_pose.theta) @ lw + [object_pose.x, object_pose.y] - np.asarray(template, float)


def landmark_prior_residual(landmark_world, previous) -> np.ndarray:
    return np.asarray(landmark_world, dtype=float) - np.asarray(previous, dtype=float)


def landmark_measurement_residual(robot_pose: Pose2, landmark_world, obs_body) -> np.ndarray:
    """Observation mapped into the world minus the mapped landmark position."""
    d = np.asarray(obs_body, dtype=float)
    return _rot(robot_pose.theta) @ d + [robot_pose.x, robot_pose.y] - np.asarray(landmark_world, float)


def max_mixture_select(residual, s: BetaState | float, p: MixtureParams) -> str:
    """Pick the mode with the larger prior-weighted likelihood; ties go to static.

    ``s`` is either a Beta state (its mean gates the decision) or a bare
    probability of the static mode.
    """
    prob = s.mean if isinstance(s, BetaState) else float(s)
    if prob <= 0.0:
        return CHANGED
    if prob >= 1.0:
        return STATIC
    log_static = math.log(prob) + gaussian_log_density(residual, p)
    log_changed = math.log1p(-prob) + uniform_log_density(p)
    return STATIC if log_static >= log_changed else CHANGED


# ---------------------------------------------------------------------------
# factors and variables


@dataclass
class Factor:
    kind: str
    keys: tuple
    data: tuple
    sigma: tuple = ()
    mixture: MixtureParams | None = None
    consistency: BetaState | None = None
    weights: EStepWeights | None = None
    gate: float | None = None

    def __post_init__(self) -> None:
        if self.kind not in FACTOR_KINDS:
            raise ValueError(f"unknown factor kind {self.kind!r}")
        if self.kind == LANDMARK_MEASUREMENT:
            if self.mixture is None:
                raise ValueError("landmark measurement factors need mixture parameters")
            if self.weights is None:
                self.weights = EStepWeights(1.0, 0.0)
            if abs(self.weights.w_static + self.weights.w_changed - 1.0) > 1e-9:
                raise ValueError("mixture weights must sum to one")
        elif any(not s > 0.0 for s in self.sigma) or not self.sigma:
            raise ValueError(f"{self.kind} factor needs positive noise sigmas")

    @property
    def gate_probability(self) -> float:
        if self.gate is not None:
            return self.gate
        if self.consistency is not None:
            return self.consistency.mean
        return 1.0


def odometry_factor(prev_frame: int, curr_frame: int, meas: Pose2, sigma_xy: float,
                    sigma_theta: float) -> Factor:
    return Factor(ODOMETRY, (pose_key(prev_frame), pose_key(curr_frame)), tuple(meas.to_array()),
                  (sigma_xy, sigma_xy, sigma_theta))


def pose_prior_factor(frame: int, prior: Pose2, sigma_xy: float, sigma_theta: float) -> Factor:
    return Factor(POSE_PRIOR, (pose_key(frame),), tuple(prior.to_array()),
                  (sigma_xy, sigma_xy, sigma_theta))


def rigid_factor(obj: int, idx: int, template, sigma: float) -> Factor:
    return Factor(RIGID, (object_key(obj), landmark_key(obj, idx)), tuple(map(float, template)),
                  (sigma, sigma))


def landmark_prior_factor(obj: int, idx: int, previous, sigma: float) -> Factor:
    return Factor(LANDMARK_PRIOR, (landmark_key(obj, idx),), tuple(map(float, previous)),
                  (sigma, sigma))


def landmark_measurement_factor(frame: int, obj: int, idx: int, obs_body, mixture: MixtureParams,
                                consistency: BetaState | None = None,
                                weights: EStepWeights | None = None,
                                gate: float | None = None) -> Factor:
    return Factor(LANDMARK_MEASUREMENT, (pose_key(frame), landmark_key(obj, idx)),
                  tuple(map(float, obs_body)), (mixture.sigma, mixture.sigma), mixture,
                  consistency, weights, gate)


@dataclass
class VariableSet:
    window_poses: dict[int, Pose2] = field(default_factory=dict)
    landmark_positions: dict[tuple[int, int], Point2] = field(default_factory=dict)
    object_poses: dict[int, Pose2] = field(default_factory=dict)
    fixed: set = field(default_factory=set)

    def get(self, key: tuple):
        try:
            if key[0] == "pose":
                return self.window_poses[key[1]]
            if key[0] == "obj":
                return self.object_poses[key[1]]
            if key[0] == "lm":
                return self.landmark_positions[(key[1], key[2])]
        except KeyError:
            raise MissingVariableError(key) from None
        raise MissingVariableError(key)

    def set(self, key: tuple, value) -> None:
        if key[0] == "pose":
            self.window_poses[key[1]] = value
        elif key[0] == "obj":
            self.object_poses[key[1]] = value
        elif key[0] == "lm":
            self.landmark_positions[(key[1], key[2])] = Point2(float(value[0]), float(value[1]))
        else:
            raise MissingVariableError(key)

    def keys(self) -> list[tuple]:
        out = [pose_key(f) for f in self.window_poses]
        out += [object_key(o) for o in sorted(self.object_poses)]
        out += [landmark_key(*k) for k in sorted(self.landmark_positions)]
        return out

    def copy(self) -> VariableSet:
        return VariableSet(dict(self.window_poses), dict(self.landmark_positions),
                           dict(self.object_poses), set(self.fixed))


def factor_residual(f: Factor, vars: VariableSet) -> np.ndarray:
    vals = [vars.get(k) for k in f.keys]
    if f.kind == ODOMETRY:
        return odometry_residual(vals[0], vals[1], Pose2.from_array(f.data))
    if f.kind == POSE_PRIOR:
        return pose_prior_residual(vals[0], Pose2.from_array(f.data))
    if f.kind == RIGID:
        return rigid_residual(vals[0], vals[1], f.data)
    if f.kind == LANDMARK_PRIOR:
        return landmark_prior_residual(vals[0], f.data)
    return landmark_measurement_residual(vals[0], vals[1], f.data)


def factor_mode(f: Factor, vars: VariableSet) -> str | None:
    if f.kind != LANDMARK_MEASUREMENT:
        return None
    return max_mixture_select(factor_residual(f, vars), f.gate_probability, f.mixture)


def factor_cost(f: Factor, vars: VariableSet) -> float:
    """Negative log-likelihood contribution with constants dropped.

    Landmark measurement factors use the max-mixture form: the weighted
    Gaussian term when the static mode is selected, otherwise the constant
    ``w_changed * log(e_max)``.
    """
    e = factor_residual(f, vars)
    if f.kind != LANDMARK_MEASUREMENT:
        return 0.5 * float(np.sum((e / np.asarray(f.sigma)) ** 2))
    if max_mixture_select(e, f.gate_probability, f.mixture) == STATIC:
        return f.weights.w_static * float(e @ e) / (2.0 * f.mixture.sigma**2)
    return f.weights.w_changed * math.log(f.mixture.e_max)


def jacobians(f: Factor, vars: VariableSet) -> dict[tuple, np.ndarray]:
    """Analytic Jacobians of the (unwhitened) residual per involved variable.

    A landmark measurement factor in the changed mode has zero blocks.
    """
    vals = [vars.get(k) for k in f.keys]
    if f.kind == ODOMETRY:
        prev, curr = vals
        m = f.data
        u = (curr.x - prev.x, curr.y - prev.y)
        Rm2 = _rot(-curr.theta)
        ram = _rot_s(prev.theta - curr.theta, m[:2])
        Jp = np.zeros((3, 3))
        Jc = np.zeros((3, 3))
        Jp[:2, :2] = Rm2
        Jp[:2, 2] = ram
        Jp[2, 2] = 1.0
        Jc[:2, :2] = -Rm2
        Jc[:2, 2] = -ram + _rot_s(-curr.theta, u)
        Jc[2, 2] = -1.0
        return {f.keys[0]: Jp, f.keys[1]: Jc}
    if f.kind == POSE_PRIOR:
        return {f.keys[0]: np.eye(3)}
    if f.kind == RIGID:
        q, lw = vals
        Jq = np.zeros((2, 3))
        Jq[:, :2] = np.eye(2)
        Jq[:, 2] = _rot_s(q.theta, lw)
        return {f.keys[0]: Jq, f.keys[1]: _rot(q.theta)}
    if f.kind == LANDMARK_PRIOR:
        return {f.keys[0]: np.eye(2)}
    pose, lw = vals
    if factor_mode(f, vars) == CHANGED:
        return {f.keys[0]: np.zeros((2, 3)), f.keys[1]: np.zeros((2, 2))}
    Jp = np.zeros((2, 3))
    Jp[:, :2] = np.eye(2)
    Jp[:, 2] = _rot_s(pose.theta, f.data)
    return {f.keys[0]: Jp, f.keys[1]: -np.eye(2)}


@dataclass
class FactorGraph:
    variables: VariableSet
    factors: list[Factor] = field(default_factory=list)
    landmark_model: str = MAX_MIXTURE

    def add(self, factor: Factor) -> None:
        self.factors.append(factor)

    def extend(self, factors: Iterable[Factor]) -> None:
        self.factors.extend(factors)

    def cost(self, vars: VariableSet | None = None) -> float:
        vars = self.variables if vars is None else vars
        return sum(factor_cost(f, vars) for f in self.factors)

    def validate(self) -> None:
        for f in self.factors:
            for k in f.keys:
                self.variables.get(k)


# ---------------------------------------------------------------------------
# compiled problem


def _arr(rows, width) -> np.ndarray:
    return np.ascontiguousarray(np.array(rows, dtype=float).reshape(-1, width))


def _idx(rows) -> np.ndarray:
    return np.ascontiguousarray(np.array(rows, dtype=np.int64))


class Problem:
    """Array form of a factor graph: flat state vector plus per-kind tables.

    Landmark measurement weights (``w_static``, ``w_changed``) and gating
    probabilities (``gate``) are plain arrays so the EM loop can refresh them
    without rebuilding the problem.
    """

    def __init__(self, graph: FactorGraph):
        graph.validate()
        if graph.landmark_model not in LANDMARK_MODELS:
            raise ValueError(f"unknown landmark model {graph.landmark_model!r}")
        self.graph = graph
        self.landmark_model = graph.landmark_model
        vars = graph.variables
        self.keys = vars.keys()
        self.offsets: dict[Hashable, int] = {}
        x, angles, free = [], [], []
        for key in self.keys:
            self.offsets[key] = len(x)
            val = vars.get(key)
            if key[0] == "lm":
                x.extend(val)
                angles.extend([False, False])
                n = 2
            else:
                x.extend((val.x, val.y, val.theta))
                angles.extend([False, False, True])
                n = 3
            free.extend([key not in vars.fixed] * n)
        self.x0 = np.array(x, dtype=float)
        self.n = len(x)
        self.angle_mask = np.array(angles, dtype=bool)
        self.free = np.array(free, dtype=bool)

        off = self.offsets
        odo, pp, rg, lp, lm = [], [], [], [], []
        self.landmark_factors: list[Factor] = []
        for f in graph.factors:
            if f.kind == ODOMETRY:
                odo.append(f)
            elif f.kind == POSE_PRIOR:
                pp.append(f)
            elif f.kind == RIGID:
                rg.append(f)
            elif f.kind == LANDMARK_PRIOR:
                lp.append(f)
            else:
                lm.append(f)
        self.odo_prev = _idx([off[f.keys[0]] for f in odo])
        self.odo_curr = _idx([off[f.keys[1]] for f in odo])
        self.odo_meas = _arr([f.data for f in odo], 3)
        self.odo_isig = _arr([[1.0 / s for s in f.sigma] for f in odo], 3)
        self.pp_pose = _idx([off[f.keys[0]] for f in pp])
        self.pp_val = _arr([f.data for f in pp], 3)
        self.pp_isig = _arr([[1.0 / s for s in f.sigma] for f in pp], 3)
        self.rg_obj = _idx([off[f.keys[0]] for f in rg])
        self.rg_lm = _idx([off[f.keys[1]] for f in rg])
        self.rg_tmpl = _arr([f.data for f in rg], 2)
        self.rg_isig = np.array([1.0 / f.sigma[0] for f in rg], dtype=float)
        self.lp_lm = _idx([off[f.keys[0]] for f in lp])
        self.lp_prev = _arr([f.data for f in lp], 2)
        self.lp_isig = np.array([1.0 / f.sigma[0] for f in lp], dtype=float)

        self.landmark_factors = lm
        self.lm_pose = _idx([off[f.keys[0]] for f in lm])
        self.lm_lm = _idx([off[f.keys[1]] for f in lm])
        self.lm_obs = _arr([f.data for f in lm], 2)
        mixtures = {f.mixture for f in lm}
        if len(mixtures) > 1:
            raise ValueError("all landmark measurement factors must share mixture parameters")
        self.mixture: MixtureParams | None = mixtures.pop() if mixtures else None
        self.w_static = np.array([f.weights.w_static for f in lm], dtype=float)
        self.w_changed = np.array([f.weights.w_changed for f in lm], dtype=float)
        self.gate = np.array([f.gate_probability for f in lm], dtype=float)

    # -- evaluation -----------------------------------------------------------

    def gaussian_cost(self, x: np.ndarray) -> float:
        k = kernels.impl
        return (k.odometry_cost(x, self.odo_prev, self.odo_curr, self.odo_meas, self.odo_isig)
                + k.pose_prior_cost(x, self.pp_pose, self.pp_val, self.pp_isig)
                + k.rigid_cost(x, self.rg_obj, self.rg_lm, self.rg_tmpl, self.rg_isig)
                + k.landmark_prior_cost(x, self.lp_lm, self.lp_prev, self.lp_isig))

    def gaussian_linearize(self, x: np.ndarray, H: np.ndarray, g: np.ndarray) -> float:
        k = kernels.impl
        return (k.odometry_linearize(x, self.odo_prev, self.odo_curr, self.odo_meas, self.odo_isig, H, g)
                + k.pose_prior_linearize(x, self.pp_pose, self.pp_val, self.pp_isig, H, g)
                + k.rigid_linearize(x, self.rg_obj, self.rg_lm, self.rg_tmpl, self.rg_isig, H, g)
                + k.landmark_prior_linearize(x, self.lp_lm, self.lp_prev, self.lp_isig, H, g))

    def landmark_residuals(self, x: np.ndarray) -> np.ndarray:
        return kernels.impl.landmark_residuals(x, self.lm_pose, self.lm_lm, self.lm_obs)

    def static_mask(self, E: np.ndarray) -> np.ndarray:
        """Max-mixture decision per landmark factor (True = static)."""
        if len(E) == 0:
            return np.zeros(0, dtype=bool)
        p = self.mixture
        sq = np.einsum("ki,ki->k", E, E)
        with np.errstate(divide="ignore"):
            ls = np.log(self.gate) - sq / (2.0 * p.sigma**2) + p.log_normalizer
            lc = np.log1p(-self.gate) + uniform_log_density(p)
        return ls >= lc

    def point_responsibility(self, E: np.ndarray) -> np.ndarray:
        p = self.mixture
        sq = np.einsum("ki,ki->k", E, E)
        with np.errstate(divide="ignore"):
            ls = np.log(self.gate) - sq / (2.0 * p.sigma**2) + p.log_normalizer
            lc = np.log1p(-self.gate) + uniform_log_density(p)
        return _logistic(ls - lc)

    def direction_weights(self, E: np.ndarray) -> np.ndarray:
        if len(E) == 0:
            return np.zeros(0)
        if self.landmark_model == MAX_MIXTURE:
            return np.where(self.static_mask(E), self.w_static, 0.0)
        if self.landmark_model == WEIGHTED:
            return self.w_static.copy()
        return self.point_responsibility(E)

    def landmark_elbo_cost(self, E: np.ndarray) -> float:
        """Negative of sum(w_s log N(e) + w_c log U) over all landmark factors."""
        if len(E) == 0:
            return 0.0
        p = self.mixture
        sq = np.einsum("ki,ki->k", E, E)
        return float(np.sum(self.w_static * (sq / (2.0 * p.sigma**2) - p.log_normalizer)
                            + self.w_changed * math.log(p.e_max)))

    def landmark_surrogate_cost(self, E: np.ndarray) -> float:
        if len(E) == 0:
            return 0.0
        p = self.mixture
        sq = np.einsum("ki,ki->k", E, E)
        if self.landmark_model == MAX_MIXTURE:
            static = self.static_mask(E)
            return float(np.sum(np.where(static, self.w_static * sq / (2.0 * p.sigma**2),
                                         self.w_changed * math.log(p.e_max))))
        if self.landmark_model == WEIGHTED:
            return float(np.sum(self.w_static * sq / (2.0 * p.sigma**2)))
        with np.errstate(divide="ignore"):
            ls = np.log(self.gate) - sq / (2.0 * p.sigma**2) + p.log_normalizer
            lc = np.log1p(-self.gate) + uniform_log_density(p)
        return float(-np.sum(np.logaddexp(ls, lc)))

    def objective(self, x: np.ndarray, E: np.ndarray | None = None, kind: str = "elbo") -> float:
        E = self.landmark_residuals(x) if E is None else E
        if kind == "elbo":
            return self.gaussian_cost(x) + self.landmark_elbo_cost(E)
        if kind == "surrogate":
            return self.gaussian_cost(x) + self.landmark_surrogate_cost(E)
        raise ValueError(f"unknown objective {kind!r}")

    def normal_equations(self, x: np.ndarray, E: np.ndarray | None = None):
        E = self.landmark_residuals(x) if E is None else E
        H = np.zeros((self.n, self.n))
        g = np.zeros(self.n)
        self.gaussian_linearize(x, H, g)
        if len(E):
            wscale = np.ascontiguousarray(self.direction_weights(E) / self.mixture.sigma**2)
            kernels.impl.landmark_linearize(x, self.lm_pose, self.lm_lm, self.lm_obs, wscale, H, g)
        return H, g

    def retract(self, x: np.ndarray, dx_free: np.ndarray) -> np.ndarray:
        out = x.copy()
        out[self.free] += dx_free
        out[self.angle_mask] = wrap_angles(out[self.angle_mask])
        return out

    def to_variables(self, x: np.ndarray) -> VariableSet:
        vars = self.graph.variables.copy()
        for key in self.keys:
            o = self.offsets[key]
            if key[0] == "lm":
                vars.set(key, (x[o], x[o + 1]))
            else:
                vars.set(key, Pose2(x[o], x[o + 1], x[o + 2]))
        return vars

    def variable(self, x: np.ndarray, key) -> np.ndarray:
        o = self.offsets[key]
        return x[o:o + (2 if key[0] == "lm" else 3)]


def _logistic(d: np.ndarray) -> np.ndarray:
    out = np.empty_like(d)
    pos = d >= 0.0
    out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    ed = np.exp(d[~pos])
    out[~pos] = ed / (1.0 + ed)
    return out


# ---------------------------------------------------------------------------
# Levenberg-Marquardt


@dataclass
class LMOptions:
    max_iters: int = 50
    lambda_init: float = 1e-4
    lambda_scale: float = 10.0
    lambda_max: float = 1e12
    cost_tol: float = 1e-12
    step_tol: float = 1e-10
    objective: str = "elbo"


@dataclass
class SolveReport:
    iterations: int
    initial_cost: float
    final_cost: float
    converged: bool
    mode_flips: int
    status: str = "converged"
    cost_trace: list[float] = field(default_factory=list)


def solve_problem(problem: Problem, x0: np.ndarray | None = None,
                  opts: LMOptions | None = None) -> tuple[np.ndarray, SolveReport]:
    """Damped Gauss-Newton with accept/reject on ``opts.objective``.

    The search direction always comes from the problem's landmark model
    (for max-mixture, only static-mode landmarks contribute); modes are
    re-evaluated at every trial point.  Steps are accepted only if the
    objective does not increase, so the accepted-cost trace is monotone.
    """
    opts = opts or LMOptions()
    x = problem.x0.copy() if x0 is None else np.array(x0, dtype=float)
    free = problem.free
    E = problem.landmark_residuals(x)
    cost = problem.objective(x, E, opts.objective)
    modes = problem.static_mask(E)
    report = SolveReport(0, cost, cost, False, 0, "max_iters", [cost])
    if not free.any():
        report.converged, report.status = True, "converged"
        return x, report
    lam = opts.lambda_init
    for it in range(1, opts.max_iters + 1):
        report.iterations = it
        H, g = problem.normal_equations(x, E)
        Hf = H[np.ix_(free, free)]
        gf = g[free]
        diag = np.maximum(np.diag(Hf), 1e-9)
        accepted = False
        while lam <= opts.lambda_max:
            A = Hf + lam * np.diag(diag)
            try:
                dx = np.linalg.solve(A, -gf)
            except np.linalg.LinAlgError:
                lam *= opts.lambda_scale
                continue
            if not np.all(np.isfinite(dx)):
                lam *= opts.lambda_scale
                continue
            predicted = -(gf @ dx + 0.5 * dx @ Hf @ dx)
            if predicted <= opts.cost_tol * (1.0 + abs(cost)):
                report.converged, report.status = True, "converged"
                return _finish(report, x, cost)
            x_new = problem.retract(x, dx)
            E_new = problem.landmark_residuals(x_new)
            c_new = problem.objective(x_new, E_new, opts.objective)
            if c_new <= cost:
                accepted = True
                break
            lam *= opts.lambda_scale
        if not accepted:
            report.status = "singular"
            log.debug("LM: damping exceeded %.1e without an acceptable step", opts.lambda_max)
            return _finish(report, x, cost)
        new_modes = problem.static_mask(E_new)
        report.mode_flips += int(np.count_nonzero(new_modes != modes))
        modes = new_modes
        decrease = cost - c_new
        x, E, cost = x_new, E_new, c_new
        report.cost_trace.append(cost)
        lam = max(lam / opts.lambda_scale, 1e-15)
        if decrease <= opts.cost_tol * (1.0 + abs(cost)) or \
                np.linalg.norm(dx) <= opts.step_tol * (1.0 + np.linalg.norm(x[free])):
            report.converged, report.status = True, "converged"
            break
    return _finish(report, x, cost)


def _finish(report: SolveReport, x: np.ndarray, cost: float):
    report.final_cost = cost
    return x, report


def lm_solve(graph: FactorGraph, opts: LMOptions | None = None) -> tuple[VariableSet, SolveReport]:
    problem = Problem(graph)
    x, report = solve_problem(problem, None, opts)
    return problem.to_variables(x), report


def dump_graph(graph: FactorGraph, stream: TextIO, iteration: int | None = None,
               vars: VariableSet | None = None) -> None:
    """Write one line per variable and per factor (debugging aid)."""
    vars = graph.variables if vars is None else vars
    tag = "" if iteration is None else f"iter={iteration} "
    for key in vars.keys():
        val = vars.get(key)
        vals = " ".join(f"{v:.9g}" for v in (val if key[0] == "lm" else val.to_array()))
        fixed = " fixed" if key in vars.fixed else ""
        stream.write(f"{tag}VAR {':'.join(map(str, key))} {vals}{fixed}\n")
    for f in graph.factors:
        e = factor_residual(f, vars)
        ids = ",".join(":".join(map(str, k)) for k in f.keys)
        res = " ".join(f"{v:.9g}" for v in e)
        line = f"{tag}FACTOR {f.kind} {ids} residual={res}"
        if f.kind == LANDMARK_MEASUREMENT:
            line += (f" mode={factor_mode(f, vars)} w_static={f.weights.w_static:.9g}"
                     f" w_changed={f.weights.w_changed:.9g} gate={f.gate_probability:.9g}")
        stream.write(line + "\n")
