"""Deterministic 2D semi-static world and sensor simulator.

Objects are rectangles whose four corners are the measurable landmarks.
Scripted moves change an object's world pose from a given frame onwards.
Frames are numbered from 1; the object layout "before frame 1" is what a
prior mapping session would have recorded.
"""

from __future__ import annotations

import json
import math
from collections.abc import Iterator
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .geom import Point2, Pose2, apply_points, between, inverse
from .vem import ConfigError, Observation


@dataclass(frozen=True)
class ObjectSpec:
    id: int
    center: Point2
    half_extents: tuple[float, float]
    heading: float = 0.0
    class_label: int = 0

    @property
    def pose(self) -> Pose2:
        return Pose2(self.center[0], self.center[1], self.heading)


@dataclass(frozen=True)
class Move:
    frame: int
    object_id: int
    delta: Pose2


@dataclass(frozen=True)
class FieldOfView:
    max_range: float = 8.0
    half_angle: float = math.pi

    def contains(self, pts_body: np.ndarray) -> np.ndarray:
        pts = np.asarray(pts_body, dtype=float).reshape(-1, 2)
        rng = np.hypot(pts[:, 0], pts[:, 1])
        bearing = np.abs(np.arctan2(pts[:, 1], pts[:, 0]))
        return (rng <= self.max_range) & (bearing <= self.half_angle)


@dataclass(frozen=True)
class NoiseConfig:
    meas_sigma: float = 0.02
    odom_sigma_xy: float = 0.01
    odom_sigma_theta: float = 0.005
    init_pose_sigma_xy: float = 0.2
    init_pose_sigma_theta: float = 0.1

    @classmethod
    def zero(cls) -> NoiseConfig:
        return cls(0.0, 0.0, 0.0, 0.0, 0.0)


@dataclass(frozen=True)
class ScenarioConfig:
    objects: tuple[ObjectSpec, ...]
    robot_path: tuple[Pose2, ...]
    moves: tuple[Move, ...] = ()
    fov: FieldOfView = field(default_factory=FieldOfView)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    seed: int = 0
    prior_map: bool = True
    name: str = "custom"

    @property
    def n_frames(self) -> int:
        return len(self.robot_path)

    def problems(self) -> list[str]:
        out = []
        ids = [o.id for o in self.objects]
        if len(set(ids)) != len(ids):
            out.append("object ids must be unique")
        for o in self.objects:
            if len(o.half_extents) != 2 or min(o.half_extents) <= 0.0:
                out.append(f"object {o.id}: half_extents must be two positive lengths")
        if not self.robot_path:
            out.append("robot_path must contain at least one pose")
        for i, mv in enumerate(self.moves):
            if mv.object_id not in ids:
                out.append(f"move {i}: unknown object id {mv.object_id}")
            if not 1 <= mv.frame <= max(len(self.robot_path), 1):
                out.append(f"move {i}: frame {mv.frame} outside 1..{len(self.robot_path)}")
        for name, val in asdict(self.noise).items():
            if not val >= 0.0:
                out.append(f"noise.{name} must be >= 0")
        if not self.fov.max_range > 0.0:
            out.append("fov.max_range must be positive")
        if not 0.0 < self.fov.half_angle <= math.pi:
            out.append("fov.half_angle must lie in (0, pi]")
        return out

    def validate(self) -> ScenarioConfig:
        problems = self.problems()
        if problems:
            raise ConfigError(problems)
        return self

    def replace(self, **changes) -> ScenarioConfig:
        d = {f: getattr(self, f) for f in self.__dataclass_fields__}
        d.update(changes)
        return ScenarioConfig(**d)

    # -- JSON ---------------------------------------------------------------

    def to_dict(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "seed": self.seed,
            "prior_map": self.prior_map,
            "objects": [
                {"id": o.id, "center": list(o.center), "half_extents": list(o.half_extents),
                 "heading": o.heading, "class_label": o.class_label}
                for o in self.objects
            ],
            "moves": [
                {"frame": m.frame, "object_id": m.object_id, "delta": list(m.delta.to_array())}
                for m in self.moves
            ],
            "robot_path": [list(p.to_array()) for p in self.robot_path],
            "fov": asdict(self.fov),
            "noise": asdict(self.noise),
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> ScenarioConfig:
        problems = []
        for key in ("objects", "robot_path"):
            if key not in d:
                problems.append(f"missing required key {key!r}")
        if problems:
            raise ConfigError(problems)
        try:
            objects = tuple(
                ObjectSpec(int(o["id"]), Point2(*map(float, o["center"])),
                           tuple(map(float, o["half_extents"])), float(o.get("heading", 0.0)),
                           int(o.get("class_label", 0)))
                for o in d["objects"])
            moves = tuple(Move(int(m["frame"]), int(m["object_id"]), Pose2.from_array(m["delta"]))
                          for m in d.get("moves", []))
            path = tuple(Pose2.from_array(p) for p in d["robot_path"])
            fov = FieldOfView(**d.get("fov", {}))
            noise = NoiseConfig(**d.get("noise", {}))
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError([f"malformed config: {exc}"]) from exc
        return cls(objects, path, moves, fov, noise, int(d.get("seed", 0)),
                   bool(d.get("prior_map", True)), str(d.get("name", "custom")))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> ScenarioConfig:
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError([f"not valid JSON: {exc}"]) from exc
        if not isinstance(d, dict):
            raise ConfigError(["top-level JSON value must be an object"])
        return cls.from_dict(d)

    @classmethod
    def load(cls, path: str | Path) -> ScenarioConfig:
        return cls.from_json(Path(path).read_text())


def rectangle_corners(pose: Pose2, half_extents: tuple[float, float]) -> np.ndarray:
    hx, hy = half_extents
    local = np.array([[hx, hy], [-hx, hy], [-hx, -hy], [hx, -hy]])
    return apply_points(pose, local)


@dataclass(frozen=True)
class Scene:
    config: ScenarioConfig
    map_poses: dict[int, Pose2]
    poses_by_frame: tuple[dict[int, Pose2], ...]

    def object_pose(self, obj: int, frame: int) -> Pose2:
        """World pose of an object at ``frame``; frame 0 is the prior map."""
        if frame == 0:
            return self.map_poses[obj]
        return self.poses_by_frame[frame - 1][obj]

    def corners(self, obj: int, frame: int) -> np.ndarray:
        spec = self._spec(obj)
        return rectangle_corners(self.object_pose(obj, frame), spec.half_extents)

    def _spec(self, obj: int) -> ObjectSpec:
        for o in self.config.objects:
            if o.id == obj:
                return o
        raise KeyError(obj)

    def moved_objects(self) -> dict[int, int]:
        """Object id -> first frame at which it differs from the prior map."""
        out = {}
        for m in sorted(self.config.moves, key=lambda m: (m.frame, m.object_id)):
            if m.delta.to_array().any():
                out.setdefault(m.object_id, m.frame)
        return out

    def visible_corners(self, obj: int, frame: int) -> tuple[np.ndarray, np.ndarray]:
        """Corner indices and noiseless body-frame corners inside the FOV."""
        gt = self.config.robot_path[frame - 1]
        body = apply_points(inverse(gt), self.corners(obj, frame))
        mask = self.config.fov.contains(body)
        return np.flatnonzero(mask), body[mask]


def generate_scene(cfg: ScenarioConfig) -> Scene:
    cfg.validate()
    current = {o.id: o.pose for o in cfg.objects}
    map_poses = dict(current)
    by_frame = []
    moves = sorted(cfg.moves, key=lambda m: (m.frame, m.object_id))
    for frame in range(1, cfg.n_frames + 1):
        for mv in moves:
            if mv.frame == frame:
                p = current[mv.object_id]
                current[mv.object_id] = Pose2(p.x + mv.delta.x, p.y + mv.delta.y,
                                              p.theta + mv.delta.theta)
        by_frame.append(dict(current))
    return Scene(cfg, map_poses, tuple(by_frame))


@dataclass(frozen=True)
class FrameData:
    frame_id: int
    gt_pose: Pose2
    odometry_meas: Pose2
    observations: tuple[Observation, ...]
    init_pose: Pose2 | None = None


def frame_rng(seed: int, frame_id: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(frame_id)])


def simulate_frame(scene: Scene, frame_id: int, rng: np.random.Generator) -> FrameData:
    cfg = scene.config
    if not 1 <= frame_id <= cfg.n_frames:
        raise IndexError(f"frame {frame_id} outside 1..{cfg.n_frames}")
    nz = cfg.noise
    gt = cfg.robot_path[frame_id - 1]
    sig_odo = np.array([nz.odom_sigma_xy, nz.odom_sigma_xy, nz.odom_sigma_theta])
    sig_init = np.array([nz.init_pose_sigma_xy, nz.init_pose_sigma_xy, nz.init_pose_sigma_theta])
    odo_noise = rng.standard_normal(3) * sig_odo
    init_noise = rng.standard_normal(3) * sig_init
    if frame_id == 1:
        odom = Pose2.identity()
        init = Pose2.from_array(gt.to_array() + init_noise)
    else:
        rel = between(cfg.robot_path[frame_id - 2], gt)
        odom = Pose2.from_array(rel.to_array() + odo_noise)
        init = None
    observations = []
    for spec in sorted(cfg.objects, key=lambda o: o.id):
        _, body = scene.visible_corners(spec.id, frame_id)
        if len(body) == 0:
            continue
        noisy = body + rng.standard_normal(body.shape) * nz.meas_sigma
        noisy.setflags(write=False)
        observations.append(Observation(frame_id, noisy))
    return FrameData(frame_id, gt, odom, tuple(observations), init)


def simulate(scene: Scene) -> Iterator[FrameData]:
    for f in range(1, scene.config.n_frames + 1):
        yield simulate_frame(scene, f, frame_rng(scene.config.seed, f))


# ---------------------------------------------------------------------------
# presets (reconstructed layouts; see README)


def _loop_path(n_steps: int, radius: float) -> tuple[Pose2, ...]:
    """Counter-clockwise circle that returns to its starting pose."""
    poses = []
    for k in range(n_steps + 1):
        a = 2.0 * math.pi * k / n_steps
        poses.append(Pose2(radius * math.cos(a), radius * math.sin(a), a + math.pi / 2))
    poses[-1] = poses[0]
    return tuple(poses)


def _ring_objects(n: int, radius: float, offset: float = math.pi / 10) -> tuple[ObjectSpec, ...]:
    objs = []
    for k in range(n):
        a = offset + 2.0 * math.pi * k / n
        heading = a + math.pi / 2 + (0.3 if k % 3 == 0 else -0.2 if k % 3 == 1 else 0.0)
        objs.append(ObjectSpec(k + 1, Point2(radius * math.cos(a), radius * math.sin(a)),
                               (0.5, 0.3), heading, class_label=k % 3))
    return tuple(objs)


# (object id, radial shift in m, heading change in rad) for the six moved boxes.
_BASELINE_MOVES = ((1, 1.4, 0.0), (2, -1.2, 0.4), (4, 1.6, 0.0), (6, -1.0, -0.3),
                   (7, 1.2, 0.0), (9, -1.5, 0.2))


def _radial_moves(objects, table, frame=1) -> tuple[Move, ...]:
    by_id = {o.id: o for o in objects}
    out = []
    for oid, shift, dtheta in table:
        c = by_id[oid].center
        r = math.hypot(*c)
        out.append(Move(frame, oid, Pose2(shift * c[0] / r, shift * c[1] / r, dtheta)))
    return tuple(out)


def _baseline(seed: int = 0) -> ScenarioConfig:
    objects = _ring_objects(10, 4.0)
    return ScenarioConfig(objects, _loop_path(16, 1.0), _radial_moves(objects, _BASELINE_MOVES),
                          FieldOfView(8.0, math.pi), NoiseConfig(), seed, True, "baseline_6m4s")


def _coherent(seed: int = 0) -> ScenarioConfig:
    base = _baseline(seed)
    delta = Pose2(0.6, 0.0, 0.0)
    moves = tuple(Move(1, oid, delta) for oid, _, _ in _BASELINE_MOVES)
    return base.replace(moves=moves, name="coherent_shift")


def _all_static(seed: int = 0) -> ScenarioConfig:
    return _baseline(seed).replace(moves=(), name="all_static")


def _stress_dense(seed: int = 0) -> ScenarioConfig:
    objs = []
    k = 1
    for i in range(5):
        for j in range(4):
            cx = -5.0 + 2.5 * i
            cy = -4.5 + 3.0 * j
            if abs(cy) < 1.0:
                cy += 1.5 if cy >= 0 else -1.5
            objs.append(ObjectSpec(k, Point2(cx, cy), (0.4, 0.25), 0.35 * (k % 4), k % 3))
            k += 1
    # Out and back along the middle corridor.
    n_leg = 12
    path = [Pose2(-4.0 + 8.0 * s / n_leg, 0.0, 0.0) for s in range(n_leg)]
    path += [Pose2(4.0 - 8.0 * s / n_leg, 0.0, math.pi) for s in range(n_leg)]
    path.append(path[0])
    cfg = ScenarioConfig(tuple(objs), tuple(path), (), FieldOfView(6.0, 1.0), NoiseConfig(),
                         seed, True, "stress_dense")
    # Move objects that were mapped on the way out, are out of view near the
    # turning point and come back into view on the return leg.
    scene = generate_scene(cfg)
    move_frame = n_leg - 1
    n = cfg.n_frames

    def seen(o, frames):
        return any(len(scene.visible_corners(o.id, f)[0]) for f in frames)

    moves = []
    for o in objs:
        if (seen(o, range(1, move_frame - 1)) and not seen(o, (move_frame - 1, move_frame))
                and seen(o, range(move_frame + 1, n + 1)) and len(moves) < 5):
            moves.append(Move(move_frame, o.id, Pose2(0.0, 1.2 if o.center[1] > 0 else -1.2, 0.3)))
    return cfg.replace(moves=tuple(moves))


PRESETS = {
    "baseline_6m4s": _baseline,
    "coherent_shift": _coherent,
    "all_static": _all_static,
    "stress_dense": _stress_dense,
}


def preset(name: str, seed: int = 0) -> ScenarioConfig:
    try:
        factory = PRESETS[name]
    except KeyError:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    return factory(seed)


def prior_map(scene: Scene, prior=None) -> list:
    """Object library a previous mapping session would hand over."""
    from .consistency import BetaState
    from .vem import ObjectModel

    prior = prior or BetaState(1.0, 1.0)
    if not scene.config.prior_map:
        return []
    return [ObjectModel.from_points(o.id, scene.corners(o.id, 0), prior, 0, o.class_label)
            for o in sorted(scene.config.objects, key=lambda o: o.id)]
