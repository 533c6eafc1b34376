"""Planar rigid transforms.

``Pose2`` is an element of SE(2).  A pose ``T`` maps coordinates of its child
frame into its parent frame: ``apply(T, p) = R(theta) p + t``.
"""

from __future__ import annotations

import math
from collections.abc import Sequence
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

TWO_PI = 2.0 * math.pi


def normalize_angle(theta: float) -> float:
    """Wrap an angle into (-pi, pi]."""
    wrapped = math.remainder(theta, TWO_PI)
    if wrapped <= -math.pi:
        wrapped += TWO_PI
    return wrapped


def wrap_angles(theta: np.ndarray) -> np.ndarray:
    """Vectorized :func:`normalize_angle`."""
    wrapped = np.remainder(theta + math.pi, TWO_PI) - math.pi
    return np.where(wrapped <= -math.pi, wrapped + TWO_PI, wrapped)


class Point2(NamedTuple):
    x: float
    y: float

    def to_array(self) -> np.ndarray:
        return np.array([self.x, self.y], dtype=float)


@dataclass(frozen=True, slots=True)
class Pose2:
    x: float = 0.0
    y: float = 0.0
    theta: float = 0.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "x", float(self.x))
        object.__setattr__(self, "y", float(self.y))
        object.__setattr__(self, "theta", normalize_angle(float(self.theta)))

    @classmethod
    def identity(cls) -> Pose2:
        return cls(0.0, 0.0, 0.0)

    @classmethod
    def from_array(cls, v: Sequence[float]) -> Pose2:
        return cls(v[0], v[1], v[2])

    def to_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.theta], dtype=float)

    @property
    def translation(self) -> Point2:
        return Point2(self.x, self.y)

    def rotation(self) -> np.ndarray:
        c, s = math.cos(self.theta), math.sin(self.theta)
        return np.array([[c, -s], [s, c]])

    def __matmul__(self, other: Pose2) -> Pose2:
        return compose(self, other)


def rot2(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


def compose(a: Pose2, b: Pose2) -> Pose2:
    """``a o b``: apply ``b`` first, then ``a``."""
    c, s = math.cos(a.theta), math.sin(a.theta)
    return Pose2(
        a.x + c * b.x - s * b.y,
        a.y + s * b.x + c * b.y,
        a.theta + b.theta,
    )


def inverse(a: Pose2) -> Pose2:
    c, s = math.cos(a.theta), math.sin(a.theta)
    return Pose2(-(c * a.x + s * a.y), s * a.x - c * a.y, -a.theta)


def apply(a: Pose2, p: Point2 | Sequence[float]) -> Point2:
    """Rotate then translate ``p``."""
    px, py = p[0], p[1]
    c, s = math.cos(a.theta), math.sin(a.theta)
    return Point2(a.x + c * px - s * py, a.y + s * px + c * py)


def between(a: Pose2, b: Pose2) -> Pose2:
    """Relative pose from ``a`` to ``b``, i.e. ``inverse(a) o b``."""
    c, s = math.cos(a.theta), math.sin(a.theta)
    dx, dy = b.x - a.x, b.y - a.y
    return Pose2(c * dx + s * dy, -s * dx + c * dy, b.theta - a.theta)


def retract(a: Pose2, delta: Sequence[float]) -> Pose2:
    """Additive update on (x, y, theta); the heading is re-wrapped."""
    dx, dy, dtheta = (float(d) for d in delta)
    if not all(math.isfinite(d) for d in (dx, dy, dtheta)):
        raise ValueError(f"non-finite retraction step {delta!r}")
    return Pose2(a.x + dx, a.y + dy, a.theta + dtheta)


def apply_points(a: Pose2, pts: np.ndarray) -> np.ndarray:
    """Apply ``a`` to an (N, 2) array of points."""
    pts = np.asarray(pts, dtype=float).reshape(-1, 2)
    return pts @ a.rotation().T + np.array([a.x, a.y])


def translation_error(a: Pose2, b: Pose2) -> float:
    return math.hypot(a.x - b.x, a.y - b.y)


def rotation_error(a: Pose2, b: Pose2) -> float:
    return abs(normalize_angle(a.theta - b.theta))
