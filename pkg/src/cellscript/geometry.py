"""Planar rigid-body geometry shared by the whole runtime.

Everything in the cell lives in the plane: a pose is (x, y, theta) with theta
normalized to the half-open interval (-pi, pi].  Poses compose like 2D rigid
transforms; polygons are convex, counter-clockwise vertex lists.

Values that end up in variable maps or traces are computed here with plain
``math`` so they do not depend on which collision kernel backend is active.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

TAU = 2.0 * math.pi

#: Two poses are considered equal when every component differs by less than this.
POSE_TOL = 1e-9


def wrap_angle(a: float) -> float:
    """Normalize an angle to (-pi, pi].  +pi maps to +pi, -pi maps to +pi."""
    w = math.remainder(a, TAU)
    if w <= -math.pi:
        w += TAU
    return w


@dataclass(frozen=True)
class Pose:
    """A planar rigid transform / SE(2) element."""

    x: float
    y: float
    theta: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "theta", wrap_angle(float(self.theta)))
        object.__setattr__(self, "x", float(self.x))
        object.__setattr__(self, "y", float(self.y))

    @staticmethod
    def identity() -> "Pose":
        return Pose(0.0, 0.0, 0.0)

    @staticmethod
    def rot(theta: float) -> "Pose":
        return Pose(0.0, 0.0, theta)

    def compose(self, other: "Pose") -> "Pose":
        """self ∘ other: apply ``other`` in the frame described by ``self``."""
        c = math.cos(self.theta)
        s = math.sin(self.theta)
        return Pose(
            self.x + c * other.x - s * other.y,
            self.y + s * other.x + c * other.y,
            wrap_angle(self.theta + other.theta),
        )

    def inverse(self) -> "Pose":
        c = math.cos(self.theta)
        s = math.sin(self.theta)
        return Pose(-(c * self.x + s * self.y), -(-s * self.x + c * self.y), -self.theta)

    def apply(self, pt: Sequence[float]) -> tuple[float, float]:
        """Transform a point from this frame into the parent frame."""
        c = math.cos(self.theta)
        s = math.sin(self.theta)
        return (self.x + c * pt[0] - s * pt[1], self.y + s * pt[0] + c * pt[1])

    def almost_equal(self, other: "Pose", tol: float = POSE_TOL) -> bool:
        return (
            abs(self.x - other.x) < tol
            and abs(self.y - other.y) < tol
            and abs(wrap_angle(self.theta - other.theta)) < tol
        )

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.x, self.y, self.theta)


def pose_from(seq: Sequence[float]) -> Pose:
    if len(seq) != 3:
        raise ValueError(f"pose needs 3 components, got {len(seq)}")
    return Pose(float(seq[0]), float(seq[1]), float(seq[2]))


# ---------------------------------------------------------------------------
# Convex polygons.  Represented as float64 arrays of shape (n, 2), CCW order.
# ---------------------------------------------------------------------------


def as_polygon(vertices: Iterable[Sequence[float]]) -> np.ndarray:
    """Build a validated convex CCW polygon array from a vertex list."""
    pts = np.asarray(list(vertices), dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2 or pts.shape[0] < 3:
        raise ValueError("polygon needs at least 3 (x, y) vertices")
    if signed_area(pts) < 0:
        pts = pts[::-1].copy()
    if not is_convex(pts):
        raise ValueError("polygon must be convex and non-degenerate")
    return pts


def signed_area(pts: np.ndarray) -> float:
    x = pts[:, 0]
    y = pts[:, 1]
    return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


def is_convex(pts: np.ndarray, eps: float = 1e-12) -> bool:
    n = len(pts)
    for i in range(n):
        a = pts[i]
        b = pts[(i + 1) % n]
        c = pts[(i + 2) % n]
        cross = (b[0] - a[0]) * (c[1] - b[1]) - (b[1] - a[1]) * (c[0] - b[0])
        if cross < eps:  # strictly convex, CCW
            return False
    return True


def transform_polygon(pose: Pose, pts: np.ndarray) -> np.ndarray:
    c = math.cos(pose.theta)
    s = math.sin(pose.theta)
    out = np.empty_like(pts)
    out[:, 0] = pose.x + c * pts[:, 0] - s * pts[:, 1]
    out[:, 1] = pose.y + s * pts[:, 0] + c * pts[:, 1]
    return out


def rectangle(width: float, height: float, center: Sequence[float] = (0.0, 0.0)) -> np.ndarray:
    hw, hh = width / 2.0, height / 2.0
    cx, cy = center
    return np.array(
        [[cx - hw, cy - hh], [cx + hw, cy - hh], [cx + hw, cy + hh], [cx - hw, cy + hh]],
        dtype=np.float64,
    )


def contains_points(poly: np.ndarray, pts: np.ndarray, eps: float = 0.0) -> np.ndarray:
    """Vectorized closed containment test for a convex CCW polygon."""
    pts = np.atleast_2d(pts)
    inside = np.ones(len(pts), dtype=bool)
    n = len(poly)
    for i in range(n):
        a = poly[i]
        b = poly[(i + 1) % n]
        ex, ey = b[0] - a[0], b[1] - a[1]
        cross = ex * (pts[:, 1] - a[1]) - ey * (pts[:, 0] - a[0])
        inside &= cross >= -eps
    return inside


def polygon_radius(poly: np.ndarray) -> float:
    """Radius of the smallest origin-centered disk containing the polygon."""
    return float(np.max(np.hypot(poly[:, 0], poly[:, 1])))


def seg_seg_distance_py(
    p0: Sequence[float], p1: Sequence[float], q0: Sequence[float], q1: Sequence[float]
) -> float:
    """Reference (pure python) segment-segment distance, used by tests."""

    def orient(a, b, c):
        return (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])

    d1 = orient(p0, p1, q0)
    d2 = orient(p0, p1, q1)
    d3 = orient(q0, q1, p0)
    d4 = orient(q0, q1, p1)
    if ((d1 > 0) != (d2 > 0)) and ((d3 > 0) != (d4 > 0)):
        return 0.0

    def pt_seg(p, a, b):
        ax, ay = b[0] - a[0], b[1] - a[1]
        denom = ax * ax + ay * ay
        if denom == 0.0:
            return math.hypot(p[0] - a[0], p[1] - a[1])
        t = ((p[0] - a[0]) * ax + (p[1] - a[1]) * ay) / denom
        t = min(1.0, max(0.0, t))
        return math.hypot(p[0] - (a[0] + t * ax), p[1] - (a[1] + t * ay))

    return min(
        pt_seg(p0, q0, q1),
        pt_seg(p1, q0, q1),
        pt_seg(q0, p0, p1),
        pt_seg(q1, p0, p1),
    )
