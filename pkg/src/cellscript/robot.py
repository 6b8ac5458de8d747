"""Three-link planar arm: forward/inverse kinematics and collision queries.

The arm is an open chain of three revolute joints moving in the plane; the
flange frame sits at the tip of the last link, oriented along it.  Link
bodies are capsules (segments with a radius of half the configured link
width).  The only non-adjacent link pair (first vs third) is self-checked;
adjacent links share joints and are exempt.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from . import kernels
from .geometry import Pose, wrap_angle
from .kernels import PackedPolys, pack_polys

#: |sin q2| at or below this is treated as kinematically singular: the two
#: elbow branches coincide and only one solution is reported.
SINGULAR_BAND = 1e-6

#: Inverse kinematics solutions must reproduce the requested pose this well.
IK_RESIDUAL_TOL = 1e-9

DEFAULT_LINKS = (1.0, 0.8, 0.2)
DEFAULT_WIDTHS = (0.04, 0.04, 0.04)


@dataclass(frozen=True)
class RobotModel:
    lengths: tuple[float, float, float] = DEFAULT_LINKS
    limits: tuple[tuple[float, float], ...] = ((-math.pi, math.pi),) * 3
    widths: tuple[float, float, float] = DEFAULT_WIDTHS
    base: Pose = field(default_factory=Pose.identity)

    def within_limits(self, q: Sequence[float]) -> bool:
        return all(lo <= qi <= hi for qi, (lo, hi) in zip(q, self.limits))

    @property
    def reach(self) -> float:
        return sum(self.lengths)


def robot_from_tree(tree: Mapping[str, Any]) -> RobotModel:
    """Build a model from the ``robot`` section of a scene document."""
    lengths = tuple(float(v) for v in tree.get("links", DEFAULT_LINKS))
    widths = tuple(float(v) for v in tree.get("widths", DEFAULT_WIDTHS))
    limits = tuple(
        (float(lo), float(hi)) for lo, hi in tree.get("limits", [[-math.pi, math.pi]] * 3)
    )
    base = tree.get("base", [0.0, 0.0, 0.0])
    if len(lengths) != 3 or len(widths) != 3 or len(limits) != 3:
        raise ValueError("robot model needs exactly three links")
    return RobotModel(lengths, limits, widths, Pose(base[0], base[1], base[2]))


def fk(model: RobotModel, q: Sequence[float]) -> Pose:
    """Flange pose in the world frame."""
    a1 = model.base.theta + q[0]
    a2 = a1 + q[1]
    a3 = a2 + q[2]
    l1, l2, l3 = model.lengths
    x = model.base.x + l1 * math.cos(a1) + l2 * math.cos(a2) + l3 * math.cos(a3)
    y = model.base.y + l1 * math.sin(a1) + l2 * math.sin(a2) + l3 * math.sin(a3)
    return Pose(x, y, wrap_angle(a3))


def fk_points(model: RobotModel, q: Sequence[float]) -> list[tuple[float, float]]:
    """Joint positions from base to flange (4 points)."""
    pts = [(model.base.x, model.base.y)]
    a = model.base.theta
    for qi, li in zip(q, model.lengths):
        a += qi
        last = pts[-1]
        pts.append((last[0] + li * math.cos(a), last[1] + li * math.sin(a)))
    return pts


def is_singular(q: Sequence[float]) -> bool:
    return abs(math.sin(q[1])) <= SINGULAR_BAND


def ik(model: RobotModel, target: Pose) -> list[tuple[float, float, float]]:
    """All joint solutions reaching ``target`` exactly.

    Returns at most two solutions (the elbow branches), with the q2 <= 0
    branch first.  In the singular band the branches coincide and a single
    solution is returned.  Unreachable targets yield an empty list.
    """
    local = model.base.inverse().compose(target)
    l1, l2, l3 = model.lengths
    wx = local.x - l3 * math.cos(local.theta)
    wy = local.y - l3 * math.sin(local.theta)
    r2 = wx * wx + wy * wy
    c2 = (r2 - l1 * l1 - l2 * l2) / (2.0 * l1 * l2)
    if c2 > 1.0 + 1e-12 or c2 < -1.0 - 1e-12:
        return []
    c2 = min(1.0, max(-1.0, c2))
    s2 = math.sqrt(max(0.0, 1.0 - c2 * c2))
    base_angle = math.atan2(wy, wx)
    sols: list[tuple[float, float, float]] = []
    branches = (-s2, s2) if s2 > SINGULAR_BAND else (s2,)
    for s in branches:
        q2 = math.atan2(s, c2)
        q1 = wrap_angle(base_angle - math.atan2(l2 * s, l1 + l2 * c2))
        q3 = wrap_angle(local.theta - q1 - q2)
        q = (q1, wrap_angle(q2), q3)
        if not model.within_limits(q):
            continue
        got = fk(model, q)
        err = math.hypot(got.x - target.x, got.y - target.y)
        if err < IK_RESIDUAL_TOL and abs(wrap_angle(got.theta - target.theta)) < IK_RESIDUAL_TOL:
            sols.append(q)
    return sols


def nearest_solution(
    solutions: Iterable[tuple[float, float, float]], ref: Sequence[float]
) -> tuple[float, float, float] | None:
    """The solution closest to ``ref`` in joint space (L2), ties by order."""
    best = None
    best_d = math.inf
    for q in solutions:
        d = sum((a - b) ** 2 for a, b in zip(q, ref))
        if d < best_d:
            best_d = d
            best = q
    return best


def joint_distance(a: Sequence[float], b: Sequence[float]) -> float:
    return math.sqrt(sum((x - y) ** 2 for x, y in zip(a, b)))


# ---------------------------------------------------------------------------
# Collision world
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CollisionWorld:
    """Everything the arm may hit: world-frame polygons plus payload
    polygons expressed in the flange frame (tool body and held objects)."""

    world_names: tuple[str, ...]
    world: PackedPolys
    attached_names: tuple[str, ...]
    attached: PackedPolys
    margin: float = 0.001

    @staticmethod
    def build(
        world_polys: Sequence[tuple[str, np.ndarray]],
        attached_polys: Sequence[tuple[str, np.ndarray]] = (),
        margin: float = 0.001,
    ) -> "CollisionWorld":
        return CollisionWorld(
            tuple(n for n, _ in world_polys),
            pack_polys([p for _, p in world_polys]),
            tuple(n for n, _ in attached_polys),
            pack_polys([p for _, p in attached_polys]),
            margin,
        )


@dataclass(frozen=True)
class CollisionWitness:
    sample_index: int
    first: str
    second: str

    def describe(self) -> str:
        return f"{self.first} vs {self.second}"


_LINK_NAMES = ("link1", "link2", "link3")


def _decode(world: CollisionWorld, hit: tuple[int, int, int, int]) -> CollisionWitness | None:
    s, code, a, b = hit
    if s < 0:
        return None
    if code == kernels.LINK_WORLD:
        return CollisionWitness(s, _LINK_NAMES[a], world.world_names[b])
    if code == kernels.LINK_LINK:
        return CollisionWitness(s, _LINK_NAMES[a], _LINK_NAMES[b])
    return CollisionWitness(s, world.attached_names[a], world.world_names[b])


def check_configs(
    model: RobotModel, Q: np.ndarray, world: CollisionWorld
) -> CollisionWitness | None:
    """First collision among a batch of configurations, or None when clean."""
    if len(Q) == 0:
        return None
    hit = kernels.ACTIVE.first_violation(
        np.asarray(Q, dtype=np.float64).reshape(-1, 3),
        np.asarray(model.lengths),
        np.asarray([model.base.x, model.base.y, model.base.theta]),
        np.asarray(model.widths),
        world.world,
        world.attached,
        world.margin,
    )
    return _decode(world, hit)


def collide(model: RobotModel, q: Sequence[float], world: CollisionWorld) -> CollisionWitness | None:
    """Single-configuration collision query with a named witness."""
    return check_configs(model, np.asarray([list(q)], dtype=np.float64), world)
