"""Trajectory generators: joint-space lines, flange straight lines, RRT.

Every generator returns either a :class:`Trajectory` carrying a safety
certificate (the sampling resolution and margin the path was checked at) or
an :class:`Infeasible` verdict naming the first witness found.  Durations
assume unit joint speed scaled by ``speed_scale``: a segment takes
``max-joint-delta / (speed_scale * 1 rad/s)`` seconds.

Randomized generators (RRT, shortcutting) draw from a generator seeded by
the caller, so identical requests yield identical trajectories no matter
when or where they are planned.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any, Mapping, Sequence

import numpy as np

from .geometry import Pose, wrap_angle
from .robot import (
    CollisionWitness,
    CollisionWorld,
    RobotModel,
    check_configs,
    fk,
    ik,
    is_singular,
    joint_distance,
    nearest_solution,
)

#: Flange-line IK tracking rejects steps whose joint-space jump exceeds this.
BRANCH_JUMP_RAD = 0.5

#: Cartesian sampling step for flange straight lines (meters).
EE_LINE_STEP_M = 0.005


@dataclass(frozen=True)
class TrajectoryConfig:
    method: str = "joint_line"
    speed_scale: float = 1.0
    resolution: float = 0.01
    singularity_reject: bool = False
    rrt_max_iters: int = 50_000
    rrt_step: float = 0.2
    rrt_goal_bias: float = 0.1
    shortcut_iters: int = 200

    @staticmethod
    def from_params(params: Mapping[str, Any] | None, default_method: str) -> "TrajectoryConfig":
        p = dict(params or {})
        rrt_p = dict(p.get("rrt", {}))
        return TrajectoryConfig(
            method=str(p.get("method", default_method)),
            speed_scale=float(p.get("speed_scale", 1.0)),
            resolution=float(p.get("resolution", 0.01)),
            singularity_reject=bool(p.get("singularity_reject", False)),
            rrt_max_iters=int(rrt_p.get("max_iters", 50_000)),
            rrt_step=float(rrt_p.get("step", 0.2)),
            rrt_goal_bias=float(rrt_p.get("goal_bias", 0.1)),
            shortcut_iters=int(p.get("shortcut_iters", 200)),
        )


@dataclass(frozen=True)
class Certificate:
    resolution: float
    margin: float
    collision_free: bool = True


@dataclass(frozen=True)
class Trajectory:
    waypoints: tuple[tuple[float, float, float], ...]
    durations: tuple[float, ...]  # per segment, len == len(waypoints) - 1
    certificate: Certificate

    @property
    def duration_ms(self) -> float:
        return 1000.0 * sum(self.durations)

    @property
    def end(self) -> tuple[float, float, float]:
        return self.waypoints[-1]

    def length(self) -> float:
        return sum(
            joint_distance(a, b) for a, b in zip(self.waypoints, self.waypoints[1:])
        )

    def to_tree(self) -> dict[str, Any]:
        return {
            "waypoints": [list(w) for w in self.waypoints],
            "durations": list(self.durations),
            "certificate": {
                "resolution": self.certificate.resolution,
                "margin": self.certificate.margin,
                "collision_free": self.certificate.collision_free,
            },
        }


@dataclass(frozen=True)
class Infeasible:
    reason: str  # collision | unreachable | branch_jump | singular | limits | exhausted | bad_input
    t: float | None = None
    witness: CollisionWitness | None = None

    def describe(self) -> str:
        at = f" at t={self.t:.4f}" if self.t is not None else ""
        wit = f" ({self.witness.describe()})" if self.witness else ""
        return f"{self.reason}{at}{wit}"


def trajectory_from_tree(tree: Mapping[str, Any]) -> Trajectory:
    """Inverse of :meth:`Trajectory.to_tree`; raises ``ValueError`` on shape errors."""
    if not isinstance(tree, Mapping):
        raise ValueError("trajectory must be an object")
    wps = tree.get("waypoints")
    durs = tree.get("durations")
    if not isinstance(wps, (list, tuple)) or len(wps) < 2:
        raise ValueError("trajectory needs at least two waypoints")
    waypoints = tuple(tuple(float(v) for v in w) for w in wps)
    arity = len(waypoints[0])
    if any(len(w) != arity for w in waypoints):
        raise ValueError("waypoints have inconsistent arity")
    if not isinstance(durs, (list, tuple)) or len(durs) != len(waypoints) - 1:
        raise ValueError("durations must have one entry per segment")
    cert_tree = tree.get("certificate")
    if isinstance(cert_tree, Mapping):
        cert = Certificate(
            float(cert_tree.get("resolution", 0.0)),
            float(cert_tree.get("margin", 0.0)),
            bool(cert_tree.get("collision_free", False)),
        )
    else:
        cert = Certificate(0.0, 0.0, collision_free=False)
    return Trajectory(waypoints, tuple(float(d) for d in durs), cert)


MotionResult = Trajectory | Infeasible


def _bump(stats: dict | None, n: int) -> None:
    if stats is not None:
        stats["checks"] = stats.get("checks", 0) + n


def _durations(
    waypoints: Sequence[tuple[float, float, float]], speed_scale: float
) -> tuple[float, ...]:
    speed = max(1e-9, speed_scale)  # rad/s
    return tuple(
        max(abs(a - b) for a, b in zip(w0, w1)) / speed
        for w0, w1 in zip(waypoints, waypoints[1:])
    )


def _interp(q0: Sequence[float], q1: Sequence[float], t: float) -> tuple[float, float, float]:
    return tuple(a + (b - a) * t for a, b in zip(q0, q1))  # type: ignore[return-value]


def _segment_samples(q0, q1, resolution) -> np.ndarray:
    delta = max(abs(a - b) for a, b in zip(q0, q1))
    n = max(2, int(math.ceil(delta / max(resolution, 1e-9))) + 1)
    ts = np.linspace(0.0, 1.0, n)
    return np.asarray(q0) + ts[:, None] * (np.asarray(q1) - np.asarray(q0))


def joint_line(
    model: RobotModel,
    q0: Sequence[float],
    q1: Sequence[float],
    cfg: TrajectoryConfig,
    world: CollisionWorld,
    stats: dict | None = None,
) -> MotionResult:
    """Straight segment in joint space, densely collision-checked."""
    if not model.within_limits(q1):
        return Infeasible("limits")
    Q = _segment_samples(q0, q1, cfg.resolution)
    if cfg.singularity_reject and any(is_singular(q) for q in Q):
        return Infeasible("singular")
    _bump(stats, len(Q))
    hit = check_configs(model, Q, world)
    if hit is not None:
        return Infeasible("collision", t=hit.sample_index / (len(Q) - 1), witness=hit)
    wp = (tuple(float(v) for v in q0), tuple(float(v) for v in q1))
    if joint_distance(q0, q1) < 1e-12:
        wp = (wp[0], wp[0])
    return Trajectory(wp, _durations(wp, cfg.speed_scale), Certificate(cfg.resolution, world.margin))


def ee_line(
    model: RobotModel,
    q0: Sequence[float],
    target: Pose,
    cfg: TrajectoryConfig,
    world: CollisionWorld,
    stats: dict | None = None,
) -> MotionResult:
    """Straight flange-frame line from the current pose to ``target``.

    Poses are sampled densely along the line; each sample is solved by
    inverse kinematics keeping the branch nearest the previous waypoint.  A
    joint-space discontinuity larger than ``BRANCH_JUMP_RAD`` means the line
    crosses a branch change and the move is rejected.
    """
    p0 = fk(model, q0)
    dist = math.hypot(target.x - p0.x, target.y - p0.y)
    dth = wrap_angle(target.theta - p0.theta)
    n = max(2, int(math.ceil(max(dist / EE_LINE_STEP_M, abs(dth) / cfg.resolution))) + 1)
    prev = tuple(float(v) for v in q0)
    waypoints: list[tuple[float, float, float]] = [prev]
    start_sols = ik(model, p0)
    near0 = nearest_solution(start_sols, prev)
    if near0 is None or joint_distance(near0, prev) > 1e-6:
        return Infeasible("bad_input", t=0.0)
    for i in range(1, n):
        t = i / (n - 1)
        pose = Pose(p0.x + t * (target.x - p0.x), p0.y + t * (target.y - p0.y), p0.theta + t * dth)
        sols = ik(model, pose)
        if not sols:
            return Infeasible("unreachable", t=t)
        q = nearest_solution(sols, prev)
        assert q is not None
        if joint_distance(q, prev) > BRANCH_JUMP_RAD:
            return Infeasible("branch_jump", t=t)
        if cfg.singularity_reject and is_singular(q):
            return Infeasible("singular", t=t)
        waypoints.append(q)
        prev = q
    # Collision-check the waypoints plus subdivisions of any wide segment.
    qs: list[tuple[float, float, float]] = []
    ts: list[float] = []
    for i, w in enumerate(waypoints):
        qs.append(w)
        ts.append(i / (n - 1))
        if i + 1 < len(waypoints):
            seg = _segment_samples(w, waypoints[i + 1], cfg.resolution)
            for row in seg[1:-1]:
                qs.append(tuple(row))
                ts.append((i + 0.5) / (n - 1))
    Q = np.asarray(qs)
    _bump(stats, len(Q))
    hit = check_configs(model, Q, world)
    if hit is not None:
        return Infeasible("collision", t=ts[hit.sample_index], witness=hit)
    wp = tuple(waypoints)
    return Trajectory(wp, _durations(wp, cfg.speed_scale), Certificate(cfg.resolution, world.margin))


def _segment_free(model, q0, q1, cfg, world, stats) -> bool:
    Q = _segment_samples(q0, q1, cfg.resolution)
    _bump(stats, len(Q))
    return check_configs(model, Q, world) is None


def rrt(
    model: RobotModel,
    q0: Sequence[float],
    q1: Sequence[float],
    cfg: TrajectoryConfig,
    world: CollisionWorld,
    seed: int,
    stats: dict | None = None,
) -> MotionResult:
    """Goal-biased RRT over joint space with an optional shortcut pass."""
    if not model.within_limits(q1):
        return Infeasible("limits")
    _bump(stats, 2)
    if check_configs(model, np.asarray([q0]), world) is not None:
        return Infeasible("bad_input", t=0.0)
    hit = check_configs(model, np.asarray([q1]), world)
    if hit is not None:
        return Infeasible("collision", t=1.0, witness=hit)
    rng = np.random.default_rng(seed)
    lo = np.asarray([l for l, _ in model.limits])
    hi = np.asarray([h for _, h in model.limits])
    goal = np.asarray(q1, dtype=float)
    nodes = np.zeros((cfg.rrt_max_iters + 1, 3))
    nodes[0] = np.asarray(q0, dtype=float)
    parents = np.zeros(cfg.rrt_max_iters + 1, dtype=np.int64)
    parents[0] = -1
    count = 1
    for _ in range(cfg.rrt_max_iters):
        target = goal if rng.random() < cfg.rrt_goal_bias else rng.uniform(lo, hi)
        d2 = np.sum((nodes[:count] - target) ** 2, axis=1)
        ni = int(np.argmin(d2))
        near = nodes[ni]
        d = math.sqrt(float(d2[ni]))
        if d < 1e-12:
            continue
        step = min(cfg.rrt_step, d)
        qnew = near + (target - near) * (step / d)
        if not _segment_free(model, near, qnew, cfg, world, stats):
            continue
        nodes[count] = qnew
        parents[count] = ni
        count += 1
        if joint_distance(qnew, goal) <= cfg.rrt_step and _segment_free(
            model, qnew, goal, cfg, world, stats
        ):
            path = [tuple(goal)]
            i = count - 1
            while i >= 0:
                path.append(tuple(nodes[i]))
                i = parents[i]
            path.reverse()
            traj = Trajectory(
                tuple(path),
                _durations(path, cfg.speed_scale),
                Certificate(cfg.resolution, world.margin),
            )
            if cfg.shortcut_iters > 0:
                traj = shortcut(model, traj, world, cfg.shortcut_iters, seed + 1, cfg, stats)
            return traj
    return Infeasible("exhausted")


def _path_point(waypoints, cum, u):
    """Configuration at arc-length parameter ``u`` plus its segment index."""
    i = int(np.searchsorted(cum, u, side="right")) - 1
    i = max(0, min(i, len(waypoints) - 2))
    seg = cum[i + 1] - cum[i]
    t = 0.0 if seg <= 0 else (u - cum[i]) / seg
    return _interp(waypoints[i], waypoints[i + 1], t), i


def shortcut(
    model: RobotModel,
    traj: Trajectory,
    world: CollisionWorld,
    iters: int,
    seed: int,
    cfg: TrajectoryConfig,
    stats: dict | None = None,
) -> Trajectory:
    """Randomized shortcutting; never increases joint-space path length."""
    rng = np.random.default_rng(seed)
    waypoints = list(traj.waypoints)
    for _ in range(iters):
        if len(waypoints) < 3:
            break
        cum = np.concatenate(
            [[0.0], np.cumsum([joint_distance(a, b) for a, b in zip(waypoints, waypoints[1:])])]
        )
        total = float(cum[-1])
        if total < 1e-12:
            break
        u1, u2 = sorted(rng.uniform(0.0, total, size=2))
        if u2 - u1 < 1e-9:
            continue
        qa, ia = _path_point(waypoints, cum, u1)
        qb, ib = _path_point(waypoints, cum, u2)
        direct = joint_distance(qa, qb)
        if direct >= (u2 - u1) - 1e-12:
            continue
        if not _segment_free(model, qa, qb, cfg, world, stats):
            continue
        waypoints = waypoints[: ia + 1] + [qa, qb] + waypoints[ib + 1 :]
        waypoints = [
            w for i, w in enumerate(waypoints) if i == 0 or joint_distance(w, waypoints[i - 1]) > 1e-12
        ]
    wps = tuple(waypoints)
    return Trajectory(wps, _durations(wps, cfg.speed_scale), traj.certificate)


def recheck(
    model: RobotModel,
    traj: Trajectory,
    world: CollisionWorld,
    resolution: float,
    stats: dict | None = None,
) -> CollisionWitness | None:
    """Densely re-validate a trajectory at the given resolution."""
    qs: list[tuple[float, float, float]] = []
    for a, b in zip(traj.waypoints, traj.waypoints[1:]):
        seg = _segment_samples(a, b, resolution)
        qs.extend(tuple(r) for r in seg)
    if not qs:
        qs = [traj.waypoints[0]]
    _bump(stats, len(qs))
    return check_configs(model, np.asarray(qs), world)
