"""Kinematics of the planar 3R arm: forward chain, the two-branch analytic
inverse, and the batched collision checker built on top of them."""

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cellscript.geometry import Pose, rectangle, wrap_angle
from cellscript.robot import (
    IK_RESIDUAL_TOL,
    SINGULAR_BAND,
    CollisionWorld,
    RobotModel,
    check_configs,
    collide,
    fk,
    fk_points,
    ik,
    nearest_solution,
    robot_from_tree,
)

import oracles

M = RobotModel()
joint = st.floats(min_value=-math.pi + 1e-6, max_value=math.pi, allow_nan=False)


# --- forward ------------------------------------------------------------------


def test_fk_frozen_value():
    # independently computed with 50-digit arithmetic, then frozen
    p = fk(M, (0.3, -0.4, 0.9))
    assert p.x == pytest.approx(1.8906811632174598, abs=1e-12)
    assert p.y == pytest.approx(0.3591246915237816, abs=1e-12)
    assert p.theta == pytest.approx(0.8, abs=1e-12)


@given(joint, joint, joint)
def test_fk_matches_highprec(q1, q2, q3):
    q = (q1, q2, q3)
    x, y, th = oracles.fk_highprec(M.lengths, (0.0, 0.0, 0.0), q)
    p = fk(M, q)
    assert p.x == pytest.approx(x, abs=1e-12)
    assert p.y == pytest.approx(y, abs=1e-12)
    assert p.theta == pytest.approx(wrap_angle(th), abs=1e-12)


def test_fk_respects_base():
    base = Pose(0.5, -0.25, math.pi / 2)
    m = RobotModel(base=base)
    q = (0.1, 0.2, 0.3)
    x, y, th = oracles.fk_highprec(m.lengths, (base.x, base.y, base.theta), q)
    p = fk(m, q)
    assert (p.x, p.y) == pytest.approx((x, y), abs=1e-12)
    assert p.theta == pytest.approx(wrap_angle(th), abs=1e-12)


def test_fk_points_chain():
    pts = fk_points(M, (0.0, 0.0, 0.0))
    assert np.allclose(pts, [[0, 0], [1.0, 0], [1.8, 0], [2.0, 0]])


# --- inverse ------------------------------------------------------------------


def test_ik_frozen_solutions():
    sols = ik(M, Pose(1.2, 0.6, math.pi / 2))
    assert len(sols) == 2
    want = [
        (1.006214588916, -1.595798931694, 2.160380669574),
        (-0.362713480122, 1.595798931694, 0.337710875223),
    ]
    for got, exp in zip(sols, want):
        assert got == pytest.approx(exp, abs=1e-9)
    # elbow-down branch (q2 <= 0) is reported first
    assert sols[0][1] <= 0.0 <= sols[1][1]


def test_ik_matches_gridsearch_oracle():
    rng = np.random.default_rng(3)
    for _ in range(12):
        target = Pose(*rng.uniform(-1.6, 1.6, 2), rng.uniform(-math.pi, math.pi))
        got = ik(M, target)
        want = oracles.ik_gridsearch(M, target)
        assert len(got) == len(want)
        for g, w in zip(got, want):
            assert g == pytest.approx(w, abs=1e-7)


@given(joint, joint, joint)
def test_ik_roundtrips_fk(q1, q2, q3):
    q = (q1, q2, q3)
    if abs(math.sin(q2)) <= 1e-4:  # stay clear of the elbow singularity
        return
    sols = ik(M, fk(M, q))
    assert 1 <= len(sols) <= 2
    # per-joint residual on the circle: q3 = pi and -pi name the same joint angle
    best = min(max(abs(wrap_angle(a - b)) for a, b in zip(s, q)) for s in sols)
    assert best < 1e-9


def test_ik_unreachable_returns_empty():
    r = sum(M.lengths) + 0.2
    assert ik(M, Pose(r, 0.0, 0.0)) == []
    # inside the inner annulus hole (wrist closer than |l1 - l2|)
    assert ik(M, Pose(0.1, 0.0, 0.0)) == []


def test_ik_singular_band_single_solution():
    # fully stretched arm: the two elbow branches coincide
    target = fk(M, (0.4, 0.0, -0.1))
    sols = ik(M, target)
    assert len(sols) == 1
    assert abs(math.sin(sols[0][1])) <= SINGULAR_BAND


def test_ik_respects_joint_limits():
    tight = RobotModel(limits=((0.0, 1.7), (-math.pi, math.pi), (-math.pi, math.pi)))
    target = Pose(1.2, 0.6, math.pi / 2)
    sols = ik(tight, target)
    # the q1 = 1.006 branch survives, the q1 = -0.363 branch is filtered
    assert len(sols) == 1
    assert sols[0][0] == pytest.approx(1.006214588916, abs=1e-9)


def test_ik_verifies_residual():
    for q in [(0.2, -0.7, 0.4), (-1.1, 1.3, -2.0)]:
        for s in ik(M, fk(M, q)):
            p = fk(M, s)
            t = fk(M, q)
            assert math.hypot(p.x - t.x, p.y - t.y) < IK_RESIDUAL_TOL
            assert abs(wrap_angle(p.theta - t.theta)) < IK_RESIDUAL_TOL


def test_nearest_solution():
    sols = [(0.0, 0.5, 0.0), (0.1, 0.1, 0.1)]
    assert nearest_solution(sols, (0.1, 0.0, 0.1)) == (0.1, 0.1, 0.1)
    assert nearest_solution([], (0, 0, 0)) is None


def test_robot_from_tree_defaults():
    m = robot_from_tree({})
    assert m.lengths == (1.0, 0.8, 0.2)
    m2 = robot_from_tree({"links": [0.5, 0.4, 0.2], "base": [1, 2, 0.5]})
    assert m2.lengths == (0.5, 0.4, 0.2)
    assert m2.base.x == 1 and m2.base.theta == 0.5


# --- collision checking ---------------------------------------------------------


def test_collision_world_witness_names():
    wall = rectangle(0.2, 0.2, (0.5, 0.0))
    world = CollisionWorld.build([("wall", wall)], [])
    w = collide(M, (0.0, -0.4, 0.2), world)
    assert w is not None
    assert w.first == "link1" and w.second == "wall"

    free = CollisionWorld.build([], [])
    assert collide(M, (0.0, -0.4, 0.2), free) is None


def test_collision_world_attached_witness():
    # payload spans x in [2.04, 2.12]; the wall starts at 2.12, clear of link3
    payload = rectangle(0.08, 0.08, (0.08, 0.0))
    wall = rectangle(0.08, 0.08, (2.16, 0.0))
    world = CollisionWorld.build([("wall", wall)], [("part", payload)])
    w = collide(M, (0.0, 0.0, 0.0), world)
    assert w is not None
    assert w.first == "part" and w.second == "wall"


def test_check_configs_reports_first_sample():
    wall = rectangle(0.2, 0.2, (1.9, 0.6))
    world = CollisionWorld.build([("wall", wall)], [])
    qs = np.array([[0.0, -0.5, 0.0], [0.2, -0.2, 0.0], [0.3, 0.0, 0.2], [0.35, 0.0, 0.0]])
    w = check_configs(M, qs, world)
    assert w is not None
    assert collide(M, tuple(qs[w.sample_index]), world) is not None
    for i in range(w.sample_index):
        assert collide(M, tuple(qs[i]), world) is None
    assert check_configs(M, np.zeros((0, 3)), world) is None


def test_collide_agrees_with_point_sampling():
    rng = np.random.default_rng(17)
    small = RobotModel(lengths=(0.5, 0.4, 0.2), widths=(0.06, 0.05, 0.04))
    disagreements = 0
    for _ in range(60):
        polys = []
        for j in range(int(rng.integers(0, 3))):
            w, h = rng.uniform(0.05, 0.3, 2)
            cx, cy = rng.uniform(-1.0, 1.0, 2)
            polys.append((f"w{j}", rectangle(float(w), float(h), (float(cx), float(cy)))))
        q = tuple(rng.uniform(-math.pi, math.pi, 3))
        world = CollisionWorld.build(polys, [])
        got = collide(small, q, world) is not None
        slack = oracles.sampled_min_slack(small, q, world, res=0.001)
        if abs(slack) <= 0.002:
            continue  # inside the sampling error band; verdicts may differ
        if got != (slack <= 0.0):
            disagreements += 1
    assert disagreements == 0
