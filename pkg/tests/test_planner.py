"""Plan-routine solving: skeletons, candidate enumeration, search, budgets."""

from __future__ import annotations

import math

import numpy as np
import pytest

from cellscript.geometry import TAU, Pose, pose_from
from cellscript.planner import (
    Blocked,
    Budget,
    Plan,
    PlanFailure,
    build_choice_points,
    expand_skeletons,
    plan_routine,
    replan_scope,
)
from cellscript.robot import ik, joint_distance
from cellscript.scene import load_scene
from cellscript.values import VariableMap

from conftest import (
    EXC,
    HOME,
    P,
    SQ,
    compile_doc,
    pick_place_routine,
    planner_snapshot,
    rand_scene,
    wrap_main,
)
from oracles import plan_exists_bruteforce


def cell(**over):
    tree = {
        "robot": {"links": [0.5, 0.4, 0.2], "widths": [0.06, 0.05, 0.04]},
        "home": list(HOME),
        "tools": [{"name": "vac", "polygon": []}],
        "objects": [],
        "obstacles": [],
        "services": {},
        "rng_seed": 0,
    }
    tree.update(over)
    return load_scene(tree, "plan")


def part(oid, pose, half=0.03, k=1, grasps=None):
    return {
        "id": oid,
        "type": "part",
        "pose": list(pose),
        "polygon": SQ(half),
        "k": k,
        "grasps": grasps or [{"tool": 0, "pose": [-(half + 0.05), 0.0, 0.0], "score": 0.9}],
    }


def plan_only(nodes, edges):
    return compile_doc(wrap_main(nodes, edges)).routines["cycle"]


def pick_routine(**pick_params):
    return plan_only(
        [
            {"id": "pe", "kind": "PlanRoutineEntry", "ports": P("next")},
            {"id": "pick", "kind": "MoveToPick", "params": {"srv_id": "camera", **pick_params}, "ports": P("next")},
            {"id": "px", "kind": "RoutineExit"},
        ],
        [{"from": ["pe", "next"], "to": "pick"}, {"from": ["pick", "next"], "to": "px"}],
    )


def snapshot_for(objs, **extra):
    vm = planner_snapshot(objs)
    return vm.apply([]).apply([]) if not extra else VariableMap({**{n: vm.get(n) for n in vm.names()}, **extra})


# --- agreement with exhaustive enumeration ------------------------------------------


def test_solver_agrees_with_exhaustive_enumeration_on_random_cells():
    disagreements = []
    for seed in range(25):
        rng = np.random.default_rng(10_000 + seed)
        scene, objs, tgt = rand_scene(rng)
        routine = pick_place_routine(tgt)
        outcome = plan_routine(routine, planner_snapshot(objs), scene)
        assert not isinstance(outcome, Blocked)
        got = isinstance(outcome, Plan)
        want = plan_exists_bruteforce(
            scene, HOME, objs, [("pick", None), ("place", tuple(tgt)), ("drop",)]
        )
        if got != want:
            disagreements.append((seed, got, want))
    assert disagreements == []


def test_solved_plan_carries_certified_trajectories_and_its_read_set():
    scene = cell(objects=[part("a", (0.6, 0.1, 0.2))])
    routine = pick_place_routine((0.1, 0.55, 0.0))
    outcome = plan_routine(routine, planner_snapshot([part("a", (0.6, 0.1, 0.2))]), scene)
    assert isinstance(outcome, Plan)
    assert [s.node_id for s in outcome.steps] == ["pe", "pick", "stow", "drop", "px"]
    for step in outcome.steps:
        if step.node_id in ("pick", "stow"):
            traj = step.online.trajectory
            assert traj is not None and traj.certificate.collision_free
            assert traj.certificate.resolution > 0
    assert {"jps", "active_tool", "picked_objects", "camera_perception"} <= outcome.read_set
    assert outcome.read_values["jps"] == list(HOME)
    assert outcome.stats.candidates_tried >= 1
    assert outcome.online_for("pick") is not None and outcome.online_for("nope") is None


# --- skeleton expansion ----------------------------------------------------------------


def test_constant_branches_prune_to_a_single_skeleton():
    routine = plan_only(
        [
            {"id": "pe", "kind": "PlanRoutineEntry", "ports": P("next")},
            {"id": "set", "kind": "SetVariable", "params": {"var": "i", "value": 3}, "ports": P("next")},
            {"id": "br", "kind": "CounterBranch", "params": {"var": "i", "op": "lt", "value": 5}, "ports": P("lt", "ge")},
            {"id": "low", "kind": "SetVariable", "params": {"var": "lane", "value": "low"}, "ports": P("next")},
            {"id": "high", "kind": "SetVariable", "params": {"var": "lane", "value": "high"}, "ports": P("next")},
            {"id": "px", "kind": "RoutineExit"},
        ],
        [
            {"from": ["pe", "next"], "to": "set"},
            {"from": ["set", "next"], "to": "br"},
            {"from": ["br", "lt"], "to": "low"},
            {"from": ["br", "ge"], "to": "high"},
            {"from": ["low", "next"], "to": "px"},
            {"from": ["high", "next"], "to": "px"},
        ],
    )
    skeletons = expand_skeletons(routine, VariableMap({}))
    assert not isinstance(skeletons, Blocked)
    assert len(skeletons) == 1
    assert skeletons[0].node_ids() == ["pe", "set", "br", "low", "px"]


def test_branch_on_unknowable_variable_blocks_planning():
    routine = plan_only(
        [
            {"id": "pe", "kind": "PlanRoutineEntry", "ports": P("next")},
            {"id": "ping", "kind": "CallService", "params": {"srv_id": "conveyor", "response_save_var": "belt"}, "ports": P("next")},
            {"id": "br", "kind": "CounterBranch", "params": {"var": "belt", "op": "lt", "value": 1}, "ports": P("lt", "ge")},
            {"id": "px", "kind": "RoutineExit"},
        ],
        [
            {"from": ["pe", "next"], "to": "ping"},
            {"from": ["ping", "next"], "to": "br"},
            {"from": ["br", "lt"], "to": "px"},
            {"from": ["br", "ge"], "to": "px"},
        ],
    )
    outcome = plan_routine(routine, VariableMap({"jps": list(HOME)}), cell())
    assert outcome == Blocked("belt")

    missing = expand_skeletons(routine, VariableMap({}))
    assert missing == Blocked("belt")  # also blocked when the service never ran


def test_poisoned_snapshot_variable_blocks_planning():
    routine = plan_only(
        [
            {"id": "pe", "kind": "PlanRoutineEntry", "ports": P("next")},
            {"id": "br", "kind": "CounterBranch", "params": {"var": "i", "op": "lt", "value": 1}, "ports": P("lt", "ge")},
            {"id": "px", "kind": "RoutineExit"},
        ],
        [
            {"from": ["pe", "next"], "to": "br"},
            {"from": ["br", "lt"], "to": "px"},
            {"from": ["br", "ge"], "to": "px"},
        ],
    )
    shadow = VariableMap({"i": 0}).as_shadow().poison("i", origin_dyn_id=9)
    assert expand_skeletons(routine, shadow) == Blocked("i")


def select_routine(t_near, t_far):
    return plan_only(
        [
            {"id": "pe", "kind": "PlanRoutineEntry", "ports": P("next")},
            {"id": "sel", "kind": "PlannerSelect", "ports": P("first", "second")},
            {"id": "m1", "kind": "MoveJoint", "params": {"target": list(t_near)}, "ports": P("next")},
            {"id": "m2", "kind": "MoveJoint", "params": {"target": list(t_far)}, "ports": P("next")},
            {"id": "px", "kind": "RoutineExit"},
        ],
        [
            {"from": ["pe", "next"], "to": "sel"},
            {"from": ["sel", "first"], "to": "m1"},
            {"from": ["sel", "second"], "to": "m2"},
            {"from": ["m1", "next"], "to": "px"},
            {"from": ["m2", "next"], "to": "px"},
        ],
    )


def test_planner_select_forks_one_skeleton_per_port_in_declared_order():
    routine = select_routine((0.1, 0.2, 0.3), (-0.4, 0.5, -0.6))
    skeletons = expand_skeletons(routine, VariableMap({"jps": list(HOME)}))
    assert [sk.select_ports["sel"] for sk in skeletons] == ["first", "second"]
    assert skeletons[0].node_ids() == ["pe", "sel", "m1", "px"]
    assert skeletons[1].node_ids() == ["pe", "sel", "m2", "px"]

    outcome = plan_routine(routine, VariableMap({"jps": list(HOME)}), cell())
    assert isinstance(outcome, Plan)
    assert outcome.online_for("sel").decisions.select_port == "first"


def test_planner_select_falls_through_to_the_next_feasible_arm():
    # First arm reaches into a wall filling the left half; second stays clear.
    wall = {"id": "bar", "polygon": [[-1.2, -1.2], [-0.15, -1.2], [-0.15, 1.2], [-1.2, 1.2]]}
    scene = cell(obstacles=[wall], home=[0.3, -0.3, 0.2])
    routine = select_routine((math.pi, 0.0, 0.0), (0.4, -0.4, 0.3))
    outcome = plan_routine(routine, VariableMap({"jps": [0.3, -0.3, 0.2]}), scene)
    assert isinstance(outcome, Plan)
    assert outcome.online_for("sel").decisions.select_port == "second"
    assert outcome.online_for("m1") is None  # the untaken arm is not in the plan
    assert [s.node_id for s in outcome.steps] == ["pe", "sel", "m2", "px"]


# --- discrete choice semantics ------------------------------------------------------------


def test_symmetry_rotation_rescues_an_unreachable_grasp():
    # The nominal grasp stands off past the workspace rim; the same grasp on the
    # object rotated by pi (k=2) approaches from the near side instead.
    obj = part("s", (1.05, 0.0, 0.0), k=2, grasps=[{"tool": 0, "pose": [0.12, 0.0, math.pi], "score": 0.9}])
    scene = cell(objects=[obj])
    anchor, gpose = Pose(1.05, 0.0, 0.0), Pose(0.12, 0.0, math.pi)
    assert ik(scene.model, anchor.compose(gpose)) == []
    assert ik(scene.model, anchor.compose(Pose.rot(TAU / 2)).compose(gpose)) != []

    outcome = plan_routine(pick_routine(), planner_snapshot([obj]), scene)
    assert isinstance(outcome, Plan)
    decisions = outcome.online_for("pick").decisions
    assert decisions.symmetry_index == 1
    assert decisions.picked[0][0] == "s"


def test_ik_branch_choice_prefers_the_solution_nearest_the_start():
    obj = part("a", (0.6, 0.1, 0.2))
    scene = cell(objects=[obj])
    outcome = plan_routine(pick_routine(), planner_snapshot([obj]), scene)
    assert isinstance(outcome, Plan)
    online = outcome.online_for("pick")
    flange = pose_from(obj["pose"]).compose(pose_from(obj["grasps"][0]["pose"]))
    sols = ik(scene.model, flange)
    nearest = min(range(len(sols)), key=lambda i: joint_distance(sols[i], HOME))
    assert online.decisions.ik_branch == nearest
    assert online.trajectory.end == pytest.approx(sols[nearest], abs=1e-12)


def test_tools_are_tried_in_index_order_not_score_order():
    obj = part(
        "a",
        (0.6, 0.1, 0.0),
        grasps=[
            {"tool": 1, "pose": [-0.08, 0.0, 0.0], "score": 0.9},
            {"tool": 0, "pose": [0.08, 0.0, math.pi], "score": 0.5},
        ],
    )
    scene = cell(objects=[obj], tools=[{"name": "vac", "polygon": []}, {"name": "jaw", "polygon": []}])
    outcome = plan_routine(pick_routine(), planner_snapshot([obj]), scene)
    assert isinstance(outcome, Plan)
    decisions = outcome.online_for("pick").decisions
    assert decisions.tool_index == 0
    assert decisions.grasp_index == 1  # the lower-scored grasp on the lower-indexed tool


def test_grasp_filters_are_honored_by_the_solver():
    a = part("a", (-0.5, 0.5, 0.0))  # parked away from the approach to b
    b = {**part("b", (0.5, -0.3, 0.0)), "type": "tube"}
    scene = cell(objects=[a, b])
    outcome = plan_routine(pick_routine(filters={"types": ["tube"]}), planner_snapshot([a, b]), scene)
    assert isinstance(outcome, Plan)
    assert outcome.online_for("pick").decisions.picked[0][0] == "b"


# --- pallet moves ------------------------------------------------------------------------


def pallet_routine():
    return plan_only(
        [
            {"id": "pe", "kind": "PlanRoutineEntry", "ports": P("next")},
            {"id": "pick", "kind": "MoveToPick", "params": {"srv_id": "camera"}, "ports": P("next")},
            {"id": "pal", "kind": "PalletizationMove", "params": {"srv_id": "tray", "state_var": "tray"}, "ports": P("next")},
            {"id": "px", "kind": "RoutineExit"},
        ],
        [
            {"from": ["pe", "next"], "to": "pick"},
            {"from": ["pick", "next"], "to": "pal"},
            {"from": ["pal", "next"], "to": "px"},
        ],
    )


def test_pallet_move_binds_the_first_feasible_slot_and_records_it():
    obj = part("a", (0.6, 0.1, 0.0))
    scene = cell(
        objects=[obj],
        services={"tray": {"type": "pallet", "size": [0.2, 0.2], "origin": [0.0, 0.55, 0.0], "gap": 0.01}},
    )
    vm = VariableMap(
        {
            "jps": list(HOME),
            "active_tool": 0,
            "picked_objects": [],
            "placed_objects": [],
            "tray": [],
            "camera_perception": {"objects": [obj]},
        }
    )
    outcome = plan_routine(pallet_routine(), vm, scene)
    assert isinstance(outcome, Plan)
    decisions = outcome.online_for("pal").decisions
    assert decisions.target_index == 0
    record = decisions.pallet_record
    assert record["index"] == 0
    assert record["footprint"] == pytest.approx([0.06, 0.06])
    # first shelf slot center, in the pallet's world frame
    assert record["pose"] == pytest.approx([0.03, 0.58, 0.0])
    assert "tray" in outcome.read_set


def test_pallet_move_continues_from_the_replayed_fill_state():
    obj = part("a", (0.6, 0.1, 0.0))
    scene = cell(
        objects=[obj],
        services={"tray": {"type": "pallet", "size": [0.2, 0.2], "origin": [0.0, 0.55, 0.0], "gap": 0.01}},
    )
    vm = VariableMap(
        {
            "jps": list(HOME),
            "active_tool": 0,
            "picked_objects": [],
            "placed_objects": [],
            "tray": [{"index": 0, "pose": [0.03, 0.58, 0.0], "footprint": [0.06, 0.06]}],
            "camera_perception": {"objects": [obj]},
        }
    )
    outcome = plan_routine(pallet_routine(), vm, scene)
    assert isinstance(outcome, Plan)
    record = outcome.online_for("pal").decisions.pallet_record
    assert record["index"] == 1
    assert record["pose"][0] == pytest.approx(0.10)  # second slot along the row


# --- external trajectories ------------------------------------------------------------------


def by_var_routine():
    return plan_only(
        [
            {"id": "pe", "kind": "PlanRoutineEntry", "ports": P("next")},
            {"id": "mv", "kind": "MoveTrajectoryByVariable", "params": {"var": "path"}, "ports": P("next")},
            {"id": "px", "kind": "RoutineExit"},
        ],
        [{"from": ["pe", "next"], "to": "mv"}, {"from": ["mv", "next"], "to": "px"}],
    )


def path_tree(start, end):
    return {
        "waypoints": [list(start), list(end)],
        "durations": [0.5],
        "certificate": {"resolution": 0.0, "margin": 0.0, "collision_free": False},
    }


def test_variable_trajectory_is_rechecked_and_recertified():
    scene = cell()
    vm = VariableMap({"jps": list(HOME), "path": path_tree(HOME, (0.2, -0.3, 0.1))})
    outcome = plan_routine(by_var_routine(), vm, scene)
    assert isinstance(outcome, Plan)
    traj = outcome.online_for("mv").trajectory
    assert traj.certificate.collision_free and traj.certificate.resolution == pytest.approx(0.01)
    assert traj.waypoints[0] == HOME


def test_variable_trajectory_must_start_where_the_arm_is():
    vm = VariableMap({"jps": list(HOME), "path": path_tree((0.0, 0.0, 0.0), (0.2, -0.3, 0.1))})
    outcome = plan_routine(by_var_routine(), vm, cell())
    assert isinstance(outcome, PlanFailure)
    assert "does not start" in replan_scope(outcome)


def test_variable_trajectory_through_an_obstacle_is_refused():
    wall = {"id": "bar", "polygon": SQ(0.1), "pose": [0.62, 0.36, 0.0]}
    scene = cell(obstacles=[wall])
    vm = VariableMap({"jps": [-1.2, 0.0, 0.0], "path": path_tree((-1.2, 0.0, 0.0), (1.2, 0.0, 0.0))})
    outcome = plan_routine(by_var_routine(), vm, scene)
    assert isinstance(outcome, PlanFailure)
    assert outcome.reasons["skeleton_0"]["mv"]["trajectory"]["failures"] == {"collision": 1}


# --- failure reporting and budgets -------------------------------------------------------------


def test_unreachable_object_yields_a_reason_tree():
    obj = part("far", (5.0, 0.0, 0.0))
    outcome = plan_routine(pick_routine(), planner_snapshot([obj]), cell(objects=[obj]))
    assert isinstance(outcome, PlanFailure)
    rec = outcome.reasons["skeleton_0"]["pick"]["grasp_candidate"]
    assert rec["failures"].get("unreachable", 0) >= 1
    text = replan_scope(outcome)
    assert "pick" in text and "unreachable" in text


def test_overtight_filters_yield_an_empty_domain():
    obj = part("a", (0.6, 0.1, 0.0))
    outcome = plan_routine(
        pick_routine(filters={"min_score": 2.0}), planner_snapshot([obj]), cell(objects=[obj])
    )
    assert isinstance(outcome, PlanFailure)
    assert outcome.reasons["skeleton_0"]["pick"]["grasp_candidate"]["empty"]
    assert "no grasp candidates" in replan_scope(outcome)


def test_candidate_budget_exhaustion_is_reported():
    obj = part("a", (0.6, 0.1, 0.0))
    outcome = plan_routine(
        pick_routine(), planner_snapshot([obj]), cell(objects=[obj]), budget=Budget(max_candidates=0)
    )
    assert isinstance(outcome, PlanFailure)
    assert outcome.reasons["budget"] == {"kind": "candidate", "limit": 0}
    assert "budget" in replan_scope(outcome)
    assert outcome.stats.candidates_tried == 1


def test_time_budget_exhaustion_is_reported():
    obj = part("a", (0.6, 0.1, 0.0))
    outcome = plan_routine(
        pick_routine(), planner_snapshot([obj]), cell(objects=[obj]), budget=Budget(time_ms=0.0)
    )
    assert isinstance(outcome, PlanFailure)
    assert outcome.reasons["budget"]["kind"] == "time"
    assert outcome.stats.time_ms >= 0.0


def test_determinism_across_repeat_solves():
    rng = np.random.default_rng(77)
    scene, objs, tgt = rand_scene(rng)
    routine = pick_place_routine(tgt)
    a = plan_routine(routine, planner_snapshot(objs), scene, seed=3)
    b = plan_routine(routine, planner_snapshot(objs), scene, seed=3)
    assert type(a) is type(b)
    if isinstance(a, Plan):
        for sa, sb in zip(a.steps, b.steps):
            assert sa.node_id == sb.node_id and sa.port == sb.port
            ta = sa.online.trajectory if sa.online else None
            tb = sb.online.trajectory if sb.online else None
            assert (ta is None) == (tb is None)
            if ta is not None:
                assert ta.waypoints == tb.waypoints


# --- choice-point inspection -----------------------------------------------------------------


def test_choice_points_enumerate_the_decision_surface():
    obj = part("a", (0.6, 0.1, 0.0), k=4)
    scene = cell(objects=[obj])
    routine = pick_place_routine((0.1, 0.55, 0.0))
    skeletons = expand_skeletons(routine, planner_snapshot([obj]))
    points = build_choice_points(skeletons[0], planner_snapshot([obj]), scene)
    by_kind = {(p.owner, p.kind): p for p in points}
    assert by_kind[("pick", "grasp_candidate")].domain == 1
    assert by_kind[("pick", "symmetry_index")].domain == 4
    assert by_kind[("pick", "ik_branch")].domain == 2
    assert by_kind[("stow", "symmetry_index")].depends_on == ("pick",)
