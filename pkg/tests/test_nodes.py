"""Statement semantics: execute/simulate parity, grasp filtering, branch tables."""

from __future__ import annotations

import math

import pytest

from cellscript.geometry import Pose, pose_from
from cellscript.graph import Node, NodeKind, Port
from cellscript.motion import Certificate, Trajectory
from cellscript.nodes import (
    DecisionRecord,
    NodeExecutionError,
    OnlineParams,
    Simulated,
    Unsimulatable,
    counter_ports,
    execute_node,
    grasp_filter,
    perception_var,
    reads,
    response_var,
    simulate_node,
    writes,
)
from cellscript.robot import RobotModel, fk
from cellscript.values import ListAppend, ListRemoveByKey, SetVar, VariableMap

MODEL = RobotModel()


class StubServices:
    """Records calls and returns canned (or default-ok) responses."""

    def __init__(self, responses=None):
        self.calls: list[tuple[str, dict, int]] = []
        self.responses = dict(responses or {})

    def call(self, srv_id, request, dyn_id):
        self.calls.append((srv_id, dict(request), dyn_id))
        resp = self.responses.get(srv_id)
        if isinstance(resp, Exception):
            raise resp
        if resp is None:
            resp = {"meta": {"ts_ms": 0.0, "msg_id": dyn_id, "srv": srv_id}, "payload": {"ok": True}}
        return resp


def mk(kind, params=None, ports=("next",), node_id="n"):
    built = tuple(p if isinstance(p, Port) else Port(p) for p in ports)
    return Node(node_id, kind, params or {}, built)


def traj(*wps):
    wps = wps or ((0.0, 0.0, 0.0), (0.2, -0.3, 0.1))
    durs = tuple(max(abs(a - b) for a, b in zip(w0, w1)) for w0, w1 in zip(wps, wps[1:]))
    return Trajectory(tuple(wps), durs, Certificate(resolution=0.01, margin=0.001))


def vm_of(**entries):
    return VariableMap(dict(entries))


# --- grasp_filter ------------------------------------------------------------------


def obj(oid, otype="box", grasps=()):
    return {"id": oid, "type": otype, "pose": [0.0, 0.0, 0.0], "grasps": list(grasps)}


def g(score, tool=0, **extra):
    return {"score": score, "tool": tool, "pose": [0.0, 0.0, 0.0], **extra}


def test_grasp_filter_orders_by_score_then_id_then_index():
    objects = [
        obj("b", grasps=[g(0.5), g(0.9)]),
        obj("a", grasps=[g(0.9), g(0.5)]),
        obj("c", grasps=[g(0.9)]),
    ]
    out = grasp_filter(objects, None)
    assert [(o["id"], gi) for o, gi in out] == [
        ("a", 0),  # ties on score break by object id...
        ("b", 1),
        ("c", 0),
        ("a", 1),  # ...then the 0.5 tier in the same id order
        ("b", 0),
    ]


def test_grasp_filter_type_tool_and_score_filters():
    objects = [
        obj("a", "box", grasps=[g(0.9, tool=0), g(0.8, tool=1)]),
        obj("b", "tube", grasps=[g(0.7, tool=0)]),
    ]
    assert [(o["id"], gi) for o, gi in grasp_filter(objects, {"types": ["tube"]})] == [("b", 0)]
    assert [(o["id"], gi) for o, gi in grasp_filter(objects, {"tool_index": 1})] == [("a", 1)]
    assert [(o["id"], gi) for o, gi in grasp_filter(objects, {"min_score": 0.75})] == [
        ("a", 0),
        ("a", 1),
    ]


def test_grasp_filter_max_picked_gates_multi_object_grasps():
    pair = obj("a", grasps=[g(0.9, object_ids=["a", "b"]), g(0.4)])
    assert [(o["id"], gi) for o, gi in grasp_filter([pair], None)] == [("a", 1)]
    both = grasp_filter([pair], {"max_picked": 2})
    assert [(o["id"], gi) for o, gi in both] == [("a", 0), ("a", 1)]


def test_grasp_filter_missing_score_defaults_to_zero():
    o = obj("a", grasps=[{"tool": 0, "pose": [0, 0, 0]}, g(0.1)])
    assert [gi for _o, gi in grasp_filter([o], None)] == [1, 0]


# --- branch table ------------------------------------------------------------------


@pytest.mark.parametrize(
    "op,expected",
    [
        ("lt", ("lt", "ge")),
        ("le", ("le", "gt")),
        ("gt", ("gt", "le")),
        ("ge", ("ge", "lt")),
        ("eq", ("eq", "ne")),
        ("ne", ("ne", "eq")),
    ],
)
def test_counter_ports_pair_each_op_with_its_negation(op, expected):
    assert counter_ports(op) == expected


@pytest.mark.parametrize(
    "op,value,limit,taken",
    [("lt", 2, 5, "lt"), ("lt", 5, 5, "ge"), ("ge", 5, 5, "ge"), ("eq", 3.0, 3, "eq"), ("ne", 3, 3, "eq")],
)
def test_counter_branch_takes_port_from_comparison(op, value, limit, taken):
    node = mk(NodeKind.COUNTER_BRANCH, {"var": "i", "op": op, "value": limit}, ports=counter_ports(op))
    vm = vm_of(i=value)
    ex = execute_node(node, vm, None, StubServices(), MODEL, 1)
    sim = simulate_node(node, vm.as_shadow(), None, MODEL)
    assert ex.taken_port == taken
    assert isinstance(sim, Simulated) and sim.taken_port == taken
    assert ex.mutations == () and ex.side_effects == ()


def test_counter_branch_rejects_non_numeric_variable():
    node = mk(NodeKind.COUNTER_BRANCH, {"var": "i", "op": "lt", "value": 5}, ports=("lt", "ge"))
    with pytest.raises(NodeExecutionError) as err:
        execute_node(node, vm_of(i="three"), None, StubServices(), MODEL, 1)
    assert err.value.code == "TYPE_MISMATCH"
    with pytest.raises(NodeExecutionError):
        execute_node(node, vm_of(i=True), None, StubServices(), MODEL, 1)


# --- execute/simulate parity for pure statements ------------------------------------


def test_set_variable_parity():
    node = mk(NodeKind.SET_VARIABLE, {"var": "flag", "value": {"n": 3}})
    vm = vm_of()
    ex = execute_node(node, vm, None, StubServices(), MODEL, 1)
    sim = simulate_node(node, vm.as_shadow(), None, MODEL)
    assert ex.taken_port == sim.taken_port == "next"
    assert ex.mutations == sim.mutations == (SetVar("flag", {"n": 3}),)
    assert ex.side_effects == ()


def test_functor_mutation_parity_and_unknown_functor():
    node = mk(NodeKind.FUNCTOR_VARIABLE_MUTATION, {"functor": "counter.inc", "args": {"var": "i", "step": 2}})
    vm = vm_of(i=3)
    ex = execute_node(node, vm, None, StubServices(), MODEL, 1)
    sim = simulate_node(node, vm.as_shadow(), None, MODEL)
    assert ex.mutations == sim.mutations == (SetVar("i", 5),)

    bogus = mk(NodeKind.FUNCTOR_VARIABLE_MUTATION, {"functor": "no.such", "args": {}})
    with pytest.raises(NodeExecutionError) as err:
        execute_node(bogus, vm, None, StubServices(), MODEL, 1)
    assert err.value.code == "UNKNOWN_FUNCTOR"
    assert isinstance(simulate_node(bogus, vm.as_shadow(), None, MODEL), Unsimulatable)


def test_entry_exit_and_invoke_are_pure_port_traversals():
    services = StubServices()
    entry = mk(NodeKind.ROUTINE_ENTRY, ports=("next",))
    assert execute_node(entry, vm_of(), None, services, MODEL, 1).taken_port == "next"
    exit_node = mk(NodeKind.ROUTINE_EXIT, ports=())
    assert execute_node(exit_node, vm_of(), None, services, MODEL, 1).taken_port is None
    sim = simulate_node(exit_node, vm_of().as_shadow(), None, MODEL)
    assert isinstance(sim, Simulated) and sim.taken_port is None
    assert services.calls == []


# --- service calls -------------------------------------------------------------------


def test_call_service_stores_response_and_records_effect():
    resp = {"meta": {"ts_ms": 10.0, "msg_id": 7, "srv": "conveyor"}, "payload": {"moved": 1}}
    services = StubServices({"conveyor": resp})
    node = mk(NodeKind.CALL_SERVICE, {"srv_id": "conveyor", "request": {"cmd": "advance"}})
    out = execute_node(node, vm_of(), None, services, MODEL, 42)
    assert out.taken_port == "next"
    assert out.mutations == (SetVar("conveyor_perception", resp),)
    assert len(out.side_effects) == 1
    fx = out.side_effects[0]
    assert fx.srv_id == "conveyor" and fx.request == {"cmd": "advance"} and fx.response is resp
    assert services.calls == [("conveyor", {"cmd": "advance"}, 42)]


def test_call_service_simulation_poisons_the_response_variable():
    node = mk(
        NodeKind.CALL_SERVICE,
        {"srv_id": "conveyor", "request": {"cmd": "advance"}, "response_save_var": "belt"},
    )
    sim = simulate_node(node, vm_of().as_shadow(), None, MODEL)
    assert isinstance(sim, Simulated)
    assert sim.mutations == () and sim.poisons == ("belt",) and not sim.guessed


def test_response_and_perception_variable_naming():
    assert response_var(mk(NodeKind.CALL_SERVICE, {"srv_id": "lidar"})) == "lidar_perception"
    assert (
        response_var(mk(NodeKind.CALL_SERVICE, {"srv_id": "lidar", "response_save_var": "sweep"}))
        == "sweep"
    )
    assert perception_var(mk(NodeKind.MOVE_TO_PICK, {"srv_id": "camera"})) == "camera_perception"
    assert perception_var(mk(NodeKind.MOVE_TO_PICK, {})) == "perception_perception"


# --- movement statements --------------------------------------------------------------


def test_move_joint_requires_planned_parameters():
    node = mk(NodeKind.MOVE_JOINT, {"target": [0.2, -0.3, 0.1]})
    with pytest.raises(NodeExecutionError) as err:
        execute_node(node, vm_of(jps=[0, 0, 0]), None, StubServices(), MODEL, 1)
    assert err.value.code == "MISSING_PLAN"
    sim = simulate_node(node, vm_of(jps=[0, 0, 0]).as_shadow(), None, MODEL)
    assert isinstance(sim, Unsimulatable)


def test_move_joint_sets_jps_and_dispatches_trajectory():
    t = traj((0.0, 0.0, 0.0), (0.2, -0.3, 0.1))
    node = mk(NodeKind.MOVE_JOINT, {"target": [0.2, -0.3, 0.1]})
    online = OnlineParams(t)
    services = StubServices()
    out = execute_node(node, vm_of(jps=[0, 0, 0]), online, services, MODEL, 9)
    assert out.taken_port == "next"
    assert out.mutations == (SetVar("jps", [0.2, -0.3, 0.1]),)
    srv, request, dyn = services.calls[0]
    assert (srv, dyn) == ("robot", 9)
    assert request["cmd"] == "execute" and request["trajectory"] == t.to_tree()
    sim = simulate_node(node, vm_of(jps=[0, 0, 0]).as_shadow(), online, MODEL)
    assert isinstance(sim, Simulated) and sim.mutations == out.mutations


def test_move_to_pick_moves_objects_between_pools():
    hold = Pose(-0.06, 0.0, math.pi)
    seen = {
        "payload": {
            "objects": [obj("a", grasps=[g(0.9)]), obj("b", grasps=[g(0.5)])]
        }
    }
    node = mk(NodeKind.MOVE_TO_PICK, {"srv_id": "camera"})
    online = OnlineParams(traj(), DecisionRecord(picked=(("a", hold),), grasp_index=0, tool_index=1))
    vm = vm_of(jps=[0, 0, 0], active_tool=0, static_env=[], camera_perception=seen, picked_objects=[])
    services = StubServices()
    out = execute_node(node, vm, online, services, MODEL, 3)
    after = vm.apply(list(out.mutations))

    remaining = after.require("camera_perception")["payload"]["objects"]
    assert [o["id"] for o in remaining] == ["b"]
    picked = after.require("picked_objects")
    assert [(o["id"], o["pose"]) for o in picked] == [("a", [hold.x, hold.y, hold.theta])]
    assert after.require("active_tool") == 1
    assert after.require("jps") == list(online.trajectory.end)
    request = services.calls[0][1]
    assert request["attach"] == [{"id": "a", "pose": [hold.x, hold.y, hold.theta]}]

    sim = simulate_node(node, vm.as_shadow(), online, MODEL)
    assert isinstance(sim, Simulated) and sim.mutations == out.mutations


def test_move_to_pick_rejects_vanished_object():
    seen = {"payload": {"objects": [obj("b", grasps=[g(0.5)])]}}
    node = mk(NodeKind.MOVE_TO_PICK, {"srv_id": "camera"})
    online = OnlineParams(traj(), DecisionRecord(picked=(("a", Pose(0, 0, 0)),)))
    vm = vm_of(jps=[0, 0, 0], active_tool=0, static_env=[], camera_perception=seen, picked_objects=[])
    with pytest.raises(NodeExecutionError) as err:
        execute_node(node, vm, online, StubServices(), MODEL, 3)
    assert err.value.code == "STALE_PLAN"
    sim = simulate_node(node, vm.as_shadow(), online, MODEL)
    assert isinstance(sim, Unsimulatable) and sim.blocking_var == "camera_perception"


def test_place_object_composes_flange_with_hold_pose():
    q = [0.3, -0.4, 0.9]
    hold = Pose(-0.05, 0.02, math.pi / 2)
    vm = vm_of(
        jps=q,
        static_env=[],
        picked_objects=[{"id": "a", "type": "box", "pose": [hold.x, hold.y, hold.theta]}],
        placed_objects=[],
    )
    node = mk(NodeKind.PLACE_OBJECT)
    services = StubServices()
    out = execute_node(node, vm, None, services, MODEL, 5)
    after = vm.apply(list(out.mutations))
    assert after.require("picked_objects") == []
    placed = after.require("placed_objects")
    assert len(placed) == 1
    want = fk(MODEL, q).compose(hold)
    got = pose_from(placed[0]["pose"])
    assert got.x == pytest.approx(want.x, abs=1e-9)
    assert got.y == pytest.approx(want.y, abs=1e-9)
    assert got.theta == pytest.approx(want.theta, abs=1e-9)
    assert services.calls == [("robot", {"cmd": "detach_all"}, 5)]

    sim = simulate_node(node, vm.as_shadow(), None, MODEL)
    assert isinstance(sim, Simulated) and sim.mutations == out.mutations


def test_palletization_move_appends_slot_record():
    record = {"slot": 2, "pose": [0.5, 0.5, 0.0]}
    node = mk(NodeKind.PALLETIZATION_MOVE, {"state_var": "tray"})
    online = OnlineParams(traj(), DecisionRecord(pallet_record=record))
    vm = vm_of(jps=[0, 0, 0], picked_objects=[], tray=[{"slot": 1}])
    out = execute_node(node, vm, online, StubServices(), MODEL, 2)
    after = vm.apply(list(out.mutations))
    assert after.require("tray") == [{"slot": 1}, record]
    sim = simulate_node(node, vm.as_shadow(), online, MODEL)
    assert isinstance(sim, Simulated) and sim.mutations == out.mutations

    broken = vm_of(jps=[0, 0, 0], picked_objects=[], tray="nope")
    with pytest.raises(NodeExecutionError) as err:
        execute_node(node, broken, online, StubServices(), MODEL, 2)
    assert err.value.code == "TYPE_MISMATCH"
    assert isinstance(simulate_node(node, broken.as_shadow(), online, MODEL), Unsimulatable)


def test_planner_select_follows_recorded_port():
    node = mk(NodeKind.PLANNER_SELECT, ports=("left", "right"))
    online = OnlineParams(None, DecisionRecord(select_port="right"))
    out = execute_node(node, vm_of(), online, StubServices(), MODEL, 1)
    assert out.taken_port == "right" and out.mutations == ()
    with pytest.raises(NodeExecutionError) as err:
        execute_node(node, vm_of(), OnlineParams(None), StubServices(), MODEL, 1)
    assert err.value.code == "MISSING_PLAN"
    assert isinstance(simulate_node(node, vm_of().as_shadow(), OnlineParams(None), MODEL), Unsimulatable)


# --- exception probe -------------------------------------------------------------------


def probe_node():
    return mk(NodeKind.EXCEPTION_PROBE, {"srv_id": "gripper"}, ports=(Port("next"), Port("lost", exception=True)))


def test_exception_probe_success_takes_normal_port():
    services = StubServices(
        {"gripper": {"meta": {}, "payload": {"ok": True, "lost": [], "holding": ["a"]}}}
    )
    vm = vm_of(picked_objects=[{"id": "a"}])
    out = execute_node(probe_node(), vm, None, services, MODEL, 4)
    assert out.taken_port == "next" and out.mutations == ()
    assert services.calls[0][1] == {"cmd": "query_holding", "expect": ["a"]}


def test_exception_probe_loss_takes_exception_port_and_drops_lost():
    services = StubServices(
        {"gripper": {"meta": {}, "payload": {"ok": False, "lost": ["a"], "holding": []}}}
    )
    vm = vm_of(picked_objects=[{"id": "a"}, {"id": "b"}])
    out = execute_node(probe_node(), vm, None, services, MODEL, 4)
    assert out.taken_port == "lost"
    assert out.mutations == (ListRemoveByKey("picked_objects", "a"),)
    after = vm.apply(list(out.mutations))
    assert [o["id"] for o in after.require("picked_objects")] == ["b"]


def test_exception_probe_simulation_guesses_success():
    sim = simulate_node(probe_node(), vm_of(picked_objects=[]).as_shadow(), None, MODEL)
    assert isinstance(sim, Simulated)
    assert sim.taken_port == "next" and sim.guessed and sim.mutations == ()


# --- speculation blocking ----------------------------------------------------------------


def test_simulation_blocks_on_poisoned_reads():
    node = mk(NodeKind.COUNTER_BRANCH, {"var": "i", "op": "lt", "value": 5}, ports=("lt", "ge"))
    shadow = vm_of(i=0).as_shadow().poison("i", origin_dyn_id=17)
    sim = simulate_node(node, shadow, None, MODEL)
    assert isinstance(sim, Unsimulatable) and sim.blocking_var == "i"

    pick = mk(NodeKind.MOVE_TO_PICK, {"srv_id": "camera"})
    shadow = (
        vm_of(jps=[0, 0, 0], active_tool=0, static_env=[], camera_perception={}, picked_objects=[])
        .as_shadow()
        .poison("camera_perception", origin_dyn_id=3)
    )
    sim = simulate_node(pick, shadow, OnlineParams(traj()), MODEL)
    assert isinstance(sim, Unsimulatable) and sim.blocking_var == "camera_perception"


# --- read/write templates -----------------------------------------------------------------


def test_read_write_templates_cover_statement_dependencies():
    pick = mk(NodeKind.MOVE_TO_PICK, {"srv_id": "camera"})
    assert reads(pick) == {"jps", "active_tool", "static_env", "camera_perception"}
    assert writes(pick) == {"jps", "picked_objects", "active_tool", "camera_perception"}

    place = mk(NodeKind.PLACE_OBJECT)
    assert reads(place) == {"jps", "picked_objects", "static_env"}
    assert writes(place) == {"picked_objects", "placed_objects"}

    branch = mk(NodeKind.COUNTER_BRANCH, {"var": "i", "op": "lt", "value": 1}, ports=("lt", "ge"))
    assert reads(branch) == {"i"} and writes(branch) == frozenset()

    joint_var = mk(NodeKind.MOVE_JOINT, {"target": {"var": "saved_q"}})
    assert reads(joint_var) == {"jps", "saved_q"} and writes(joint_var) == {"jps"}

    clear = mk(NodeKind.FUNCTOR_VARIABLE_MUTATION, {"functor": "placed.clear", "args": {}})
    assert reads(clear) == frozenset() and writes(clear) == {"placed_objects"}
