"""The node library: per-kind execution and simulation semantics.

Each statement kind implements two behaviors.  ``execute_node`` runs against
the live variable map, may call services, and returns the taken port plus a
mutation batch.  ``simulate_node`` runs against a shadow map during
speculation: it produces the same variable updates where they are knowable
ahead of time, poisons response variables it cannot know, never emits side
effects, and reports ``Unsimulatable`` when a read touches a poisoned value.

Movement kinds carry no trajectory themselves; the planner supplies
:class:`OnlineParams` (trajectory + safety certificate + the discrete
decisions) when the surrounding plan routine is invoked.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Mapping, Protocol

from . import functors as functorlib
from .geometry import Pose, pose_from
from .graph import Node, NodeKind
from .motion import Trajectory, trajectory_from_tree
from .robot import RobotModel, fk
from .values import (
    ListAppend,
    ListRemoveByKey,
    Mutation,
    RESERVED_VARS,
    SetVar,
    VariableMap,
)


class NodeExecutionError(Exception):
    def __init__(self, code: str, message: str):
        super().__init__(f"{code}: {message}")
        self.code = code


class ServiceFault(Exception):
    """Raised by a service when a request fails; carries a stable code."""

    def __init__(self, code: str, message: str):
        super().__init__(f"{code}: {message}")
        self.code = code


# Every code a NodeExecutionError or ServiceFault can carry at run time,
# plus the interpreter's own STEP_LIMIT.  Kept in one tuple so tooling can
# enumerate them.
RUNTIME_ERROR_CODES = (
    "UNHANDLED_EXCEPTION",
    "MISSING_PLAN",
    "STALE_PLAN",
    "TYPE_MISMATCH",
    "UNKNOWN_FUNCTOR",
    "UNKNOWN_KIND",
    "UNKNOWN_SERVICE",
    "SERVICE_TIMEOUT",
    "BAD_REQUEST",
    "REJECTED_UNCERTIFIED",
    "STEP_LIMIT",
)


class Services(Protocol):
    def call(self, srv_id: str, request: Mapping[str, Any], dyn_id: int) -> Mapping[str, Any]: ...


# --- planner-bound parameters -------------------------------------------------


@dataclass(frozen=True)
class DecisionRecord:
    """Discrete choices the planner resolved for one statement."""

    picked: tuple[tuple[str, Pose], ...] = ()  # (object id, flange-frame hold pose)
    grasp_index: int | None = None
    ik_branch: int | None = None
    symmetry_index: int | None = None
    target_index: int | None = None
    tool_index: int | None = None
    select_port: str | None = None
    pallet_record: Any = None  # slot record appended to the pallet state variable

    def to_tree(self) -> dict[str, Any]:
        out: dict[str, Any] = {}
        if self.picked:
            out["picked"] = [[oid, [p.x, p.y, p.theta]] for oid, p in self.picked]
        for key in ("grasp_index", "ik_branch", "symmetry_index", "target_index", "tool_index", "select_port"):
            v = getattr(self, key)
            if v is not None:
                out[key] = v
        if self.pallet_record is not None:
            out["pallet_record"] = self.pallet_record
        return out


@dataclass(frozen=True)
class OnlineParams:
    trajectory: Trajectory | None
    decisions: DecisionRecord = field(default_factory=DecisionRecord)


# --- outcomes ------------------------------------------------------------------


@dataclass(frozen=True)
class ServiceCallRecord:
    srv_id: str
    request: Mapping[str, Any]
    response: Mapping[str, Any] | None


@dataclass(frozen=True)
class NodeOutcome:
    taken_port: str | None
    mutations: tuple[Mutation, ...] = ()
    side_effects: tuple[ServiceCallRecord, ...] = ()


@dataclass(frozen=True)
class Simulated:
    taken_port: str | None
    mutations: tuple[Mutation, ...] = ()
    poisons: tuple[str, ...] = ()  # variables to poison with the node's DynId
    guessed: bool = False  # port chosen by guess; must be journaled


@dataclass(frozen=True)
class Unsimulatable:
    reason: str
    blocking_var: str | None = None


SimOutcome = Simulated | Unsimulatable


# --- shared helpers -------------------------------------------------------------


def perception_var(node: Node) -> str:
    srv = node.params.get("srv_id", "perception")
    return f"{srv}_perception"


def response_var(node: Node) -> str:
    explicit = node.params.get("response_save_var")
    if isinstance(explicit, str) and explicit:
        return explicit
    return f"{node.params.get('srv_id')}_perception"


def _target_var(params: Mapping[str, Any]) -> str | None:
    t = params.get("target")
    if isinstance(t, Mapping) and isinstance(t.get("var"), str):
        return t["var"]
    return None


def _require_online(node: Node, online: OnlineParams | None) -> OnlineParams:
    if online is None or (KIND_INFO[node.kind].moves and online.trajectory is None):
        raise NodeExecutionError("MISSING_PLAN", f"{node.kind.value} node {node.id!r} has no planned parameters")
    return online


def _perception_objects(tree: Any) -> list[dict[str, Any]]:
    if isinstance(tree, Mapping):
        payload = tree.get("payload", tree)
        objs = payload.get("objects") if isinstance(payload, Mapping) else None
        if isinstance(objs, list):
            return objs
    raise NodeExecutionError("BAD_PERCEPTION", "perception variable does not hold an object list")


def _with_objects(tree: Mapping[str, Any], objects: list[Any]) -> dict[str, Any]:
    out = dict(tree)
    if isinstance(tree.get("payload"), Mapping):
        payload = dict(tree["payload"])
        payload["objects"] = objects
        out["payload"] = payload
    else:
        out["objects"] = objects
    return out


def _first_exception_port(node: Node) -> str | None:
    for p in node.ports:
        if p.exception:
            return p.label
    return None


# --- CounterBranch comparison table ---------------------------------------------

_OPS: dict[str, tuple[Callable[[Any, Any], bool], str, str]] = {
    "lt": (lambda a, b: a < b, "lt", "ge"),
    "le": (lambda a, b: a <= b, "le", "gt"),
    "gt": (lambda a, b: a > b, "gt", "le"),
    "ge": (lambda a, b: a >= b, "ge", "lt"),
    "eq": (lambda a, b: a == b, "eq", "ne"),
    "ne": (lambda a, b: a != b, "ne", "eq"),
}


def counter_ports(op: str) -> tuple[str, str]:
    """(true-port, false-port) labels for a comparison operator."""
    _, t, f = _OPS[op]
    return t, f


def _counter_take(node: Node, vm: VariableMap) -> str:
    var = node.params["var"]
    fn, t, f = _OPS[node.params["op"]]
    value = vm.require(var)
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise NodeExecutionError("TYPE_MISMATCH", f"branch variable {var!r} is not numeric")
    return t if fn(value, node.params["value"]) else f


# --- grasp filtering -------------------------------------------------------------


def grasp_filter(
    objects: list[Mapping[str, Any]], filters: Mapping[str, Any] | None
) -> list[tuple[Mapping[str, Any], int]]:
    """Flatten object grasp annotations into ordered (object, grasp_index)
    candidates.  Ordering is stable: score descending, then object id, then
    grasp index."""
    f = filters or {}
    types = f.get("types")
    tool_index = f.get("tool_index")
    min_score = f.get("min_score")
    max_picked = int(f.get("max_picked", 1))
    out: list[tuple[float, str, int, Mapping[str, Any]]] = []
    for obj in objects:
        if types is not None and obj.get("type") not in types:
            continue
        for gi, g in enumerate(obj.get("grasps", ())):
            if tool_index is not None and g.get("tool") != tool_index:
                continue
            score = float(g.get("score", 0.0))
            if min_score is not None and score < float(min_score):
                continue
            ids = g.get("object_ids") or [obj.get("id")]
            if len(ids) > max_picked:
                continue
            out.append((score, str(obj.get("id")), gi, obj))
    out.sort(key=lambda t: (-t[0], t[1], t[2]))
    return [(obj, gi) for _s, _oid, gi, obj in out]


# --- static metadata -------------------------------------------------------------


@dataclass(frozen=True)
class KindInfo:
    kind: NodeKind
    needs_online: bool = False
    moves: bool = False  # issues a robot_execute side effect
    is_control: bool = False  # traversal owned by the interpreter


KIND_INFO: dict[NodeKind, KindInfo] = {
    NodeKind.ROUTINE_ENTRY: KindInfo(NodeKind.ROUTINE_ENTRY, is_control=True),
    NodeKind.PLAN_ROUTINE_ENTRY: KindInfo(NodeKind.PLAN_ROUTINE_ENTRY, is_control=True),
    NodeKind.ROUTINE_EXIT: KindInfo(NodeKind.ROUTINE_EXIT, is_control=True),
    NodeKind.ROUTINE_INVOKE: KindInfo(NodeKind.ROUTINE_INVOKE, is_control=True),
    NodeKind.MOVE_JOINT: KindInfo(NodeKind.MOVE_JOINT, needs_online=True, moves=True),
    NodeKind.MOVE_TO_PICK: KindInfo(NodeKind.MOVE_TO_PICK, needs_online=True, moves=True),
    NodeKind.RELATIVE_MOVE: KindInfo(NodeKind.RELATIVE_MOVE, needs_online=True, moves=True),
    NodeKind.MOVE_TO_OBJECT_POSE: KindInfo(NodeKind.MOVE_TO_OBJECT_POSE, needs_online=True, moves=True),
    NodeKind.PALLETIZATION_MOVE: KindInfo(NodeKind.PALLETIZATION_MOVE, needs_online=True, moves=True),
    NodeKind.MOVE_TRAJECTORY_BY_VARIABLE: KindInfo(
        NodeKind.MOVE_TRAJECTORY_BY_VARIABLE, needs_online=True, moves=True
    ),
    NodeKind.PLACE_OBJECT: KindInfo(NodeKind.PLACE_OBJECT),
    NodeKind.CALL_SERVICE: KindInfo(NodeKind.CALL_SERVICE),
    NodeKind.SET_VARIABLE: KindInfo(NodeKind.SET_VARIABLE),
    NodeKind.FUNCTOR_VARIABLE_MUTATION: KindInfo(NodeKind.FUNCTOR_VARIABLE_MUTATION),
    NodeKind.COUNTER_BRANCH: KindInfo(NodeKind.COUNTER_BRANCH),
    NodeKind.EXCEPTION_PROBE: KindInfo(NodeKind.EXCEPTION_PROBE),
    NodeKind.PLANNER_SELECT: KindInfo(NodeKind.PLANNER_SELECT, needs_online=True),
}


def functor_exists(name: str) -> bool:
    return functorlib.get_functor(name) is not None


def reads(node: Node) -> frozenset[str]:
    """Variables a statement may read (template over its parameters)."""
    k, p = node.kind, node.params
    if k == NodeKind.MOVE_JOINT:
        extra = {_target_var(p)} if _target_var(p) else set()
        return frozenset({"jps"} | extra)
    if k == NodeKind.MOVE_TO_PICK:
        return frozenset({"jps", "active_tool", "static_env", perception_var(node)})
    if k == NodeKind.RELATIVE_MOVE:
        return frozenset({"jps"})
    if k == NodeKind.MOVE_TO_OBJECT_POSE:
        extra = {_target_var(p)} if _target_var(p) else set()
        return frozenset({"jps", "picked_objects"} | extra)
    if k == NodeKind.PALLETIZATION_MOVE:
        return frozenset({"jps", "picked_objects", p.get("state_var", "pallet_state")})
    if k == NodeKind.MOVE_TRAJECTORY_BY_VARIABLE:
        return frozenset({"jps", p.get("var", "")} - {""})
    if k == NodeKind.PLACE_OBJECT:
        return frozenset({"jps", "picked_objects", "static_env"})
    if k == NodeKind.COUNTER_BRANCH:
        return frozenset({p.get("var", "")} - {""})
    if k == NodeKind.FUNCTOR_VARIABLE_MUTATION:
        f = functorlib.get_functor(p.get("functor", ""))
        return f.reads(p.get("args", {})) if f else frozenset()
    if k == NodeKind.EXCEPTION_PROBE:
        return frozenset({"picked_objects"})
    return frozenset()


def writes(node: Node) -> frozenset[str]:
    k, p = node.kind, node.params
    if k in (NodeKind.MOVE_JOINT, NodeKind.RELATIVE_MOVE, NodeKind.MOVE_TO_OBJECT_POSE,
             NodeKind.MOVE_TRAJECTORY_BY_VARIABLE):
        return frozenset({"jps"})
    if k == NodeKind.MOVE_TO_PICK:
        return frozenset({"jps", "picked_objects", "active_tool", perception_var(node)})
    if k == NodeKind.PALLETIZATION_MOVE:
        return frozenset({"jps", p.get("state_var", "pallet_state")})
    if k == NodeKind.PLACE_OBJECT:
        return frozenset({"picked_objects", "placed_objects"})
    if k == NodeKind.CALL_SERVICE:
        return frozenset({response_var(node)})
    if k == NodeKind.SET_VARIABLE:
        return frozenset({p.get("var", "")} - {""})
    if k == NodeKind.FUNCTOR_VARIABLE_MUTATION:
        f = functorlib.get_functor(p.get("functor", ""))
        return f.writes(p.get("args", {})) if f else frozenset()
    if k == NodeKind.EXCEPTION_PROBE:
        return frozenset({"picked_objects"})
    return frozenset()


# --- static parameter / port checks ----------------------------------------------


def _check_var_name(p: Mapping[str, Any], key: str, out: list[str], *, allow_reserved=False):
    v = p.get(key)
    if not isinstance(v, str) or not v:
        out.append(f"parameter {key!r} must be a non-empty variable name")
    elif not allow_reserved and v in RESERVED_VARS:
        out.append(f"parameter {key!r} may not name the reserved variable {v!r}")


def _check_pose_or_var(p: Mapping[str, Any], key: str, out: list[str]):
    t = p.get(key)
    if isinstance(t, Mapping):
        if not isinstance(t.get("var"), str) or not t["var"]:
            out.append(f"parameter {key!r} variable reference needs a non-empty 'var'")
        return
    if isinstance(t, (list, tuple)) and len(t) == 3 and all(isinstance(v, (int, float)) for v in t):
        return
    out.append(f"parameter {key!r} must be [x, y, theta] or {{'var': name}}")


def check_params(node: Node) -> list[str]:
    out: list[str] = []
    p = node.params
    k = node.kind
    if k == NodeKind.ROUTINE_INVOKE:
        if not isinstance(p.get("routine"), str) or not p["routine"]:
            out.append("parameter 'routine' must name a routine")
    elif k == NodeKind.MOVE_JOINT:
        t = p.get("target")
        if isinstance(t, Mapping):
            if not isinstance(t.get("var"), str) or not t["var"]:
                out.append("parameter 'target' variable reference needs a non-empty 'var'")
        elif not (isinstance(t, (list, tuple)) and t and all(isinstance(v, (int, float)) for v in t)):
            out.append("parameter 'target' must be a joint configuration or {'var': name}")
    elif k == NodeKind.MOVE_TO_PICK:
        srv = p.get("srv_id", "perception")
        if not isinstance(srv, str) or not srv:
            out.append("parameter 'srv_id' must be a non-empty service id")
        flt = p.get("filters")
        if flt is not None and not isinstance(flt, Mapping):
            out.append("parameter 'filters' must be an object")
        elif isinstance(flt, Mapping):
            mp = flt.get("max_picked", 1)
            if not isinstance(mp, int) or mp < 1:
                out.append("filter 'max_picked' must be a positive integer")
    elif k == NodeKind.RELATIVE_MOVE:
        off = p.get("offset")
        if not (isinstance(off, (list, tuple)) and len(off) == 3 and all(isinstance(v, (int, float)) for v in off)):
            out.append("parameter 'offset' must be [dx, dy, dtheta] in the end-effector frame")
    elif k == NodeKind.MOVE_TO_OBJECT_POSE:
        _check_pose_or_var(p, "target", out)
    elif k == NodeKind.PALLETIZATION_MOVE:
        if not isinstance(p.get("srv_id", "pallet"), str):
            out.append("parameter 'srv_id' must be a service id")
        sv = p.get("state_var", "pallet_state")
        if not isinstance(sv, str) or not sv or sv in RESERVED_VARS:
            out.append("parameter 'state_var' must be a non-reserved variable name")
    elif k == NodeKind.MOVE_TRAJECTORY_BY_VARIABLE:
        _check_var_name(p, "var", out)
    elif k == NodeKind.CALL_SERVICE:
        if not isinstance(p.get("srv_id"), str) or not p["srv_id"]:
            out.append("parameter 'srv_id' must be a non-empty service id")
        rsv = p.get("response_save_var")
        if rsv is not None and (not isinstance(rsv, str) or not rsv or rsv in RESERVED_VARS):
            out.append("parameter 'response_save_var' must be a non-reserved variable name")
        req = p.get("request")
        if req is not None and not isinstance(req, Mapping):
            out.append("parameter 'request' must be an object")
    elif k == NodeKind.SET_VARIABLE:
        _check_var_name(p, "var", out)
        if "value" not in p:
            out.append("parameter 'value' is required")
    elif k == NodeKind.FUNCTOR_VARIABLE_MUTATION:
        if not isinstance(p.get("functor"), str) or not p["functor"]:
            out.append("parameter 'functor' must name a registered functor")
        args = p.get("args", {})
        if not isinstance(args, Mapping):
            out.append("parameter 'args' must be an object")
        elif "var" in args:
            v = args["var"]
            if not isinstance(v, str) or not v:
                out.append("functor argument 'var' must be a non-empty variable name")
            elif v in RESERVED_VARS:
                out.append(f"functor argument 'var' may not name the reserved variable {v!r}")
    elif k == NodeKind.COUNTER_BRANCH:
        _check_var_name(p, "var", out, allow_reserved=True)
        if p.get("op") not in _OPS:
            out.append(f"parameter 'op' must be one of {sorted(_OPS)}")
        if not isinstance(p.get("value"), (int, float)) or isinstance(p.get("value"), bool):
            out.append("parameter 'value' must be a number")
    elif k == NodeKind.EXCEPTION_PROBE:
        srv = p.get("srv_id", "gripper")
        if not isinstance(srv, str) or not srv:
            out.append("parameter 'srv_id' must be a non-empty service id")
    return out


def check_ports(node: Node) -> list[str]:
    out: list[str] = []
    normal = [p for p in node.ports if not p.exception]
    excs = [p for p in node.ports if p.exception]
    k = node.kind
    if k == NodeKind.ROUTINE_EXIT:
        return out  # no-port rule enforced by the graph checker
    if k == NodeKind.COUNTER_BRANCH:
        op = node.params.get("op")
        if op in _OPS:
            want = set(counter_ports(op))
            if set(p.label for p in node.ports) != want or excs:
                out.append(f"ports must be exactly {sorted(want)} (non-exception)")
    elif k == NodeKind.PLANNER_SELECT:
        if len(normal) < 2 or excs:
            out.append("needs at least two normal out-ports, one per alternative")
    elif k == NodeKind.EXCEPTION_PROBE:
        if not normal or not excs:
            out.append("needs one normal port and at least one exception port")
    elif k in (NodeKind.ROUTINE_INVOKE, NodeKind.CALL_SERVICE):
        if len(normal) != 1:
            out.append("needs exactly one normal out-port")
    else:
        if len(normal) != 1 or excs:
            out.append("needs exactly one out-port")
    return out


# --- execution --------------------------------------------------------------------


def _movement_effect(
    node: Node, vm: VariableMap, online: OnlineParams, services: Services, dyn_id: int,
    attach: list[dict[str, Any]] | None = None, detach_all: bool = False,
) -> tuple[list[Mutation], list[ServiceCallRecord]]:
    traj = online.trajectory
    assert traj is not None
    request: dict[str, Any] = {"cmd": "execute", "trajectory": traj.to_tree()}
    if attach:
        request["attach"] = attach
    if detach_all:
        request["detach_all"] = True
    response = services.call("robot", request, dyn_id)
    return [SetVar("jps", list(traj.end))], [ServiceCallRecord("robot", request, response)]


def execute_node(
    node: Node,
    vm: VariableMap,
    online: OnlineParams | None,
    services: Services,
    model: RobotModel,
    dyn_id: int,
) -> NodeOutcome:
    k = node.kind
    info = KIND_INFO[k]
    port = node.first_normal_port()

    if k in (NodeKind.ROUTINE_ENTRY, NodeKind.PLAN_ROUTINE_ENTRY, NodeKind.ROUTINE_INVOKE):
        return NodeOutcome(port)
    if k == NodeKind.ROUTINE_EXIT:
        return NodeOutcome(None)

    if info.needs_online:
        online = _require_online(node, online)

    if k == NodeKind.PLANNER_SELECT:
        sel = online.decisions.select_port
        if sel is None or sel not in node.port_labels():
            raise NodeExecutionError("MISSING_PLAN", f"no selected port recorded for {node.id!r}")
        return NodeOutcome(sel)

    if k in (NodeKind.MOVE_JOINT, NodeKind.RELATIVE_MOVE, NodeKind.MOVE_TO_OBJECT_POSE,
             NodeKind.MOVE_TRAJECTORY_BY_VARIABLE):
        muts, fx = _movement_effect(node, vm, online, services, dyn_id)
        return NodeOutcome(port, tuple(muts), tuple(fx))

    if k == NodeKind.MOVE_TO_PICK:
        pvar = perception_var(node)
        tree = vm.require(pvar)
        objects = _perception_objects(tree)
        picked_ids = {oid for oid, _ in online.decisions.picked}
        by_id = {str(o.get("id")): o for o in objects}
        missing = picked_ids - set(by_id)
        if missing:
            raise NodeExecutionError("STALE_PLAN", f"picked objects {sorted(missing)} not in {pvar!r}")
        attach = [
            {"id": oid, "pose": [a.x, a.y, a.theta]} for oid, a in online.decisions.picked
        ]
        muts, fx = _movement_effect(node, vm, online, services, dyn_id, attach=attach)
        remaining = [o for o in objects if str(o.get("id")) not in picked_ids]
        muts.append(SetVar(pvar, _with_objects(tree, remaining)))
        for oid, a in online.decisions.picked:
            held = dict(by_id[oid])
            held["pose"] = [a.x, a.y, a.theta]
            muts.append(ListAppend("picked_objects", held))
        if online.decisions.tool_index is not None:
            muts.append(SetVar("active_tool", online.decisions.tool_index))
        return NodeOutcome(port, tuple(muts), tuple(fx))

    if k == NodeKind.PALLETIZATION_MOVE:
        state_var = node.params.get("state_var", "pallet_state")
        state = vm.get(state_var, [])
        if not isinstance(state, list):
            raise NodeExecutionError("TYPE_MISMATCH", f"{state_var!r} is not a list")
        muts, fx = _movement_effect(node, vm, online, services, dyn_id)
        muts.append(SetVar(state_var, state + [online.decisions.pallet_record]))
        return NodeOutcome(port, tuple(muts), tuple(fx))

    if k == NodeKind.PLACE_OBJECT:
        picked = vm.require("picked_objects")
        flange = fk(model, vm.require("jps"))
        request = {"cmd": "detach_all"}
        response = services.call("robot", request, dyn_id)
        placed = vm.require("placed_objects")
        moved = []
        for el in picked:
            world = flange.compose(pose_from(el["pose"]))
            out = dict(el)
            out["pose"] = [world.x, world.y, world.theta]
            moved.append(out)
        muts = [SetVar("picked_objects", []), SetVar("placed_objects", list(placed) + moved)]
        return NodeOutcome(port, tuple(muts), (ServiceCallRecord("robot", request, response),))

    if k == NodeKind.CALL_SERVICE:
        srv = node.params["srv_id"]
        request = dict(node.params.get("request", {}))
        try:
            response = services.call(srv, request, dyn_id)
        except ServiceFault:
            exc_port = _first_exception_port(node)
            if exc_port is None:
                raise
            return NodeOutcome(exc_port, (), (ServiceCallRecord(srv, request, None),))
        return NodeOutcome(
            port, (SetVar(response_var(node), response),), (ServiceCallRecord(srv, request, response),)
        )

    if k == NodeKind.SET_VARIABLE:
        return NodeOutcome(port, (SetVar(node.params["var"], node.params["value"]),))

    if k == NodeKind.FUNCTOR_VARIABLE_MUTATION:
        f = functorlib.get_functor(node.params["functor"])
        if f is None:
            raise NodeExecutionError("UNKNOWN_FUNCTOR", f"functor {node.params['functor']!r} is not registered")
        return NodeOutcome(port, tuple(f.apply(vm, node.params.get("args", {}))))

    if k == NodeKind.COUNTER_BRANCH:
        return NodeOutcome(_counter_take(node, vm))

    if k == NodeKind.EXCEPTION_PROBE:
        srv = node.params.get("srv_id", "gripper")
        picked = vm.require("picked_objects")
        expect = [str(el.get("id")) for el in picked if isinstance(el, Mapping)]
        request = dict(node.params.get("request", {"cmd": "query_holding"}))
        request.setdefault("cmd", "query_holding")
        request["expect"] = expect
        response = services.call(srv, request, dyn_id)
        payload = response.get("payload", response) if isinstance(response, Mapping) else {}
        ok = bool(payload.get("ok", True))
        fx = (ServiceCallRecord(srv, request, response),)
        if ok:
            return NodeOutcome(port, (), fx)
        exc_port = _first_exception_port(node)
        if exc_port is None:
            raise NodeExecutionError("UNHANDLED_EXCEPTION", f"probe {node.id!r} failed without exception port")
        lost = [str(x) for x in payload.get("lost", [])]
        muts = tuple(ListRemoveByKey("picked_objects", oid) for oid in lost)
        return NodeOutcome(exc_port, muts, fx)

    raise NodeExecutionError("UNKNOWN_KIND", f"no execute rule for {k.value}")


# --- simulation --------------------------------------------------------------------


def _poisoned_read(vm: VariableMap, names: frozenset[str]) -> str | None:
    for name in sorted(names):
        if vm.is_poisoned(name):
            return name
    return None


def simulate_node(
    node: Node,
    vm: VariableMap,
    online: OnlineParams | None,
    model: RobotModel,
) -> SimOutcome:
    """Speculative counterpart of :func:`execute_node`.

    Identical variable updates for everything knowable before execution, no
    side effects ever, poison for service responses, a journaled guess for
    exception probes, and Unsimulatable when a poisoned variable is read.
    """
    k = node.kind
    info = KIND_INFO[k]
    port = node.first_normal_port()

    if k in (NodeKind.ROUTINE_ENTRY, NodeKind.PLAN_ROUTINE_ENTRY, NodeKind.ROUTINE_INVOKE):
        return Simulated(port)
    if k == NodeKind.ROUTINE_EXIT:
        return Simulated(None)

    blocked = _poisoned_read(vm, reads(node))
    if blocked is not None:
        return Unsimulatable("poisoned read", blocked)

    if info.needs_online and (online is None or (info.moves and online.trajectory is None)):
        return Unsimulatable("missing online params")

    if k == NodeKind.PLANNER_SELECT:
        sel = online.decisions.select_port if online else None
        if sel is None:
            return Unsimulatable("missing online params")
        return Simulated(sel)

    if k in (NodeKind.MOVE_JOINT, NodeKind.RELATIVE_MOVE, NodeKind.MOVE_TO_OBJECT_POSE,
             NodeKind.MOVE_TRAJECTORY_BY_VARIABLE):
        return Simulated(port, (SetVar("jps", list(online.trajectory.end)),))

    if k == NodeKind.MOVE_TO_PICK:
        pvar = perception_var(node)
        tree = vm.require(pvar)
        objects = _perception_objects(tree)
        picked_ids = {oid for oid, _ in online.decisions.picked}
        by_id = {str(o.get("id")): o for o in objects}
        if picked_ids - set(by_id):
            return Unsimulatable("stale perception for speculative pick", pvar)
        muts: list[Mutation] = [SetVar("jps", list(online.trajectory.end))]
        remaining = [o for o in objects if str(o.get("id")) not in picked_ids]
        muts.append(SetVar(pvar, _with_objects(tree, remaining)))
        for oid, a in online.decisions.picked:
            held = dict(by_id[oid])
            held["pose"] = [a.x, a.y, a.theta]
            muts.append(ListAppend("picked_objects", held))
        if online.decisions.tool_index is not None:
            muts.append(SetVar("active_tool", online.decisions.tool_index))
        return Simulated(port, tuple(muts))

    if k == NodeKind.PALLETIZATION_MOVE:
        state_var = node.params.get("state_var", "pallet_state")
        state = vm.get(state_var, [])
        if not isinstance(state, list):
            return Unsimulatable("pallet state is not a list", state_var)
        return Simulated(
            port,
            (SetVar("jps", list(online.trajectory.end)),
             SetVar(state_var, state + [online.decisions.pallet_record])),
        )

    if k == NodeKind.PLACE_OBJECT:
        picked = vm.require("picked_objects")
        flange = fk(model, vm.require("jps"))
        placed = vm.require("placed_objects")
        moved = []
        for el in picked:
            world = flange.compose(pose_from(el["pose"]))
            out = dict(el)
            out["pose"] = [world.x, world.y, world.theta]
            moved.append(out)
        return Simulated(
            port, (SetVar("picked_objects", []), SetVar("placed_objects", list(placed) + moved))
        )

    if k == NodeKind.CALL_SERVICE:
        return Simulated(port, (), poisons=(response_var(node),))

    if k == NodeKind.SET_VARIABLE:
        return Simulated(port, (SetVar(node.params["var"], node.params["value"]),))

    if k == NodeKind.FUNCTOR_VARIABLE_MUTATION:
        f = functorlib.get_functor(node.params["functor"])
        if f is None:
            return Unsimulatable(f"unknown functor {node.params['functor']!r}")
        return Simulated(port, tuple(f.apply(vm, node.params.get("args", {}))))

    if k == NodeKind.COUNTER_BRANCH:
        return Simulated(_counter_take(node, vm))

    if k == NodeKind.EXCEPTION_PROBE:
        # Guess success; the interpreter journals the guess and rolls back
        # speculation when the real probe disagrees.
        return Simulated(port, (), guessed=True)

    return Unsimulatable(f"no simulation rule for {k.value}")
