"""Program graphs: parsing, static checking, lowering, serialization.

A program is a set of routines; each routine is a control-flow graph whose
nodes are statements and whose edges connect out-ports to successor nodes.
Plain routines may loop (every cycle must pass through a branch); plan
routines — the scope of one run-time planning problem — must be loop-free.

``parse_program`` is lenient enough to build a graph object whenever the
document is structurally well-formed; ``validate`` performs the full static
check and returns diagnostics.  Diagnostics render as
``CODE routine/node: message`` and their codes are stable API.
"""

from __future__ import annotations

import heapq
import json
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Iterable, Mapping

PROGRAM_VERSION = "1"


class NodeKind(str, Enum):
    ROUTINE_ENTRY = "RoutineEntry"
    PLAN_ROUTINE_ENTRY = "PlanRoutineEntry"
    ROUTINE_EXIT = "RoutineExit"
    ROUTINE_INVOKE = "RoutineInvoke"
    MOVE_JOINT = "MoveJoint"
    MOVE_TO_PICK = "MoveToPick"
    RELATIVE_MOVE = "RelativeMove"
    MOVE_TO_OBJECT_POSE = "MoveToObjectPose"
    PALLETIZATION_MOVE = "PalletizationMove"
    MOVE_TRAJECTORY_BY_VARIABLE = "MoveTrajectoryByVariable"
    PLACE_OBJECT = "PlaceObject"
    CALL_SERVICE = "CallService"
    SET_VARIABLE = "SetVariable"
    FUNCTOR_VARIABLE_MUTATION = "FunctorVariableMutation"
    COUNTER_BRANCH = "CounterBranch"
    EXCEPTION_PROBE = "ExceptionProbe"
    PLANNER_SELECT = "PlannerSelect"


KIND_NAMES = {k.value for k in NodeKind}

#: Movement statements whose parameters are bound by the planner at run time.
NEEDS_ONLINE = frozenset(
    {
        NodeKind.MOVE_JOINT,
        NodeKind.MOVE_TO_PICK,
        NodeKind.RELATIVE_MOVE,
        NodeKind.MOVE_TO_OBJECT_POSE,
        NodeKind.PALLETIZATION_MOVE,
        NodeKind.MOVE_TRAJECTORY_BY_VARIABLE,
        NodeKind.PLANNER_SELECT,
    }
)

#: All diagnostic codes the static checker can emit (stable, documented API).
DIAGNOSTIC_CODES = (
    "BAD_DOCUMENT",
    "BAD_VERSION",
    "UNKNOWN_KIND",
    "BAD_SUGAR",
    "DUPLICATE_ID",
    "DUPLICATE_PORT",
    "BAD_PARAM",
    "PORT_RULE",
    "DANGLING_PORT",
    "UNWIRED_PORT",
    "DUPLICATE_EDGE",
    "MISSING_ENTRY",
    "BAD_ENTRY",
    "ENTRY_INFLOW",
    "NO_EXIT",
    "UNREACHABLE_NODE",
    "PR_LOOP",
    "LOOP_NO_BRANCH",
    "PLANNER_SELECT_OUTSIDE_PLAN",
    "INVOKE_IN_PLAN",
    "MOVE_OUTSIDE_PLAN",
    "MAIN_NOT_PLAIN",
    "UNKNOWN_ROUTINE",
    "UNKNOWN_FUNCTOR",
    "EXCEPTION_NO_NORMAL",
)

DEFAULT_PORT = "next"


@dataclass(frozen=True)
class Diagnostic:
    code: str
    routine: str
    node: str | None
    message: str
    severity: str = "error"

    def __str__(self) -> str:
        where = f"{self.routine}/{self.node}" if self.node else self.routine
        return f"{self.code} {where}: {self.message}"


class ProgramError(Exception):
    """Raised by helpers that cannot return a diagnostics list."""

    def __init__(self, diagnostics: list[Diagnostic]):
        super().__init__("; ".join(str(d) for d in diagnostics))
        self.diagnostics = diagnostics


@dataclass(frozen=True)
class Port:
    label: str
    exception: bool = False


@dataclass(frozen=True)
class Node:
    id: str
    kind: NodeKind
    params: Mapping[str, Any] = field(default_factory=dict)
    ports: tuple[Port, ...] = ()

    def port_labels(self) -> list[str]:
        return [p.label for p in self.ports]

    def first_normal_port(self) -> str | None:
        for p in self.ports:
            if not p.exception:
                return p.label
        return None


@dataclass(frozen=True)
class Edge:
    from_node: str
    from_port: str
    to_node: str


PLAIN = "plain"
PLAN = "plan"


@dataclass(frozen=True)
class Routine:
    id: str
    kind: str  # plain | plan
    entry: str
    nodes: Mapping[str, Node]
    edges: tuple[Edge, ...]

    @property
    def is_plan(self) -> bool:
        return self.kind == PLAN

    def out_edges(self) -> dict[tuple[str, str], str]:
        return {(e.from_node, e.from_port): e.to_node for e in self.edges}

    def successor(self, node_id: str, port: str) -> str | None:
        for e in self.edges:
            if e.from_node == node_id and e.from_port == port:
                return e.to_node
        return None


@dataclass(frozen=True)
class Program:
    version: str
    main: str
    routines: Mapping[str, Routine]
    layout: Any = None


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------


def _doc_err(diags: list[Diagnostic], routine: str, node: str | None, msg: str, code="BAD_DOCUMENT"):
    diags.append(Diagnostic(code, routine, node, msg))


def parse_program(data: str | bytes | Mapping[str, Any]) -> tuple[Program | None, list[Diagnostic]]:
    """Parse a program document.  Returns the program (when structurally
    buildable) plus parse diagnostics; semantic checks live in ``validate``."""
    diags: list[Diagnostic] = []
    if isinstance(data, (str, bytes)):
        try:
            tree = json.loads(data)
        except json.JSONDecodeError as exc:
            return None, [Diagnostic("BAD_DOCUMENT", "-", None, f"not valid JSON: {exc}")]
    else:
        tree = data
    if not isinstance(tree, dict):
        return None, [Diagnostic("BAD_DOCUMENT", "-", None, "document root must be an object")]
    version = tree.get("version")
    if version != PROGRAM_VERSION:
        return None, [
            Diagnostic(
                "BAD_VERSION", "-", None, f"unsupported version {version!r}; expected {PROGRAM_VERSION!r}"
            )
        ]
    main = tree.get("main")
    if not isinstance(main, str) or not main:
        return None, [Diagnostic("BAD_DOCUMENT", "-", None, "missing or invalid 'main'")]
    routines_tree = tree.get("routines")
    if not isinstance(routines_tree, dict) or not routines_tree:
        return None, [Diagnostic("BAD_DOCUMENT", "-", None, "missing or empty 'routines'")]

    routines: dict[str, Routine] = {}
    for rid, rtree in routines_tree.items():
        if not isinstance(rtree, dict):
            _doc_err(diags, rid, None, "routine must be an object")
            continue
        kind = rtree.get("kind", PLAIN)
        if kind not in (PLAIN, PLAN):
            _doc_err(diags, rid, None, f"routine kind must be 'plain' or 'plan', got {kind!r}")
            continue
        nodes: dict[str, Node] = {}
        ok = True
        for ntree in rtree.get("nodes", ()):
            if not isinstance(ntree, dict) or not isinstance(ntree.get("id"), str) or not ntree["id"]:
                _doc_err(diags, rid, None, "node must be an object with a non-empty string id")
                ok = False
                continue
            nid = ntree["id"]
            if nid in nodes:
                diags.append(Diagnostic("DUPLICATE_ID", rid, nid, "duplicate node id"))
                ok = False
                continue
            kname = ntree.get("kind")
            if kname not in KIND_NAMES:
                diags.append(Diagnostic("UNKNOWN_KIND", rid, nid, f"unknown node kind {kname!r}"))
                ok = False
                continue
            params = ntree.get("params", {})
            if not isinstance(params, dict):
                diags.append(Diagnostic("BAD_PARAM", rid, nid, "params must be an object"))
                ok = False
                continue
            ports: list[Port] = []
            seen = set()
            for ptree in ntree.get("ports", ()):
                if not isinstance(ptree, dict) or not isinstance(ptree.get("label"), str) or not ptree["label"]:
                    _doc_err(diags, rid, nid, "port must be an object with a non-empty label")
                    ok = False
                    continue
                label = ptree["label"]
                if label in seen:
                    diags.append(Diagnostic("DUPLICATE_PORT", rid, nid, f"duplicate port {label!r}"))
                    ok = False
                    continue
                seen.add(label)
                ports.append(Port(label, bool(ptree.get("exception", False))))
            nodes[nid] = Node(nid, NodeKind(kname), params, tuple(ports))
        edges: list[Edge] = []
        for etree in rtree.get("edges", ()):
            frm = etree.get("from") if isinstance(etree, dict) else None
            to = etree.get("to") if isinstance(etree, dict) else None
            if (
                not isinstance(frm, (list, tuple))
                or len(frm) != 2
                or not all(isinstance(x, str) for x in frm)
                or not isinstance(to, str)
            ):
                _doc_err(diags, rid, None, f"edge must be {{from: [node, port], to: node}}, got {etree!r}")
                ok = False
                continue
            edges.append(Edge(frm[0], frm[1], to))
        entry = rtree.get("entry")
        if not isinstance(entry, str) or not entry:
            diags.append(Diagnostic("MISSING_ENTRY", rid, None, "routine has no entry"))
            ok = False
        if not ok:
            continue
        routines[rid] = Routine(rid, kind, entry, nodes, tuple(edges))

    if any(d.severity == "error" for d in diags):
        return None, diags
    return Program(PROGRAM_VERSION, main, routines, tree.get("layout")), diags


# ---------------------------------------------------------------------------
# Canonical serialization
# ---------------------------------------------------------------------------


def program_to_tree(program: Program) -> dict[str, Any]:
    routines: dict[str, Any] = {}
    for rid in sorted(program.routines):
        r = program.routines[rid]
        routines[rid] = {
            "kind": r.kind,
            "entry": r.entry,
            "nodes": [
                {
                    "id": n.id,
                    "kind": n.kind.value,
                    "params": n.params,
                    "ports": [
                        {"label": p.label, **({"exception": True} if p.exception else {})}
                        for p in n.ports
                    ],
                }
                for n in (r.nodes[nid] for nid in sorted(r.nodes))
            ],
            "edges": [
                {"from": [e.from_node, e.from_port], "to": e.to_node}
                for e in sorted(r.edges, key=lambda e: (e.from_node, e.from_port, e.to_node))
            ],
        }
    doc: dict[str, Any] = {"version": program.version, "main": program.main, "routines": routines}
    if program.layout is not None:
        doc["layout"] = program.layout
    return doc


def serialize_program(program: Program) -> str:
    """Canonical text form: sorted keys, nodes by id, edges by origin.
    Serializing the parse of a canonical document is a fixed point."""
    return json.dumps(program_to_tree(program), sort_keys=True, indent=2, allow_nan=False) + "\n"


# ---------------------------------------------------------------------------
# Frontend lowering
# ---------------------------------------------------------------------------


def _sugar_increase(params):
    return "FunctorVariableMutation", {"functor": "counter.inc", "args": {"var": params.get("counter_var")}}


def _sugar_decrease(params):
    return "FunctorVariableMutation", {"functor": "counter.dec", "args": {"var": params.get("counter_var")}}


def _sugar_set_counter(params):
    return "SetVariable", {"var": params.get("counter_var"), "value": params.get("value", 0)}


def _sugar_clear_list(params):
    return "FunctorVariableMutation", {"functor": "list.clear", "args": {"var": params.get("var")}}


def _sugar_append_list(params):
    return "FunctorVariableMutation", {
        "functor": "list.append",
        "args": {"var": params.get("var"), "value": params.get("value")},
    }


def _sugar_digital_out(params):
    srv = params.get("srv_id", "gripper")
    return "CallService", {
        "srv_id": srv,
        "request": {"cmd": "digital_out", "ports": params.get("ports", []), "on": bool(params.get("on", True))},
        "response_save_var": f"{srv}_ack",
    }


SUGAR_KINDS = {
    "IncreaseCounter": _sugar_increase,
    "DecreaseCounter": _sugar_decrease,
    "SetCounter": _sugar_set_counter,
    "ClearList": _sugar_clear_list,
    "AppendList": _sugar_append_list,
    "DigitalOut": _sugar_digital_out,
}


def lower_frontend(tree: Mapping[str, Any]) -> tuple[dict[str, Any] | None, list[Diagnostic]]:
    """Rewrite frontend convenience statements into core kinds.

    Core kinds pass through unchanged; routine structure, ports and edges are
    preserved.  Kinds that are neither core nor sugar also pass through — the
    parser reports those as UNKNOWN_KIND, the one code for unknown statements.
    """
    diags: list[Diagnostic] = []
    if not isinstance(tree, dict):
        return None, [Diagnostic("BAD_DOCUMENT", "-", None, "document root must be an object")]
    out = dict(tree)
    routines = {}
    for rid, rtree in (tree.get("routines") or {}).items():
        if not isinstance(rtree, dict):
            routines[rid] = rtree
            continue
        rnew = dict(rtree)
        nodes = []
        for ntree in rtree.get("nodes", ()):
            if not isinstance(ntree, dict) or ntree.get("kind") not in SUGAR_KINDS:
                nodes.append(ntree)
                continue
            params = ntree.get("params", {})
            if not isinstance(params, Mapping):
                diags.append(
                    Diagnostic(
                        "BAD_SUGAR",
                        rid,
                        str(ntree.get("id")),
                        f"cannot lower {ntree['kind']!r}: params must be an object",
                    )
                )
                nodes.append(ntree)
                continue
            new_kind, new_params = SUGAR_KINDS[ntree["kind"]](params)
            lowered = dict(ntree)
            lowered["kind"] = new_kind
            lowered["params"] = new_params
            if not lowered.get("ports"):
                lowered["ports"] = [{"label": DEFAULT_PORT}]
            nodes.append(lowered)
        rnew["nodes"] = nodes
        routines[rid] = rnew
    out["routines"] = routines
    if any(d.severity == "error" for d in diags):
        return None, diags
    return out, diags


# ---------------------------------------------------------------------------
# Topological order of a plan routine
# ---------------------------------------------------------------------------


class CycleError(Exception):
    def __init__(self, cycle: list[str]):
        super().__init__(" -> ".join(cycle))
        self.cycle = cycle


def _find_cycle(adj: Mapping[str, Iterable[str]], nodes: Iterable[str]) -> list[str] | None:
    WHITE, GRAY, BLACK = 0, 1, 2
    color = {n: WHITE for n in nodes}
    stack: list[str] = []

    def dfs(u: str) -> list[str] | None:
        color[u] = GRAY
        stack.append(u)
        for v in adj.get(u, ()):
            if v not in color:
                continue
            if color[v] == GRAY:
                i = stack.index(v)
                return stack[i:] + [v]
            if color[v] == WHITE:
                found = dfs(v)
                if found:
                    return found
        stack.pop()
        color[u] = BLACK
        return None

    for n in sorted(color):
        if color[n] == WHITE:
            found = dfs(n)
            if found:
                return found
    return None


def plan_routine_order(routine: Routine) -> list[str]:
    """Topological node order (Kahn), ties broken lexicographically.
    Raises :class:`CycleError` carrying a witness cycle when loops exist."""
    adj: dict[str, list[str]] = {nid: [] for nid in routine.nodes}
    indeg = {nid: 0 for nid in routine.nodes}
    for e in routine.edges:
        if e.from_node in adj and e.to_node in indeg:
            adj[e.from_node].append(e.to_node)
            indeg[e.to_node] += 1
    heap = sorted(n for n, d in indeg.items() if d == 0)
    heapq.heapify(heap)
    order: list[str] = []
    while heap:
        n = heapq.heappop(heap)
        order.append(n)
        for v in adj[n]:
            indeg[v] -= 1
            if indeg[v] == 0:
                heapq.heappush(heap, v)
    if len(order) != len(routine.nodes):
        cycle = _find_cycle(adj, routine.nodes)
        raise CycleError(cycle or [])
    return order


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------


def _reachable(routine: Routine) -> set[str]:
    seen: set[str] = set()
    if routine.entry not in routine.nodes:
        return seen
    succ = routine.out_edges()
    stack = [routine.entry]
    while stack:
        n = stack.pop()
        if n in seen:
            continue
        seen.add(n)
        node = routine.nodes.get(n)
        if node is None:
            continue
        for p in node.ports:
            t = succ.get((n, p.label))
            if t is not None and t in routine.nodes and t not in seen:
                stack.append(t)
    return seen


def validate(program: Program) -> list[Diagnostic]:
    """Full static check.  Returns all diagnostics (errors and warnings)."""
    from . import nodes as nodelib  # late import; the registry depends on these types

    diags: list[Diagnostic] = []
    err = diags.append

    if program.main not in program.routines:
        err(Diagnostic("UNKNOWN_ROUTINE", "-", None, f"main routine {program.main!r} is not defined"))
    elif program.routines[program.main].is_plan:
        err(Diagnostic("MAIN_NOT_PLAIN", program.main, None, "the main routine must be a plain routine"))

    for rid, routine in program.routines.items():
        nodes = routine.nodes
        # Entry discipline.
        entry_kind = NodeKind.PLAN_ROUTINE_ENTRY if routine.is_plan else NodeKind.ROUTINE_ENTRY
        if routine.entry not in nodes:
            err(Diagnostic("MISSING_ENTRY", rid, None, f"entry node {routine.entry!r} does not exist"))
        else:
            if nodes[routine.entry].kind != entry_kind:
                err(
                    Diagnostic(
                        "BAD_ENTRY", rid, routine.entry,
                        f"{routine.kind} routine entry must be {entry_kind.value}",
                    )
                )
        for n in nodes.values():
            if n.kind in (NodeKind.ROUTINE_ENTRY, NodeKind.PLAN_ROUTINE_ENTRY) and n.id != routine.entry:
                err(Diagnostic("BAD_ENTRY", rid, n.id, "entry statements may only appear as the routine entry"))

        # Edge discipline.
        seen_ports: set[tuple[str, str]] = set()
        in_deg = {nid: 0 for nid in nodes}
        for e in routine.edges:
            src = nodes.get(e.from_node)
            if src is None:
                err(Diagnostic("DANGLING_PORT", rid, e.from_node, f"edge from unknown node {e.from_node!r}"))
                continue
            if e.from_port not in src.port_labels():
                err(
                    Diagnostic(
                        "DANGLING_PORT", rid, e.from_node,
                        f"edge from undeclared port {e.from_port!r}",
                    )
                )
                continue
            if e.to_node not in nodes:
                err(Diagnostic("DANGLING_PORT", rid, e.from_node, f"edge to unknown node {e.to_node!r}"))
                continue
            key = (e.from_node, e.from_port)
            if key in seen_ports:
                err(Diagnostic("DUPLICATE_EDGE", rid, e.from_node, f"port {e.from_port!r} wired twice"))
                continue
            seen_ports.add(key)
            in_deg[e.to_node] += 1

        for n in nodes.values():
            for p in n.ports:
                if (n.id, p.label) not in seen_ports:
                    err(Diagnostic("UNWIRED_PORT", rid, n.id, f"out-port {p.label!r} has no edge"))
            if n.kind == NodeKind.ROUTINE_EXIT and n.ports:
                err(Diagnostic("PORT_RULE", rid, n.id, "exit statements declare no out-ports"))
            if n.kind != NodeKind.ROUTINE_EXIT and not n.ports:
                err(Diagnostic("PORT_RULE", rid, n.id, "non-exit statements need at least one out-port"))
            if n.ports and n.first_normal_port() is None:
                err(Diagnostic("EXCEPTION_NO_NORMAL", rid, n.id, "every port is an exception port"))
        if routine.entry in nodes and in_deg.get(routine.entry, 0) > 0:
            err(Diagnostic("ENTRY_INFLOW", rid, routine.entry, "edges may not enter the routine entry"))

        if not any(n.kind == NodeKind.ROUTINE_EXIT for n in nodes.values()):
            err(Diagnostic("NO_EXIT", rid, None, "routine has no exit statement"))

        reach = _reachable(routine)
        for nid in sorted(nodes):
            if nid not in reach:
                diags.append(
                    Diagnostic("UNREACHABLE_NODE", rid, nid, "node is unreachable from the entry", "warning")
                )

        # Structural placement rules.
        for n in nodes.values():
            if n.kind == NodeKind.PLANNER_SELECT and not routine.is_plan:
                err(
                    Diagnostic(
                        "PLANNER_SELECT_OUTSIDE_PLAN", rid, n.id,
                        "planner selections are only meaningful inside plan routines",
                    )
                )
            if n.kind == NodeKind.ROUTINE_INVOKE and routine.is_plan:
                err(Diagnostic("INVOKE_IN_PLAN", rid, n.id, "plan routines may not invoke other routines"))
            if n.kind in NEEDS_ONLINE and n.kind != NodeKind.PLANNER_SELECT and not routine.is_plan:
                err(
                    Diagnostic(
                        "MOVE_OUTSIDE_PLAN", rid, n.id,
                        "movement statements need a surrounding plan routine to bind their parameters",
                    )
                )
            if n.kind == NodeKind.ROUTINE_INVOKE:
                target = n.params.get("routine")
                if not isinstance(target, str) or target not in program.routines:
                    err(Diagnostic("UNKNOWN_ROUTINE", rid, n.id, f"invoked routine {target!r} is not defined"))
                elif program.routines[target].is_plan and routine.is_plan:
                    err(Diagnostic("INVOKE_IN_PLAN", rid, n.id, "plan routines may not be nested"))

        # Kind-specific parameter and port shapes.
        for n in nodes.values():
            for msg in nodelib.check_params(n):
                err(Diagnostic("BAD_PARAM", rid, n.id, msg))
            for msg in nodelib.check_ports(n):
                err(Diagnostic("PORT_RULE", rid, n.id, msg))
            if n.kind == NodeKind.FUNCTOR_VARIABLE_MUTATION:
                fname = n.params.get("functor")
                if isinstance(fname, str) and not nodelib.functor_exists(fname):
                    err(Diagnostic("UNKNOWN_FUNCTOR", rid, n.id, f"functor {fname!r} is not registered"))

        # Loop discipline.
        if routine.is_plan:
            try:
                plan_routine_order(routine)
            except CycleError as exc:
                err(
                    Diagnostic(
                        "PR_LOOP", rid, exc.cycle[0] if exc.cycle else None,
                        "plan routines must be loop-free; cycle: " + " -> ".join(exc.cycle),
                    )
                )
        else:
            single = {
                nid: [t for (src, _p), t in routine.out_edges().items() if src == nid]
                for nid, n in nodes.items()
                if len(n.ports) == 1
            }
            adj = {nid: [t for t in ts if t in single] for nid, ts in single.items()}
            cycle = _find_cycle(adj, single.keys())
            if cycle:
                err(
                    Diagnostic(
                        "LOOP_NO_BRANCH", rid, cycle[0],
                        "cycle without any branch statement: " + " -> ".join(cycle),
                    )
                )
    return diags


def check_program(data: str | bytes | Mapping[str, Any]) -> tuple[Program | None, list[Diagnostic]]:
    """Lower frontend statements, parse, then validate; the everyday entry
    point for tools.  Embedders holding pre-lowered documents may call
    ``parse_program`` and ``validate`` directly."""
    if isinstance(data, (str, bytes)):
        try:
            tree = json.loads(data)
        except json.JSONDecodeError as exc:
            return None, [Diagnostic("BAD_DOCUMENT", "-", None, f"not valid JSON: {exc}")]
    else:
        tree = data
    lowered, diags = lower_frontend(tree)
    if lowered is None:
        return None, diags
    program, pdiags = parse_program(lowered)
    diags = diags + pdiags
    if program is None:
        return None, diags
    diags = diags + validate(program)
    if any(d.severity == "error" for d in diags):
        return None, diags
    return program, diags
