"""Plan-routine solving: skeletons, choice points, backtracking search.

Invoking a plan routine turns it into one planning problem.  The loop-free
graph is first expanded into *skeletons* — concrete node sequences obtained
by resolving data-determined branches through constant propagation, pruning
exception arms, and forking once per PlannerSelect port.  Each skeleton
carries discrete choice points (grasp, IK branch, symmetry index, slot,
tool); the solver runs a depth-first first-feasible search over them in node
order, threading a hybrid state (configuration, attachments, object pool,
pallet fill) and calling the trajectory generators as continuous samplers.

The solver is a pure function of (routine, snapshot, scene, budget, seed);
everything it read from the snapshot is reported so a speculative result can
be checked for staleness before adoption.
"""

from __future__ import annotations

import time
import zlib
from dataclasses import dataclass, replace
from typing import Any, Iterator, Mapping

import numpy as np

from .geometry import TAU, Pose, pose_from, transform_polygon
from .graph import Node, NodeKind, Routine
from .motion import (
    Infeasible,
    Trajectory,
    TrajectoryConfig,
    ee_line,
    joint_line,
    recheck,
    rrt,
    trajectory_from_tree,
)
from .nodes import DecisionRecord, OnlineParams, grasp_filter, perception_var
from .robot import CollisionWorld, RobotModel, ik, joint_distance
from .scene import Scene
from .services import pallet_response
from .values import Poison, VariableMap, to_jsonable

DEFAULT_TIME_MS = 2000.0
DEFAULT_MAX_CANDIDATES = 5000


@dataclass(frozen=True)
class Budget:
    time_ms: float = DEFAULT_TIME_MS
    max_candidates: int = DEFAULT_MAX_CANDIDATES


@dataclass(frozen=True)
class Blocked:
    """Planning cannot proceed until this variable holds a real value."""

    var: str


@dataclass(frozen=True)
class Skeleton:
    steps: tuple[tuple[Node, str | None], ...]  # (node, port taken out of it)
    select_ports: Mapping[str, str]  # PlannerSelect node id -> chosen port

    def node_ids(self) -> list[str]:
        return [n.id for n, _ in self.steps]


@dataclass(frozen=True)
class ChoicePoint:
    owner: str  # node id
    kind: str  # grasp_candidate | ik_branch | symmetry_index | target_set_element | tool_select | planner_select_port
    domain: int  # candidate count (upper bound for dependent domains)
    depends_on: tuple[str, ...] = ()


@dataclass(frozen=True)
class NodePlan:
    node_id: str
    port: str | None
    online: OnlineParams | None


@dataclass
class PlanStats:
    candidates_tried: int = 0
    checks: int = 0
    backtracks: int = 0
    time_ms: float = 0.0

    def as_tree(self) -> dict[str, Any]:
        return {
            "candidates_tried": self.candidates_tried,
            "checks": self.checks,
            "backtracks": self.backtracks,
            "time_ms": self.time_ms,
        }


@dataclass(frozen=True)
class Plan:
    steps: tuple[NodePlan, ...]
    read_values: Mapping[str, Any]  # snapshot values (canonical form) the solve depended on
    stats: PlanStats

    @property
    def read_set(self) -> frozenset[str]:
        return frozenset(self.read_values)

    def online_for(self, node_id: str) -> OnlineParams | None:
        for s in self.steps:
            if s.node_id == node_id:
                return s.online
        return None


@dataclass(frozen=True)
class PlanFailure:
    reasons: Mapping[str, Any]  # reason tree, serializable
    stats: PlanStats


PlanOutcome = Plan | PlanFailure | Blocked


class _Budget(Exception):
    pass


UNKNOWN = object()  # constant-propagation lattice top: value exists only at run time
MISSING = object()  # variable absent from the snapshot (solver decides what that means)


# ---------------------------------------------------------------------------
# Skeleton expansion
# ---------------------------------------------------------------------------


def _const_read(env: dict[str, Any], vm: VariableMap, var: str):
    if var in env:
        return env[var]
    if var in vm:
        return vm.get(var)
    return MISSING


def _planner_read_vars(node: Node) -> list[str]:
    """Variables the solver will read to bind this movement statement."""
    k = node.kind
    if k == NodeKind.MOVE_TO_PICK:
        return [perception_var(node)]
    if k == NodeKind.MOVE_TRAJECTORY_BY_VARIABLE:
        return [node.params["var"]]
    if k == NodeKind.PALLETIZATION_MOVE:
        return [node.params.get("state_var", "pallet_state")]
    if k in (NodeKind.MOVE_JOINT, NodeKind.MOVE_TO_OBJECT_POSE):
        t = node.params.get("target")
        if isinstance(t, Mapping) and "var" in t:
            return [t["var"]]
    return []


def expand_skeletons(routine: Routine, snapshot: VariableMap) -> list[Skeleton] | Blocked:
    """All concrete node sequences the routine may take, with branches
    resolved from data and PlannerSelect forking one skeleton per port in
    declared order.  Exception arms are ignored."""
    from .nodes import counter_ports, _OPS  # local: avoids import cycle at module load

    succ = routine.out_edges()
    out: list[Skeleton] = []

    def walk(
        node: Node, env: dict[str, Any], steps: list[tuple[Node, str | None]], selects: dict[str, str]
    ) -> Blocked | None:
        k = node.kind
        if k == NodeKind.ROUTINE_EXIT:
            steps.append((node, None))
            out.append(Skeleton(tuple(steps), dict(selects)))
            return None
        if k == NodeKind.PLANNER_SELECT:
            for p in node.ports:
                if p.exception:
                    continue
                nxt = succ.get((node.id, p.label))
                blocked = walk(
                    routine.nodes[nxt],
                    dict(env),
                    steps + [(node, p.label)],
                    {**selects, node.id: p.label},
                )
                if blocked is not None:
                    return blocked
            return None
        if k == NodeKind.COUNTER_BRANCH:
            var = node.params["var"]
            value = _const_read(env, snapshot, var)
            if isinstance(value, Poison) or value is UNKNOWN or value is MISSING:
                return Blocked(var)
            fn, t, f = _OPS[node.params["op"]]
            port = t if fn(value, node.params["value"]) else f
        else:
            for var in _planner_read_vars(node):
                value = _const_read(env, snapshot, var)
                if isinstance(value, Poison) or value is UNKNOWN:
                    return Blocked(var)
            port = node.first_normal_port()
            if k == NodeKind.SET_VARIABLE:
                env[node.params["var"]] = node.params["value"]
            elif k == NodeKind.FUNCTOR_VARIABLE_MUTATION:
                _propagate_functor(node, env, snapshot)
            elif k == NodeKind.CALL_SERVICE:
                from .nodes import response_var

                env[response_var(node)] = UNKNOWN
        steps.append((node, port))
        if port is None:
            out.append(Skeleton(tuple(steps), dict(selects)))
            return None
        nxt = succ.get((node.id, port))
        return walk(routine.nodes[nxt], env, steps, selects)

    blocked = walk(routine.nodes[routine.entry], {}, [], {})
    if blocked is not None:
        return blocked
    return out


def _propagate_functor(node: Node, env: dict[str, Any], snapshot: VariableMap) -> None:
    from .functors import get_functor

    f = get_functor(node.params.get("functor", ""))
    if f is None:
        return
    args = node.params.get("args", {})
    names = f.reads(args) | f.writes(args)
    staging: dict[str, Any] = {}
    for name in names:
        value = _const_read(env, snapshot, name)
        if isinstance(value, Poison) or value is UNKNOWN:
            for w in f.writes(args):
                env[w] = UNKNOWN
            return
        if value is not MISSING:
            staging[name] = value
    try:
        muts = f.apply(VariableMap(staging), args)
    except Exception:
        for w in f.writes(args):
            env[w] = UNKNOWN
        return
    probe = VariableMap(staging).apply(muts)
    for w in f.writes(args):
        if w in probe:
            env[w] = probe.get(w)


# ---------------------------------------------------------------------------
# Choice-point inspection (tests, DOT dumps); solving resolves domains lazily
# ---------------------------------------------------------------------------


def _sym_domain(snapshot: VariableMap, last_pick: str | None, nodes_by_id: Mapping[str, Node]) -> int:
    """Largest symmetry order among objects that could be held at this step."""
    ks = [max(1, int(o.get("k", 1))) for o in _objects_of(snapshot.get("picked_objects"), flat=True)]
    if not ks and last_pick is not None and last_pick in nodes_by_id:
        objs = _objects_of(snapshot.get(perception_var(nodes_by_id[last_pick])))
        ks = [max(1, int(o.get("k", 1))) for o in objs]
    return max(ks or [1])


def build_choice_points(skeleton: Skeleton, snapshot: VariableMap, scene: Scene) -> list[ChoicePoint]:
    points: list[ChoicePoint] = []
    nodes_by_id = {n.id: n for n, _ in skeleton.steps}
    last_pick: str | None = None
    for node, _port in skeleton.steps:
        k = node.kind
        if k == NodeKind.PLANNER_SELECT:
            points.append(
                ChoicePoint(node.id, "planner_select_port", len([p for p in node.ports if not p.exception]))
            )
        elif k == NodeKind.MOVE_TO_PICK:
            objects = _objects_of(snapshot.get(perception_var(node)))
            cands = grasp_filter(objects, node.params.get("filters"))
            tools = sorted({int(o.get("grasps", [])[gi].get("tool", 0)) for o, gi in cands}) if cands else []
            if len(tools) > 1:
                points.append(ChoicePoint(node.id, "tool_select", len(tools)))
            points.append(ChoicePoint(node.id, "grasp_candidate", len(cands)))
            ks = {max(1, int(o.get("k", 1))) for o, _ in cands} or {1}
            points.append(ChoicePoint(node.id, "symmetry_index", max(ks), (node.id,)))
            points.append(ChoicePoint(node.id, "ik_branch", 2, (node.id,)))
            last_pick = node.id
        elif k == NodeKind.MOVE_TO_OBJECT_POSE:
            dep = (last_pick,) if last_pick else ()
            points.append(ChoicePoint(node.id, "symmetry_index", _sym_domain(snapshot, last_pick, nodes_by_id), dep))
            points.append(ChoicePoint(node.id, "ik_branch", 2, dep))
        elif k == NodeKind.PALLETIZATION_MOVE:
            state = snapshot.get(node.params.get("state_var", "pallet_state"), [])
            cfg = scene.services.get(node.params.get("srv_id", "pallet"), {})
            n_slots = 0
            probe = _probe_footprint(snapshot)
            if isinstance(state, list) and cfg.get("size") and probe:
                fp = [rec.get("footprint", (0, 0)) for rec in state if isinstance(rec, Mapping)]
                n_slots = len(pallet_response(cfg, {"placed": fp, "footprint": probe})["slots"])
            dep = (last_pick,) if last_pick else ()
            points.append(ChoicePoint(node.id, "target_set_element", n_slots, dep))
            points.append(ChoicePoint(node.id, "symmetry_index", _sym_domain(snapshot, last_pick, nodes_by_id), dep))
            points.append(ChoicePoint(node.id, "ik_branch", 2, dep))
        elif k == NodeKind.RELATIVE_MOVE:
            method = (node.params.get("trajectory_config") or {}).get("method", "joint_line")
            if method != "ee_line":
                points.append(ChoicePoint(node.id, "ik_branch", 2))
    return points


def _probe_footprint(snapshot: VariableMap) -> tuple[float, float] | None:
    """Bounding-box footprint of the first object in sight, for estimating
    how many pallet slots a solve could choose from."""
    pools = [_objects_of(snapshot.get("picked_objects"), flat=True)]
    for name in sorted(snapshot.names()):
        if name.endswith("_perception"):
            pools.append(_objects_of(snapshot.get(name)))
    for pool in pools:
        for el in pool:
            poly = el.get("polygon")
            if poly:
                arr = np.asarray(poly, dtype=np.float64)
                mins, maxs = arr.min(axis=0), arr.max(axis=0)
                return (float(maxs[0] - mins[0]), float(maxs[1] - mins[1]))
    return None


def _objects_of(tree: Any, flat: bool = False) -> list[dict[str, Any]]:
    if flat:
        return [el for el in (tree or []) if isinstance(el, Mapping)]
    if isinstance(tree, Mapping):
        payload = tree.get("payload", tree)
        objs = payload.get("objects") if isinstance(payload, Mapping) else None
        if isinstance(objs, list):
            return [o for o in objs if isinstance(o, Mapping)]
    return []


def choices_dot(routine: Routine, snapshot: VariableMap, scene: Scene) -> str:
    """DOT rendering of the first skeleton's choice points (debugging aid)."""
    expanded = expand_skeletons(routine, snapshot)
    lines = ["digraph choices {", '  rankdir="LR";']
    if isinstance(expanded, Blocked):
        lines.append(f'  blocked [label="blocked on {expanded.var}", shape=octagon];')
        lines.append("}")
        return "\n".join(lines)
    for si, sk in enumerate(expanded):
        points = build_choice_points(sk, snapshot, scene)
        lines.append(f"  subgraph cluster_{si} {{")
        lines.append(f'    label="skeleton {si}";')
        prev = None
        for ci, cp in enumerate(points):
            name = f"s{si}c{ci}"
            lines.append(f'    {name} [label="{cp.owner}\\n{cp.kind} ({cp.domain})", shape=box];')
            if prev is not None:
                lines.append(f"    {prev} -> {name};")
            prev = name
        lines.append("  }")
    lines.append("}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# The hybrid plan state
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class _Attached:
    object_id: str
    pose: Pose  # object pose in the flange frame
    polygon: tuple[tuple[float, float], ...]
    k: int


@dataclass(frozen=True)
class _State:
    q: tuple[float, float, float]
    tool_index: int
    attached: tuple[_Attached, ...]
    # perception var -> objects from that capture still on the table (id, tree)
    pools: Mapping[str, tuple[tuple[str, Any], ...]]
    placed: tuple[tuple[str, np.ndarray], ...]  # world polygons dropped during this scope
    pallet: Mapping[str, tuple[tuple[float, float], ...]]  # state_var -> placed footprints


def _initial_state(snapshot: VariableMap, routine: Routine) -> _State:
    jps = tuple(float(v) for v in snapshot.require("jps"))
    tool = int(snapshot.get("active_tool", 0))
    attached = []
    for el in snapshot.get("picked_objects", []):
        if not isinstance(el, Mapping):
            continue
        attached.append(
            _Attached(
                str(el.get("id")),
                pose_from(el["pose"]),
                tuple((float(x), float(y)) for x, y in el.get("polygon", ())),
                max(1, int(el.get("k", 1))),
            )
        )
    return _State(jps, tool, tuple(attached), {}, (), {})


def _world_for(state: _State, scene: Scene, exclude: frozenset[str]) -> CollisionWorld:
    world: list[tuple[str, np.ndarray]] = list(scene.obstacles)
    for var in sorted(state.pools):
        for oid, tree in state.pools[var]:
            if oid in exclude:
                continue
            poly = np.asarray(tree["polygon"], dtype=np.float64)
            world.append((f"object:{oid}", transform_polygon(pose_from(tree["pose"]), poly)))
    world.extend(state.placed)
    attached: list[tuple[str, np.ndarray]] = []
    tool = scene.tool(state.tool_index)
    if len(tool.polygon) > 0:
        attached.append((f"tool:{tool.name}", np.asarray(tool.polygon, dtype=np.float64)))
    for a in state.attached:
        if not a.polygon:
            continue
        attached.append(
            (f"held:{a.object_id}", transform_polygon(a.pose, np.asarray(a.polygon, dtype=np.float64)))
        )
    return CollisionWorld.build(world, attached)


# ---------------------------------------------------------------------------
# Failure bookkeeping
# ---------------------------------------------------------------------------


class _Reasons:
    def __init__(self):
        self.tree: dict[str, Any] = {}

    def note(self, skeleton: int, node_id: str, kind: str, reason: str) -> None:
        sk = self.tree.setdefault(f"skeleton_{skeleton}", {})
        nd = sk.setdefault(node_id, {})
        cp = nd.setdefault(kind, {"tried": 0, "failures": {}})
        cp["tried"] += 1
        cp["failures"][reason] = cp["failures"].get(reason, 0) + 1

    def empty_domain(self, skeleton: int, node_id: str, kind: str, message: str) -> None:
        sk = self.tree.setdefault(f"skeleton_{skeleton}", {})
        nd = sk.setdefault(node_id, {})
        nd[kind] = {"tried": 0, "failures": {}, "empty": message}


def replan_scope(failure: PlanFailure) -> str:
    """Human-readable one-line-per-finding summary of a failure tree."""
    lines: list[str] = []
    budget = failure.reasons.get("budget")
    if budget:
        lines.append(
            f"{budget['kind']} budget {budget['limit']} exhausted after "
            f"{failure.stats.candidates_tried} candidates"
        )
    for sk_name, nodes in failure.reasons.items():
        if not sk_name.startswith("skeleton_"):
            continue
        for node_id, groups in nodes.items():
            for kind, rec in groups.items():
                if rec.get("empty"):
                    lines.append(f"{sk_name}/{node_id}: {rec['empty']}")
                    continue
                total = rec["tried"]
                parts = ", ".join(f"{n} {r}" for r, n in sorted(rec["failures"].items()))
                lines.append(f"{sk_name}/{node_id}: all {total} {kind} candidates infeasible: {parts}")
    return "\n".join(lines) if lines else "no feasible binding"


# ---------------------------------------------------------------------------
# Solving
# ---------------------------------------------------------------------------


def _rng_seed(seed: int, *salt: int) -> int:
    h = zlib.crc32(np.asarray([seed, *salt], dtype=np.int64).tobytes())
    return int(h)


def _node_salt(node_id: str) -> int:
    # Stable across processes, unlike hash() with randomized string hashing.
    return zlib.crc32(node_id.encode("utf-8"))


class _Solver:
    def __init__(
        self,
        routine: Routine,
        snapshot: VariableMap,
        scene: Scene,
        budget: Budget,
        seed: int,
        stats: PlanStats,
        reasons: _Reasons,
    ):
        self.routine = routine
        self.snapshot = snapshot
        self.scene = scene
        self.model: RobotModel = scene.model
        self.budget = budget
        self.seed = seed
        self.stats = stats
        self.reasons = reasons
        self.reads: dict[str, Any] = {}
        self.deadline = time.monotonic() + budget.time_ms / 1000.0
        self.mstats = {"checks": 0}
        self.skeleton_index = 0

    # -- bookkeeping -----------------------------------------------------------

    def _read(self, var: str) -> Any:
        value = self.snapshot.get(var)
        self.reads[var] = to_jsonable(value, strip_volatile=True)
        return value

    def _spend(self) -> None:
        self.stats.candidates_tried += 1
        if self.stats.candidates_tried > self.budget.max_candidates:
            self.reasons.tree["budget"] = {"kind": "candidate", "limit": self.budget.max_candidates}
            raise _Budget()
        if time.monotonic() > self.deadline:
            self.reasons.tree["budget"] = {"kind": "time", "limit": f"{self.budget.time_ms:g} ms"}
            raise _Budget()

    # -- trajectory generation ---------------------------------------------------

    def _motion(
        self, q0, goal_q, target_pose, cfg: TrajectoryConfig, world: CollisionWorld, salt: tuple[int, ...]
    ) -> Trajectory | Infeasible:
        before = self.mstats["checks"]
        if cfg.method == "ee_line":
            res = ee_line(self.model, q0, target_pose, cfg, world, self.mstats)
        elif cfg.method == "rrt":
            res = rrt(self.model, q0, goal_q, cfg, world, _rng_seed(self.seed, *salt), self.mstats)
        else:
            res = joint_line(self.model, q0, goal_q, cfg, world, self.mstats)
        self.stats.checks += self.mstats["checks"] - before
        return res

    def _ik_goals(self, target: Pose, q_ref) -> list[tuple[int, tuple[float, float, float]]]:
        sols = ik(self.model, target)
        order = sorted(range(len(sols)), key=lambda i: (joint_distance(sols[i], q_ref), i))
        return [(i, sols[i]) for i in order]

    # -- per-node candidate generators --------------------------------------------
    # Each yields (OnlineParams, next_state); infeasible attempts are recorded.

    def candidates(self, si: int, node: Node, state: _State) -> Iterator[tuple[OnlineParams, _State]]:
        k = node.kind
        if k == NodeKind.MOVE_JOINT:
            yield from self._cand_move_joint(si, node, state)
        elif k == NodeKind.RELATIVE_MOVE:
            yield from self._cand_relative(si, node, state)
        elif k == NodeKind.MOVE_TO_PICK:
            yield from self._cand_pick(si, node, state)
        elif k == NodeKind.MOVE_TO_OBJECT_POSE:
            yield from self._cand_object_pose(si, node, state)
        elif k == NodeKind.PALLETIZATION_MOVE:
            yield from self._cand_pallet(si, node, state)
        elif k == NodeKind.MOVE_TRAJECTORY_BY_VARIABLE:
            yield from self._cand_by_variable(si, node, state)
        else:
            raise AssertionError(f"no candidate generator for {k.value}")

    def _cfg(self, node: Node, default_method: str = "joint_line") -> TrajectoryConfig:
        return TrajectoryConfig.from_params(node.params.get("trajectory_config"), default_method)

    def _cand_move_joint(self, si, node, state):
        cfg = self._cfg(node)
        t = node.params["target"]
        if isinstance(t, Mapping):
            t = self._read(t["var"])
            if t is None:
                self.reasons.empty_domain(si, node.id, "target", "target variable undefined")
                return
        goal = tuple(float(v) for v in t)
        self._spend()
        world = _world_for(state, self.scene, frozenset())
        res = self._motion(state.q, goal, None, cfg, world, (_node_salt(node.id), 0))
        if isinstance(res, Infeasible):
            self.reasons.note(si, node.id, "trajectory", res.reason)
            return
        yield OnlineParams(res), replace(state, q=res.end)

    def _cand_relative(self, si, node, state):
        cfg = self._cfg(node)
        from .robot import fk

        offset = pose_from(node.params["offset"])
        target = fk(self.model, state.q).compose(offset)
        world = _world_for(state, self.scene, frozenset())
        if cfg.method == "ee_line":
            self._spend()
            res = self._motion(state.q, None, target, cfg, world, (_node_salt(node.id), 0))
            if isinstance(res, Infeasible):
                self.reasons.note(si, node.id, "trajectory", res.reason)
                return
            yield OnlineParams(res), replace(state, q=res.end)
            return
        goals = self._ik_goals(target, state.q)
        if not goals:
            self.reasons.empty_domain(si, node.id, "ik_branch", "relative target unreachable")
            return
        for branch, goal in goals:
            self._spend()
            res = self._motion(state.q, goal, target, cfg, world, (_node_salt(node.id), branch))
            if isinstance(res, Infeasible):
                self.reasons.note(si, node.id, "ik_branch", res.reason)
                continue
            yield (
                OnlineParams(res, DecisionRecord(ik_branch=branch)),
                replace(state, q=res.end),
            )

    def _cand_pick(self, si, node, state):
        cfg = self._cfg(node)
        pvar = perception_var(node)
        if pvar in state.pools:
            pool = state.pools[pvar]
            self.reads.setdefault(pvar, to_jsonable(self.snapshot.get(pvar), strip_volatile=True))
        else:
            # First pick from this capture adopts the snapshot's object list.
            pool = tuple((str(o["id"]), o) for o in _objects_of(self._read(pvar)))
        pool_ids = {oid for oid, _ in pool}
        cands = [
            (o, gi)
            for o, gi in grasp_filter([t for _, t in pool], node.params.get("filters"))
            if str(o["id"]) in pool_ids
        ]
        if not cands:
            self.reasons.empty_domain(si, node.id, "grasp_candidate", "no grasp candidates after filters")
            return
        self._read("active_tool")
        self._read("jps")
        tools = sorted({int(o["grasps"][gi].get("tool", 0)) for o, gi in cands})
        for tool_index in tools:
            if not (0 <= tool_index < len(self.scene.tools)):
                self.reasons.note(si, node.id, "tool_select", "unknown tool")
                continue
            tool = self.scene.tool(tool_index)
            for obj_tree, gi in cands:
                g = obj_tree["grasps"][gi]
                if int(g.get("tool", 0)) != tool_index:
                    continue
                ids = tuple(str(x) for x in (g.get("object_ids") or [obj_tree["id"]]))
                anchor = pose_from(obj_tree["pose"])
                kk = max(1, int(obj_tree.get("k", 1)))
                gpose = pose_from(g["pose"])
                seen: list[Pose] = []
                for sym in range(kk):
                    flange = anchor.compose(Pose.rot(TAU * sym / kk)).compose(gpose).compose(tool.tcp_offset)
                    if any(flange.almost_equal(s) for s in seen):
                        continue
                    seen.append(flange)
                    by_id = dict(pool)
                    if any(oid not in by_id for oid in ids):
                        continue  # a co-picked object is already gone from this capture
                    held_state = replace(state, tool_index=tool_index, pools={**state.pools, pvar: pool})
                    world = _world_for(held_state, self.scene, frozenset(ids))
                    goals = self._ik_goals(flange, state.q)
                    if not goals:
                        self._spend()
                        self.reasons.note(si, node.id, "grasp_candidate", "unreachable")
                        continue
                    for branch, goal in goals:
                        self._spend()
                        res = self._motion(
                            state.q, goal, flange, cfg, world, (_node_salt(node.id), gi, sym, branch)
                        )
                        if isinstance(res, Infeasible):
                            self.reasons.note(si, node.id, "grasp_candidate", res.reason)
                            continue
                        attach = []
                        for oid in ids:
                            otree = by_id[oid]
                            a = flange.inverse().compose(pose_from(otree["pose"]))
                            attach.append(
                                _Attached(
                                    oid,
                                    a,
                                    tuple((float(x), float(y)) for x, y in otree.get("polygon", ())),
                                    max(1, int(otree.get("k", 1))),
                                )
                            )
                        decisions = DecisionRecord(
                            picked=tuple((a.object_id, a.pose) for a in attach),
                            grasp_index=gi,
                            ik_branch=branch,
                            symmetry_index=sym,
                            tool_index=tool_index,
                        )
                        nxt = replace(
                            held_state,
                            q=res.end,
                            attached=held_state.attached + tuple(attach),
                            pools={
                                **state.pools,
                                pvar: tuple((oid, t) for oid, t in pool if oid not in ids),
                            },
                        )
                        yield OnlineParams(res, decisions), nxt

    def _place_targets(self, node, state, target: Pose):
        """(symmetry, flange pose) choices that bring the most recently
        attached object to ``target``."""
        if not state.attached:
            return None, []
        a = state.attached[-1]
        inv = a.pose.inverse()
        seen: list[tuple[int, Pose]] = []
        for j in range(max(1, a.k)):
            ee = target.compose(Pose.rot(TAU * j / max(1, a.k))).compose(inv)
            if any(ee.almost_equal(e) for _, e in seen):
                continue
            seen.append((j, ee))
        return a, seen

    def _cand_object_pose(self, si, node, state):
        cfg = self._cfg(node)
        t = node.params["target"]
        if isinstance(t, Mapping):
            t = self._read(t["var"])
            if t is None:
                self.reasons.empty_domain(si, node.id, "target", "target variable undefined")
                return
        self._read("picked_objects")
        target = pose_from(t)
        held, flanges = self._place_targets(node, state, target)
        if held is None:
            self.reasons.empty_domain(si, node.id, "symmetry_index", "nothing is attached")
            return
        world = _world_for(state, self.scene, frozenset())
        for j, flange in flanges:
            if cfg.method == "ee_line":
                pairs = [(-1, None)]
            else:
                pairs = self._ik_goals(flange, state.q)
                if not pairs:
                    self.reasons.note(si, node.id, "symmetry_index", "unreachable")
                    continue
            for branch, goal in pairs:
                self._spend()
                res = self._motion(state.q, goal, flange, cfg, world, (_node_salt(node.id), j, branch))
                if isinstance(res, Infeasible):
                    self.reasons.note(si, node.id, "symmetry_index" if branch < 0 else "ik_branch", res.reason)
                    continue
                decisions = DecisionRecord(symmetry_index=j, ik_branch=branch if branch >= 0 else None)
                yield OnlineParams(res, decisions), replace(state, q=res.end)

    def _cand_pallet(self, si, node, state):
        cfg = self._cfg(node)
        srv_id = node.params.get("srv_id", "pallet")
        state_var = node.params.get("state_var", "pallet_state")
        pallet_cfg = self.scene.services.get(srv_id)
        if not pallet_cfg or not pallet_cfg.get("size"):
            self.reasons.empty_domain(si, node.id, "target_set_element", f"no pallet service {srv_id!r}")
            return
        if not state.attached:
            self.reasons.empty_domain(si, node.id, "target_set_element", "nothing is attached")
            return
        held = state.attached[-1]
        poly = np.asarray(held.polygon, dtype=np.float64)
        mins, maxs = poly.min(axis=0), poly.max(axis=0)
        footprint = (float(maxs[0] - mins[0]), float(maxs[1] - mins[1]))
        center_off = Pose(float((mins[0] + maxs[0]) / 2), float((mins[1] + maxs[1]) / 2), 0.0)
        if state_var in state.pallet:
            placed_fps = state.pallet[state_var]
        else:
            raw = self._read(state_var) or []
            placed_fps = tuple(
                tuple(rec.get("footprint", (0.0, 0.0))) for rec in raw if isinstance(rec, Mapping)
            )
        slots = pallet_response(pallet_cfg, {"placed": list(placed_fps), "footprint": footprint})["slots"]
        if not slots:
            self.reasons.empty_domain(si, node.id, "target_set_element", "pallet is full")
            return
        world = _world_for(state, self.scene, frozenset())
        for slot in slots:
            slot_pose = pose_from(slot["pose"])
            obj_target = slot_pose.compose(center_off.inverse())
            _held, flanges = self._place_targets(node, state, obj_target)
            for j, flange in flanges:
                for branch, goal in self._ik_goals(flange, state.q):
                    self._spend()
                    res = self._motion(
                        state.q, goal, flange, cfg, world, (_node_salt(node.id), slot["index"], j, branch)
                    )
                    if isinstance(res, Infeasible):
                        self.reasons.note(si, node.id, "target_set_element", res.reason)
                        continue
                    record = {
                        "index": slot["index"],
                        "pose": [obj_target.x, obj_target.y, obj_target.theta],
                        "footprint": list(footprint),
                    }
                    decisions = DecisionRecord(
                        symmetry_index=j,
                        ik_branch=branch,
                        target_index=slot["index"],
                        pallet_record=record,
                    )
                    nxt = replace(
                        state,
                        q=res.end,
                        pallet={**state.pallet, state_var: placed_fps + (footprint,)},
                    )
                    yield OnlineParams(res, decisions), nxt

    def _cand_by_variable(self, si, node, state):
        var = node.params["var"]
        tree = self._read(var)
        if tree is None:
            self.reasons.empty_domain(si, node.id, "trajectory", f"variable {var!r} undefined")
            return
        try:
            traj = trajectory_from_tree(tree)
        except ValueError as exc:
            self.reasons.empty_domain(si, node.id, "trajectory", f"bad trajectory: {exc}")
            return
        if tuple(traj.waypoints[0]) != tuple(state.q):
            self.reasons.empty_domain(si, node.id, "trajectory", "trajectory does not start at the current configuration")
            return
        self._spend()
        cfg = self._cfg(node)
        world = _world_for(state, self.scene, frozenset())
        before = self.mstats["checks"]
        res = recheck(self.model, traj, world, cfg.resolution, self.mstats)
        self.stats.checks += self.mstats["checks"] - before
        if res is not None:
            self.reasons.note(si, node.id, "trajectory", "collision")
            return
        certified = replace(traj, certificate=replace(traj.certificate, resolution=cfg.resolution, margin=world.margin, collision_free=True))
        yield OnlineParams(certified), replace(state, q=certified.end)

    # -- state transitions for non-movement nodes -----------------------------------

    def advance(self, node: Node, state: _State) -> _State:
        if node.kind == NodeKind.PLACE_OBJECT:
            from .robot import fk

            flange = fk(self.model, state.q)
            placed = list(state.placed)
            for a in state.attached:
                if a.polygon:
                    world_pose = flange.compose(a.pose)
                    placed.append(
                        (
                            f"placed:{a.object_id}",
                            transform_polygon(world_pose, np.asarray(a.polygon, dtype=np.float64)),
                        )
                    )
            return replace(state, attached=(), placed=tuple(placed))
        return state

    # -- the search -------------------------------------------------------------------

    def solve_skeleton(self, si: int, sk: Skeleton) -> tuple[NodePlan, ...] | None:
        self.skeleton_index = si
        steps: list[NodePlan] = [None] * len(sk.steps)  # type: ignore[list-item]

        def rec(i: int, state: _State) -> bool:
            if i == len(sk.steps):
                return True
            node, port = sk.steps[i]
            k = node.kind
            if k == NodeKind.PLANNER_SELECT:
                steps[i] = NodePlan(node.id, port, OnlineParams(None, DecisionRecord(select_port=port)))
                return rec(i + 1, state)
            if k in _MOVEMENT_KINDS:
                for online, nxt in self.candidates(si, node, state):
                    steps[i] = NodePlan(node.id, port, online)
                    if rec(i + 1, nxt):
                        return True
                    self.stats.backtracks += 1
                return False
            steps[i] = NodePlan(node.id, port, None)
            return rec(i + 1, self.advance(node, state))

        if rec(0, _initial_state(self.snapshot, self.routine)):
            return tuple(steps)
        return None


_MOVEMENT_KINDS = frozenset(
    {
        NodeKind.MOVE_JOINT,
        NodeKind.MOVE_TO_PICK,
        NodeKind.RELATIVE_MOVE,
        NodeKind.MOVE_TO_OBJECT_POSE,
        NodeKind.PALLETIZATION_MOVE,
        NodeKind.MOVE_TRAJECTORY_BY_VARIABLE,
    }
)


def plan_routine(
    routine: Routine,
    snapshot: VariableMap,
    scene: Scene,
    budget: Budget | None = None,
    seed: int = 0,
) -> PlanOutcome:
    """Solve one plan-routine invocation.  Deterministic in all arguments."""
    budget = budget or Budget()
    t0 = time.monotonic()
    stats = PlanStats()
    reasons = _Reasons()
    expanded = expand_skeletons(routine, snapshot)
    if isinstance(expanded, Blocked):
        return expanded
    solver = _Solver(routine, snapshot, scene, budget, seed, stats, reasons)
    solver._read("jps")
    solver._read("active_tool")
    solver._read("picked_objects")
    try:
        for si, sk in enumerate(expanded):
            steps = solver.solve_skeleton(si, sk)
            if steps is not None:
                stats.time_ms = (time.monotonic() - t0) * 1000.0
                return Plan(steps, dict(solver.reads), stats)
    except _Budget:
        pass
    stats.time_ms = (time.monotonic() - t0) * 1000.0
    return PlanFailure(reasons.tree, stats)
