"""Program execution with a speculative pre-planning pipeline.

The run is a deterministic discrete-event simulation.  A single virtual
clock, advanced only by service latencies, trajectory durations, and plan
waits, timestamps every trace event, so equal seeds replay byte-identical
traces.

Two logical contexts share the loop:

* The **execution context** owns the live variable map and the service
  registry's effectful channel.  It interprets one node per step, assigning
  each execution a monotonically increasing dynamic ID.

* The **pre-planning context** owns a shadow program counter and a shadow
  map that may hold poison markers.  Between execution steps it advances by
  ``simulate_node``, dispatching a background solve whenever it reaches a
  plan-routine invoke whose inputs are real.  Guessed branches (any node
  with an exception port) are journaled; when execution later takes a
  different port, the pipeline flushes — pending jobs past the divergence
  are cancelled and the shadow reforks from the live state, like
  misprediction recovery in a pipelined CPU.

Solves run synchronously under the hood, but their *cost* is modelled in
virtual time (a deterministic function of search effort), and results only
become adoptable at their virtual completion instant.  Execution adopting a
finished job waits zero time; adopting an unfinished one, or planning
inline, accrues waiting time in the metrics.  Because solves are resolved at
dispatch, the ``plan_done`` event is written right after ``plan_dispatch``
carrying the future ``t_ms`` of its virtual completion.
"""

from __future__ import annotations

import time as _time
import zlib
from dataclasses import dataclass, field, replace
from typing import Any, Mapping

import numpy as np

from .graph import Node, NodeKind, Program, Routine
from .nodes import (
    NodeExecutionError,
    ServiceFault,
    Unsimulatable,
    execute_node,
    simulate_node,
)
from .planner import Blocked, Budget, Plan, PlanFailure, PlanStats, expand_skeletons, plan_routine, replan_scope
from .scene import Scene, WorldState, static_env_tree
from .services import ServiceRegistry, SimClock
from .trace import MetricsCollector, PlanInvocationRecord, TraceWriter
from .values import VariableMap, init_map, map_digest, to_jsonable

MAX_STACK = 64

# Shadow scheduler states.
_RUNNING = "running"
_UNFORKED = "unforked"  # before the first fork / right after a flush
_POISON = "poison"  # stalled on a poisoned read; restart when execution catches up
_BLOCKED = "blocked"  # stalled for good (execution will fail or repath here)
_LOOKAHEAD = "lookahead"  # dispatch budget used up; resumes after an adoption
_DONE = "done"


@dataclass(frozen=True)
class PlanningCostModel:
    """Virtual duration of one solve, as a function of search effort.

    Planning occupies the virtual timeline like any other work, but its
    duration must be deterministic for traces to replay; wall time is not.
    The linear model below is calibrated so a routine pick-cycle solve lands
    in the low hundreds of milliseconds, the regime the planning/waiting
    benchmark probes.
    """

    base_ms: float = 100.0
    per_candidate_ms: float = 2.0
    per_check_us: float = 10.0

    def cost_ms(self, stats: PlanStats) -> float:
        return (
            self.base_ms
            + self.per_candidate_ms * stats.candidates_tried
            + self.per_check_us * stats.checks / 1000.0
        )


@dataclass
class RunOptions:
    preplanning: bool = True
    seed: int = 0
    lookahead: int = 2  # max plan-routine invocations dispatched ahead of execution
    budget: Budget = field(default_factory=Budget)
    cost: PlanningCostModel = field(default_factory=PlanningCostModel)
    planning_inflate_ms: float = 0.0  # added to every solve's virtual duration
    realtime_scale: float = 0.0  # 0 = fast-forward; 1 = roughly real time
    faults: Mapping[str, Any] | None = None  # overrides the scene's fault schedule
    max_steps: int = 1_000_000


@dataclass
class RunReport:
    status: str  # ok | error | aborted
    error: str | None
    digest: str
    metrics: dict[str, Any]
    event_counts: dict[str, int]
    side_effects: list[dict[str, Any]]
    final_map: VariableMap
    steps: int

    def as_tree(self) -> dict[str, Any]:
        return {
            "status": self.status,
            "error": self.error,
            "digest": self.digest,
            "metrics": self.metrics,
            "event_counts": self.event_counts,
            "steps": self.steps,
        }


def _job_seed(run_seed: int, dyn_id: int) -> int:
    # One seed per (run, invocation): pre-planned and inline solves of the
    # same dynamic ID sample identical trajectories.
    return zlib.crc32(np.asarray([run_seed, dyn_id], dtype=np.int64).tobytes())


def _fault_map(tree: Mapping[str, Any] | None) -> dict[int, Any]:
    falling = (tree or {}).get("falling", {})
    return {int(k): v for k, v in falling.items()}


@dataclass
class _Frame:
    routine: Routine
    node: Node  # next node to run in this frame
    invoke_dyn: int | None  # dyn id of the invoke that opened this frame
    plan: Plan | None  # bound plan when this frame runs a plan routine


@dataclass
class _Job:
    dyn_id: int
    routine_id: str
    snapshot_revision: int
    result: Plan | PlanFailure
    virtual_ms: float
    dispatch_t: float
    done_at: float


class _RecordingServices:
    """Routes node service calls through the registry, logging each
    successful call to the trace and the ordered side-effect list."""

    def __init__(self, registry: ServiceRegistry, interp: "Interpreter"):
        self._registry = registry
        self._interp = interp
        self.node_id = "-"

    def call(self, srv_id: str, request: Mapping[str, Any], dyn_id: int) -> Mapping[str, Any]:
        envelope = self._registry.call(srv_id, request, dyn_id)
        self._interp._record_side_effect(dyn_id, self.node_id, srv_id, request, envelope)
        return envelope


class Interpreter:
    def __init__(
        self,
        program: Program,
        scene: Scene,
        options: RunOptions | None = None,
        trace: TraceWriter | None = None,
    ):
        self.program = program
        self.scene = scene
        self.options = options or RunOptions()
        self.trace = trace or TraceWriter()
        self.metrics = MetricsCollector()
        self.clock = SimClock()
        self.world = WorldState(scene)
        faults = self.options.faults if self.options.faults is not None else scene.faults
        self.registry = ServiceRegistry(scene, self.world, self.clock, _fault_map(faults))
        self.services = _RecordingServices(self.registry, self)
        self.vm = init_map(static_env_tree(scene), scene.home)
        self.side_effects: list[dict[str, Any]] = []

        main = program.routines[program.main]
        self.frames: list[_Frame] = [_Frame(main, main.nodes[main.entry], None, None)]
        self.next_dyn = 0
        self.steps = 0
        self.finished = False
        self.status = "ok"
        self.error: str | None = None
        self._abort = False

        # --- pre-planning context ---
        self.sh_frames: list[_Frame] = []
        self.sh_vm: VariableMap | None = None
        self.sh_next_dyn = 0
        self.journal: dict[int, tuple[str, str | None]] = {}
        self.jobs: dict[int, _Job] = {}
        self.worker_free_at = 0.0
        self.sh_state = _UNFORKED
        self.sh_stop_origin: int | None = None  # DynId that wrote the poison we stalled on
        self.sh_ready_at = 0.0

    # ------------------------------------------------------------------ utils

    def _emit(self, dyn: int, node: str, event: str, data: Any = None, t: float | None = None):
        self.trace.emit(self.clock.now_ms if t is None else t, dyn, node, event, data)

    def _record_side_effect(self, dyn_id, node_id, srv_id, request, envelope):
        rec = {
            "dyn_id": dyn_id,
            "node": node_id,
            "srv": srv_id,
            "request": to_jsonable(request, strip_volatile=False),
            "response": to_jsonable(envelope, strip_volatile=False),
        }
        self.side_effects.append(rec)
        self._emit(
            dyn_id, node_id, "side_effect",
            {"srv": srv_id, "request": rec["request"], "response": rec["response"]},
        )

    def abort(self) -> None:
        self._abort = True

    # -------------------------------------------------------------- run loop

    def run(self) -> RunReport:
        while not self.finished:
            before = self.clock.now_ms
            self.step()
            if self.options.realtime_scale > 0 and self.clock.now_ms > before:
                _time.sleep((self.clock.now_ms - before) / 1000.0 * self.options.realtime_scale)
        return self.report()

    def report(self) -> RunReport:
        return RunReport(
            status=self.status,
            error=self.error,
            digest=map_digest(self.vm),
            metrics=self.metrics.as_tree(),
            event_counts=self.trace.counts(),
            side_effects=self.side_effects,
            final_map=self.vm,
            steps=self.steps,
        )

    def step(self) -> None:
        """Execute one node on the execution context (draining the
        pre-planning context first)."""
        if self.finished:
            return
        if self._abort:
            self.status = "aborted"
            self.finished = True
            return
        self.steps += 1
        if self.steps > self.options.max_steps:
            self.status = "error"
            self.error = "STEP_LIMIT: execution did not terminate"
            self.finished = True
            return
        if self.options.preplanning:
            self._drain_shadow()
        try:
            self._exec_step()
        except (NodeExecutionError, ServiceFault) as exc:
            self.status = "error"
            self.error = str(exc)  # "CODE: message"
            self.finished = True

    # -------------------------------------------------------- execution side

    def _exec_step(self) -> None:
        frame = self.frames[-1]
        node = frame.node
        d = self.next_dyn
        self.next_dyn += 1
        self._emit(d, node.id, "enter", {"routine": frame.routine.id})

        if node.kind == NodeKind.ROUTINE_INVOKE:
            self._exec_invoke(frame, node, d)
            return

        if node.kind == NodeKind.ROUTINE_EXIT:
            self._emit(d, node.id, "exit", {"port": None})
            done = self.frames.pop()
            if not self.frames:
                self.finished = True
                return
            parent = self.frames[-1]
            inv = parent.node  # the invoke that opened the finished frame
            port = inv.first_normal_port()
            self._emit(done.invoke_dyn, inv.id, "exit", {"port": port})
            self._advance(parent, port)
            return

        online = frame.plan.online_for(node.id) if frame.plan is not None else None
        self.services.node_id = node.id
        outcome = execute_node(node, self.vm, online, self.services, self.scene.model, d)
        if outcome.mutations:
            self.vm = self.vm.apply(list(outcome.mutations))
        data: dict[str, Any] = {"port": outcome.taken_port}
        if node.kind in _MOVE_KINDS:
            data["jps"] = list(self.vm.get("jps", []))
        self._emit(d, node.id, "exit", data)
        self._advance(frame, outcome.taken_port)
        self._check_journal(d, node, outcome.taken_port)

    def _advance(self, frame: _Frame, port: str | None) -> None:
        if port is None:
            return
        nxt = frame.routine.successor(frame.node.id, port)
        if nxt is None:
            raise NodeExecutionError(
                "UNHANDLED_EXCEPTION", f"no edge out of {frame.node.id!r} port {port!r}"
            )
        frame.node = frame.routine.nodes[nxt]

    def _exec_invoke(self, frame: _Frame, node: Node, d: int) -> None:
        target = self.program.routines.get(node.params.get("routine", ""))
        if target is None:
            raise NodeExecutionError("UNHANDLED_EXCEPTION", f"unknown routine {node.params.get('routine')!r}")
        if len(self.frames) >= MAX_STACK:
            raise NodeExecutionError("UNHANDLED_EXCEPTION", "routine call stack overflow")

        if target.is_plan:
            result = self._resolve_plan(node, target, d)
            if not isinstance(result, Plan):
                port = self._exception_port(node)
                if port is None:
                    raise NodeExecutionError(
                        "UNHANDLED_EXCEPTION",
                        f"planning failed for {target.id!r} and {node.id!r} declares no exception port",
                    )
                self._emit(d, node.id, "exit", {"port": port})
                self._advance(frame, port)
                self._check_journal(d, node, port)
                return
            self.frames.append(_Frame(target, target.nodes[target.entry], d, result))
        else:
            self.frames.append(_Frame(target, target.nodes[target.entry], d, None))
        # The body leaves through the invoke's first normal port when it
        # finishes; that is this node's taken port, decided now.
        self._check_journal(d, node, node.first_normal_port())

    def _exception_port(self, node: Node) -> str | None:
        for p in node.ports:
            if p.exception:
                return p.label
        return None

    # ----------------------------------------------------- planning & adoption

    def _virtual_cost(self, stats: PlanStats) -> float:
        return self.options.cost.cost_ms(stats) + self.options.planning_inflate_ms

    def _solve(self, target: Routine, snapshot: VariableMap, dyn: int) -> tuple[Plan | PlanFailure, float]:
        seed = _job_seed(self.options.seed, dyn)
        result = plan_routine(target, snapshot, self.scene, self.options.budget, seed)
        if isinstance(result, Blocked):
            # The read can never resolve before this invocation runs.
            result = PlanFailure(
                {"blocked": {"var": result.var, "reason": "value unavailable at planning time"}},
                PlanStats(),
            )
        return result, self._virtual_cost(result.stats)

    def _resolve_plan(self, node: Node, target: Routine, d: int) -> Plan | PlanFailure:
        now = self.clock.now_ms
        job = self.jobs.pop(d, None)
        if job is not None and self._adoptable(job):
            waiting = max(0.0, job.done_at - now)
            if waiting > 0:
                self._emit(d, node.id, "wait_begin", {"reason": "plan"})
                self.clock.advance(waiting)
                self._emit(d, node.id, "wait_end", {"waited_ms": waiting})
            self._emit(d, node.id, "plan_adopt", {
                "routine": target.id,
                "mode": "preplan",
                "waiting_ms": waiting,
                "planning_ms": job.virtual_ms,
            })
            outcome = "plan" if isinstance(job.result, Plan) else "failure"
            self.metrics.record(PlanInvocationRecord(d, target.id, job.virtual_ms, waiting, True, outcome))
            return job.result

        if job is not None:
            # Shadow state no longer matches reality: drop everything built on it.
            self._flush("stale_plan", d)

        # Inline: block the execution context on a fresh solve.
        self._emit(d, node.id, "plan_dispatch", {
            "routine": target.id, "mode": "inline", "snapshot_revision": self.vm.revision,
        })
        result, cost = self._solve(target, self.vm, d)
        self._emit(d, node.id, "wait_begin", {"reason": "plan"})
        self.clock.advance(cost)
        self._emit(d, node.id, "wait_end", {"waited_ms": cost})
        self._emit(d, node.id, "plan_done", self._done_data(target.id, result, cost))
        self._emit(d, node.id, "plan_adopt", {
            "routine": target.id, "mode": "inline", "waiting_ms": cost, "planning_ms": cost,
        })
        outcome = "plan" if isinstance(result, Plan) else "failure"
        self.metrics.record(PlanInvocationRecord(d, target.id, cost, cost, False, outcome))
        return result

    def _adoptable(self, job: _Job) -> bool:
        if job.snapshot_revision != self.vm.revision:
            return False
        if isinstance(job.result, Plan):
            live = {
                name: to_jsonable(self.vm.get(name), strip_volatile=True)
                for name in job.result.read_set
            }
            if live != dict(job.result.read_values):
                return False
        return True

    def _done_data(self, routine_id: str, result: Plan | PlanFailure, cost: float) -> dict[str, Any]:
        data = {
            "routine": routine_id,
            "outcome": "plan" if isinstance(result, Plan) else "failure",
            "planning_ms": cost,
            "candidates_tried": result.stats.candidates_tried,
            "checks": result.stats.checks,
        }
        if isinstance(result, PlanFailure):
            data["summary"] = replan_scope(result)
        return data

    def _check_journal(self, d: int, node: Node, port: str | None) -> None:
        entry = self.journal.pop(d, None)
        if entry is None:
            return
        node_id, guessed = entry
        if node_id != node.id or guessed != port:
            self._flush("misprediction", d)

    # ---------------------------------------------------------- shadow side

    def _flush(self, cause: str, divergence: int) -> None:
        """Cancel speculative work past the divergence point; the shadow
        reforks from live state at the next drain."""
        cancelled = sorted(k for k in self.jobs if k > divergence)
        for k in cancelled:
            del self.jobs[k]
        self.journal.clear()
        self._emit(divergence, "-", "flush", {
            "cause": cause, "divergence": divergence, "cancelled": cancelled,
        })
        self.sh_state = _UNFORKED

    def _refork(self) -> None:
        self.sh_frames = [replace(f) for f in self.frames]
        self.sh_vm = self.vm.as_shadow()
        self.sh_next_dyn = self.next_dyn
        self.journal.clear()
        self.sh_state = _RUNNING
        self.sh_stop_origin = None
        self.sh_ready_at = self.clock.now_ms

    def _drain_shadow(self) -> None:
        guard = 0
        while True:
            guard += 1
            if guard > 200_000:
                raise RuntimeError("pre-planning drain did not settle")
            if self.sh_state == _DONE:
                return
            if self.sh_state == _UNFORKED:
                self._refork()
            elif self.sh_state in (_POISON, _BLOCKED):
                # A poison stall clears once execution has run the node that
                # produced the value (the live map then holds it for real); a
                # hard stall clears only when execution catches up entirely.
                produced = (
                    self.sh_state == _POISON
                    and self.sh_stop_origin is not None
                    and self.next_dyn > self.sh_stop_origin
                )
                if produced or self.sh_next_dyn <= self.next_dyn:
                    self._emit(self.next_dyn, "-", "flush", {
                        "cause": "poison_restart", "divergence": self.next_dyn, "cancelled": [],
                    })
                    self._refork()
                else:
                    return
            elif self.sh_state == _LOOKAHEAD:
                if len(self.jobs) >= self.options.lookahead:
                    return
                self.sh_state = _RUNNING
            if not self._shadow_step():
                return

    def _shadow_step(self) -> bool:
        """Advance the shadow by one node.  False = stalled or finished."""
        if not self.sh_frames:
            self.sh_state = _DONE
            return False
        frame = self.sh_frames[-1]
        node = frame.node
        d = self.sh_next_dyn

        if node.kind == NodeKind.ROUTINE_INVOKE:
            return self._shadow_invoke(frame, node, d)

        if node.kind == NodeKind.ROUTINE_EXIT:
            self.sh_next_dyn += 1
            self.sh_frames.pop()
            if not self.sh_frames:
                self.sh_state = _DONE
                return False
            parent = self.sh_frames[-1]
            self._advance_shadow(parent, parent.node.first_normal_port())
            return True

        online = frame.plan.online_for(node.id) if frame.plan is not None else None
        sim = simulate_node(node, self.sh_vm, online, self.scene.model)
        if isinstance(sim, Unsimulatable):
            self.sh_state = _POISON if sim.blocking_var else _BLOCKED
            self.sh_stop_origin = (
                self.sh_vm.poison_origin(sim.blocking_var) if sim.blocking_var else None
            )
            self._emit(d, node.id, "poison_stop", {"var": sim.blocking_var, "reason": sim.reason})
            return False
        self.sh_next_dyn += 1
        if sim.poisons:
            self.sh_vm = self.sh_vm.poison_many(list(sim.poisons), d)
        elif sim.mutations:
            self.sh_vm = self.sh_vm.apply(list(sim.mutations))
        if sim.guessed or any(p.exception for p in node.ports):
            self.journal[d] = (node.id, sim.taken_port)
        self._advance_shadow(frame, sim.taken_port)
        return True

    def _shadow_invoke(self, frame: _Frame, node: Node, d: int) -> bool:
        target = self.program.routines.get(node.params.get("routine", ""))
        if target is None or len(self.sh_frames) >= MAX_STACK:
            self.sh_state = _BLOCKED
            return False

        if not target.is_plan:
            self.sh_next_dyn += 1
            if any(p.exception for p in node.ports):
                self.journal[d] = (node.id, node.first_normal_port())
            self.sh_frames.append(_Frame(target, target.nodes[target.entry], d, None))
            return True

        job = self.jobs.get(d)
        if job is None:
            if len(self.jobs) >= self.options.lookahead:
                self.sh_state = _LOOKAHEAD
                return False
            snapshot = self.sh_vm.snapshot()
            blocked_var = self._blocking_poison(target, snapshot)
            if blocked_var is not None:
                self.sh_state = _POISON
                self.sh_stop_origin = snapshot.poison_origin(blocked_var)
                self._emit(d, node.id, "poison_stop", {"var": blocked_var, "reason": "plan input poisoned"})
                return False
            dispatch_t = max(self.clock.now_ms, self.sh_ready_at)
            result, cost = self._solve(target, snapshot, d)
            done_at = max(self.worker_free_at, dispatch_t) + cost
            self.worker_free_at = done_at
            job = _Job(d, target.id, snapshot.revision, result, cost, dispatch_t, done_at)
            self.jobs[d] = job
            self._emit(d, node.id, "plan_dispatch", {
                "routine": target.id, "mode": "preplan", "snapshot_revision": snapshot.revision,
            }, t=dispatch_t)
            self._emit(d, node.id, "plan_done", self._done_data(target.id, result, cost), t=done_at)
        # The shadow needs the result to continue; model that dependency in
        # virtual time even though the solve already ran.
        self.sh_ready_at = max(self.sh_ready_at, job.done_at)

        self.sh_next_dyn += 1
        if isinstance(job.result, Plan):
            self.journal[d] = (node.id, node.first_normal_port())
            self.sh_frames.append(_Frame(target, target.nodes[target.entry], d, job.result))
        else:
            port = self._exception_port(node)
            self.journal[d] = (node.id, port if port is not None else node.first_normal_port())
            if port is None:
                self.sh_state = _BLOCKED  # execution will abort here anyway
                return False
            self._advance_shadow(frame, port)
        return True

    def _blocking_poison(self, target: Routine, snapshot: VariableMap) -> str | None:
        """The poisoned variable that makes this plan invocation unplannable
        right now, if any.  Non-poisoned Blocked results are permanent
        failures, not waits; they go through the solver."""
        expanded = expand_skeletons(target, snapshot)
        if isinstance(expanded, Blocked) and snapshot.is_poisoned(expanded.var):
            return expanded.var
        return None

    def _advance_shadow(self, frame: _Frame, port: str | None) -> None:
        if port is None:
            return
        nxt = frame.routine.successor(frame.node.id, port)
        if nxt is None:
            self.sh_state = _BLOCKED
            return
        frame.node = frame.routine.nodes[nxt]


_MOVE_KINDS = frozenset(
    {
        NodeKind.MOVE_JOINT,
        NodeKind.MOVE_TO_PICK,
        NodeKind.RELATIVE_MOVE,
        NodeKind.MOVE_TO_OBJECT_POSE,
        NodeKind.PALLETIZATION_MOVE,
        NodeKind.MOVE_TRAJECTORY_BY_VARIABLE,
    }
)


def run_program(
    program: Program,
    scene: Scene,
    options: RunOptions | None = None,
    trace: TraceWriter | None = None,
) -> RunReport:
    return Interpreter(program, scene, options, trace).run()
