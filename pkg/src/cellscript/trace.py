"""Run traces and metrics.

A trace is JSONL, one event per line, in the order events were generated:

    {"t_ms": ..., "dyn_id": ..., "node": ..., "event": ..., "data": {...}}

``t_ms`` is simulated time, the run's only time source, so reruns with equal
seeds produce identical traces.  Events appear in generation order, which is
not strictly ordered by ``t_ms``: a ``plan_done`` event is written at
dispatch time (solves are synchronous under the hood) and carries the future
instant its virtual planning work completes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any, Callable, IO

EVENTS = (
    "enter",
    "exit",
    "side_effect",
    "plan_dispatch",
    "plan_done",
    "plan_adopt",
    "wait_begin",
    "wait_end",
    "flush",
    "poison_stop",
)


@dataclass(frozen=True)
class TraceEvent:
    t_ms: float
    dyn_id: int
    node: str
    event: str
    data: Any

    def to_tree(self) -> dict[str, Any]:
        return {
            "t_ms": self.t_ms,
            "dyn_id": self.dyn_id,
            "node": self.node,
            "event": self.event,
            "data": self.data,
        }


class TraceWriter:
    """Collects events, optionally mirroring them to a JSONL stream and to
    live listeners (the gateway's websocket fan-out)."""

    def __init__(self, stream: IO[str] | None = None):
        self.events: list[TraceEvent] = []
        self._stream = stream
        self._listeners: list[Callable[[TraceEvent], None]] = []

    def listen(self, fn: Callable[[TraceEvent], None]) -> None:
        self._listeners.append(fn)

    def emit(self, t_ms: float, dyn_id: int, node: str, event: str, data: Any = None) -> TraceEvent:
        ev = TraceEvent(float(t_ms), int(dyn_id), node, event, data if data is not None else {})
        self.events.append(ev)
        if self._stream is not None:
            self._stream.write(json.dumps(ev.to_tree(), sort_keys=True) + "\n")
        for fn in self._listeners:
            fn(ev)
        return ev

    def counts(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for ev in self.events:
            out[ev.event] = out.get(ev.event, 0) + 1
        return out


@dataclass(frozen=True)
class PlanInvocationRecord:
    """One plan-routine invocation as the execution context saw it."""

    dyn_id: int
    routine: str
    planning_ms: float  # virtual cost of the solve
    waiting_ms: float  # interval the execution context was blocked on it
    adopted: bool  # a pre-planned result was used
    outcome: str  # "plan" | "failure"


@dataclass
class MetricsCollector:
    records: list[PlanInvocationRecord] = field(default_factory=list)

    def record(self, rec: PlanInvocationRecord) -> None:
        self.records.append(rec)

    def as_tree(self) -> dict[str, Any]:
        by_routine: dict[str, list[PlanInvocationRecord]] = {}
        for rec in self.records:
            by_routine.setdefault(rec.routine, []).append(rec)
        plans = []
        for routine in sorted(by_routine):
            recs = by_routine[routine]
            plans.append(
                {
                    "routine": routine,
                    "invocations": len(recs),
                    "mean_planning_ms": sum(r.planning_ms for r in recs) / len(recs),
                    "mean_waiting_ms": sum(r.waiting_ms for r in recs) / len(recs),
                    "adopted": sum(1 for r in recs if r.adopted),
                    "failures": sum(1 for r in recs if r.outcome != "plan"),
                }
            )
        return {"plans": plans}


def load_trace(path: str) -> list[TraceEvent]:
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            tree = json.loads(line)
            out.append(TraceEvent(tree["t_ms"], tree["dyn_id"], tree["node"], tree["event"], tree.get("data", {})))
    return out
