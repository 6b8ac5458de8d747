"""Variable maps: the single global state shared by a running program.

A :class:`VariableMap` is immutable; applying a batch of mutations returns a
new map and bumps the revision counter exactly once.  Snapshots are therefore
free — a snapshot *is* the map object.

Shadow maps (used by the speculating part of the interpreter) may carry
:class:`Poison` entries standing for values that only become available once
the producing node really executes.  Execution-time maps never contain
poison; attempting to poison one is a contract violation.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping, Sequence

from .geometry import Pose

# Variables with runtime-maintained meaning.  They can be overwritten but
# never removed.
RESERVED_VARS = frozenset(
    {"jps", "active_tool", "static_env", "picked_objects", "placed_objects"}
)


class MapError(Exception):
    code = "MAP_ERROR"

    def __init__(self, message: str):
        super().__init__(f"{self.code}: {message}")
        self.message = message


class ReservedMutationError(MapError):
    code = "RESERVED_MUTATION"


class TypeMismatchError(MapError):
    code = "TYPE_MISMATCH"


class UndefinedVariableError(MapError):
    code = "UNDEFINED_VARIABLE"


class PoisonWriteError(MapError):
    code = "POISON_IN_EXECUTION_MAP"


@dataclass(frozen=True)
class Poison:
    """Placeholder for a value that appears only when a node truly executes."""

    origin_dyn_id: int


@dataclass(frozen=True)
class GraspAnnotation:
    """One way a tool may hold an object, expressed in the anchor frame."""

    tool: int
    pose: Pose
    score: float
    do_ports: tuple[int, ...] = ()
    object_ids: tuple[str, ...] = ()  # empty for ordinary single-object grasps


@dataclass(frozen=True)
class WorldObject:
    """A movable body.  ``pose`` is in the world frame for free/placed
    objects and in the gripper flange frame while the object is picked."""

    id: str
    type_name: str
    polygon: tuple[tuple[float, float], ...]
    pose: Pose
    k: int = 1  # rotational symmetry order
    grasps: tuple[GraspAnnotation, ...] = ()
    meta: Mapping[str, Any] = field(default_factory=dict)


# --- mutations -------------------------------------------------------------


@dataclass(frozen=True)
class SetVar:
    name: str
    value: Any


@dataclass(frozen=True)
class RemoveVar:
    name: str


@dataclass(frozen=True)
class ListAppend:
    name: str
    value: Any


@dataclass(frozen=True)
class ListRemoveByKey:
    name: str
    key: str


Mutation = SetVar | RemoveVar | ListAppend | ListRemoveByKey


def normalize_value(value: Any) -> Any:
    """Copy a value into canonical in-map form (tuples become lists)."""
    if isinstance(value, (Pose, Poison, WorldObject, GraspAnnotation)):
        return value
    if isinstance(value, dict):
        return {str(k): normalize_value(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [normalize_value(v) for v in value]
    if isinstance(value, (int, float, str, bool)) or value is None:
        return value
    raise TypeMismatchError(f"unsupported value type {type(value).__name__}")


def _element_key(el: Any) -> Any:
    if isinstance(el, WorldObject):
        return el.id
    if isinstance(el, dict):
        return el.get("id")
    return None


class VariableMap:
    """Immutable name -> value mapping with a batch revision counter."""

    __slots__ = ("_entries", "revision", "shadow")

    def __init__(self, entries: dict[str, Any], revision: int = 0, shadow: bool = False):
        self._entries = entries
        self.revision = revision
        self.shadow = shadow

    # -- read side ----------------------------------------------------------
    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def get(self, name: str, default: Any = None) -> Any:
        return self._entries.get(name, default)

    def require(self, name: str) -> Any:
        if name not in self._entries:
            raise UndefinedVariableError(f"variable {name!r} is not defined")
        return self._entries[name]

    def names(self) -> Iterable[str]:
        return self._entries.keys()

    def items(self):
        return self._entries.items()

    def is_poisoned(self, name: str) -> bool:
        return isinstance(self._entries.get(name), Poison)

    def poison_origin(self, name: str) -> int | None:
        v = self._entries.get(name)
        return v.origin_dyn_id if isinstance(v, Poison) else None

    # -- write side ----------------------------------------------------------
    def apply(self, mutations: Sequence[Mutation]) -> "VariableMap":
        """Apply a batch atomically; raises before anything is visible."""
        entries = dict(self._entries)
        for m in mutations:
            if isinstance(m, SetVar):
                if not m.name:
                    raise TypeMismatchError("variable name must be non-empty")
                entries[m.name] = normalize_value(m.value)
            elif isinstance(m, RemoveVar):
                if m.name in RESERVED_VARS:
                    raise ReservedMutationError(f"cannot remove reserved variable {m.name!r}")
                if m.name not in entries:
                    raise UndefinedVariableError(f"cannot remove undefined variable {m.name!r}")
                del entries[m.name]
            elif isinstance(m, ListAppend):
                if m.name not in entries:
                    raise UndefinedVariableError(f"cannot append to undefined variable {m.name!r}")
                cur = entries[m.name]
                if not isinstance(cur, list):
                    raise TypeMismatchError(f"variable {m.name!r} is not a list")
                entries[m.name] = cur + [normalize_value(m.value)]
            elif isinstance(m, ListRemoveByKey):
                if m.name not in entries:
                    raise UndefinedVariableError(
                        f"cannot remove from undefined variable {m.name!r}"
                    )
                cur = entries[m.name]
                if not isinstance(cur, list):
                    raise TypeMismatchError(f"variable {m.name!r} is not a list")
                entries[m.name] = [el for el in cur if _element_key(el) != m.key]
            else:
                raise TypeMismatchError(f"unknown mutation {type(m).__name__}")
        return VariableMap(entries, self.revision + 1, self.shadow)

    def poison(self, name: str, origin_dyn_id: int) -> "VariableMap":
        if not self.shadow:
            raise PoisonWriteError("poison is only allowed in shadow maps")
        entries = dict(self._entries)
        entries[name] = Poison(origin_dyn_id)
        return VariableMap(entries, self.revision + 1, True)

    def poison_many(self, names: Sequence[str], origin_dyn_id: int) -> "VariableMap":
        """Poison several names as one batch (single revision bump), keeping
        the revision counter in lockstep with the single write the real
        execution of the same node performs."""
        if not self.shadow:
            raise PoisonWriteError("poison is only allowed in shadow maps")
        entries = dict(self._entries)
        for name in names:
            entries[name] = Poison(origin_dyn_id)
        return VariableMap(entries, self.revision + 1, True)

    def as_shadow(self) -> "VariableMap":
        return VariableMap(dict(self._entries), self.revision, shadow=True)

    def snapshot(self) -> "VariableMap":
        """Maps are immutable, so a snapshot is the map itself."""
        return self


def init_map(static_env: Mapping[str, Any], home_jps: Sequence[float]) -> VariableMap:
    """Build the initial execution map with all reserved variables bound."""
    env = normalize_value(dict(static_env))
    robot = env.get("robot") if isinstance(env, dict) else None
    if not isinstance(robot, dict) or "limits" not in robot:
        raise TypeMismatchError("static_env must carry a robot section with joint limits")
    limits = robot["limits"]
    home = [float(v) for v in home_jps]
    if len(home) != len(limits):
        raise TypeMismatchError("home configuration arity does not match joint limits")
    for qi, (lo, hi) in zip(home, limits):
        if not (lo <= qi <= hi):
            raise TypeMismatchError(f"home joint value {qi} outside limits [{lo}, {hi}]")
    entries = {
        "jps": home,
        "active_tool": 0,
        "static_env": env,
        "picked_objects": [],
        "placed_objects": [],
    }
    return VariableMap(entries, revision=0)


# --- serialization & digests -------------------------------------------------

#: Envelope bookkeeping fields that may differ between equivalent runs.
VOLATILE_KEYS = frozenset({"ts_ms", "msg_id"})


def to_jsonable(value: Any, *, strip_volatile: bool = False) -> Any:
    if isinstance(value, Pose):
        return [value.x, value.y, value.theta]
    if isinstance(value, Poison):
        return {"$poison": value.origin_dyn_id}
    if isinstance(value, GraspAnnotation):
        out = {
            "tool": value.tool,
            "pose": to_jsonable(value.pose),
            "score": value.score,
            "do_ports": list(value.do_ports),
        }
        if value.object_ids:
            out["object_ids"] = list(value.object_ids)
        return out
    if isinstance(value, WorldObject):
        return {
            "id": value.id,
            "type": value.type_name,
            "polygon": [list(p) for p in value.polygon],
            "pose": to_jsonable(value.pose),
            "k": value.k,
            "grasps": [to_jsonable(g) for g in value.grasps],
            "meta": to_jsonable(dict(value.meta), strip_volatile=strip_volatile),
        }
    if isinstance(value, dict):
        return {
            str(k): to_jsonable(v, strip_volatile=strip_volatile)
            for k, v in value.items()
            if not (strip_volatile and str(k) in VOLATILE_KEYS)
        }
    if isinstance(value, (list, tuple)):
        return [to_jsonable(v, strip_volatile=strip_volatile) for v in value]
    return value


def map_digest(vm: VariableMap) -> str:
    """SHA-256 of the canonical final-map serialization, minus volatile
    envelope metadata (timestamps, message ids)."""
    doc = {
        name: to_jsonable(value, strip_volatile=True) for name, value in sorted(vm.items())
    }
    blob = json.dumps(doc, sort_keys=True, separators=(",", ":"), allow_nan=False)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()
