"""Work-cell descriptions and the simulated ground-truth world state.

A scene document (JSON) declares the robot, its tools, static obstacles, the
movable objects with their grasp annotations, the simulated services with
their latency models, and optional fault injection.  The runtime keeps two
views of it: a :class:`Scene` (immutable description) and a
:class:`WorldState` (the mutable ground truth owned by the simulated
services; programs only ever learn about it through service responses).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Any, Mapping

import numpy as np

from .geometry import TAU, Pose, as_polygon, pose_from, transform_polygon
from .robot import RobotModel, fk, robot_from_tree
from .values import GraspAnnotation, WorldObject


class SceneError(ValueError):
    pass


@dataclass(frozen=True)
class ToolSpec:
    name: str
    polygon: np.ndarray  # flange frame
    tcp_offset: Pose  # appended after the grasp pose when aiming the flange
    do_ports: tuple[int, ...] = ()


@dataclass(frozen=True)
class Scene:
    name: str
    model: RobotModel
    home: tuple[float, float, float]
    tools: tuple[ToolSpec, ...]
    obstacles: tuple[tuple[str, np.ndarray], ...]  # world-frame polygons
    container: tuple[Pose, np.ndarray] | None
    objects: tuple[WorldObject, ...]  # world-frame poses
    multi_grasps: tuple[GraspAnnotation, ...]
    services: Mapping[str, Mapping[str, Any]]
    faults: Mapping[str, Any]
    rng_seed: int
    raw: Mapping[str, Any]

    def tool(self, index: int) -> ToolSpec:
        if not (0 <= index < len(self.tools)):
            raise SceneError(f"tool index {index} out of range")
        return self.tools[index]


def _parse_grasp(tree: Mapping[str, Any], *, object_ids: tuple[str, ...] = ()) -> GraspAnnotation:
    return GraspAnnotation(
        tool=int(tree["tool"]),
        pose=pose_from(tree["pose"]),
        score=float(tree.get("score", 0.5)),
        do_ports=tuple(int(p) for p in tree.get("do_ports", ())),
        object_ids=object_ids or tuple(tree.get("object_ids", ())),
    )


def _parse_object(tree: Mapping[str, Any]) -> WorldObject:
    polygon = as_polygon(tree["polygon"])
    return WorldObject(
        id=str(tree["id"]),
        type_name=str(tree.get("type", "part")),
        polygon=tuple((float(x), float(y)) for x, y in polygon),
        pose=pose_from(tree["pose"]),
        k=max(1, int(tree.get("k", 1))),
        grasps=tuple(_parse_grasp(g) for g in tree.get("grasps", ())),
        meta=dict(tree.get("meta", {})),
    )


def object_from_tree(tree: Mapping[str, Any]) -> WorldObject:
    """Parse the JSON form of a movable object (scene documents and
    perception responses share the shape)."""
    return _parse_object(tree)


def load_scene(tree: Mapping[str, Any], name: str = "scene") -> Scene:
    try:
        model = robot_from_tree(tree.get("robot", {}))
        home = tuple(float(v) for v in tree.get("home", (0.0, 0.0, 0.0)))
        tools = tuple(
            ToolSpec(
                name=str(t.get("name", f"tool{i}")),
                # An empty list means the tool has no body in the table plane
                # (top-mounted suction); such a tool can never be hit.
                polygon=(
                    as_polygon(t["polygon"])
                    if len(t.get("polygon", ())) > 0
                    else np.zeros((0, 2), dtype=np.float64)
                ),
                tcp_offset=pose_from(t.get("tcp_offset", (0.0, 0.0, 0.0))),
                do_ports=tuple(int(p) for p in t.get("do_ports", ())),
            )
            for i, t in enumerate(tree.get("tools", ()))
        )
        obstacles = []
        for i, ob in enumerate(tree.get("obstacles", ())):
            poly = as_polygon(ob["polygon"])
            pose = pose_from(ob.get("pose", (0.0, 0.0, 0.0)))
            obstacles.append((str(ob.get("id", f"obstacle{i}")), transform_polygon(pose, poly)))
        container = None
        if "container" in tree:
            container = (
                pose_from(tree["container"].get("pose", (0.0, 0.0, 0.0))),
                as_polygon(tree["container"]["polygon"]),
            )
        objects = tuple(_parse_object(o) for o in tree.get("objects", ()))
        ids = [o.id for o in objects]
        if len(set(ids)) != len(ids):
            raise SceneError("duplicate object ids")
        multi = tuple(
            _parse_grasp(g, object_ids=tuple(str(i) for i in g["object_ids"]))
            for g in tree.get("multi_grasps", ())
        )
        for g in multi:
            for oid in g.object_ids:
                if oid not in ids:
                    raise SceneError(f"multi grasp references unknown object {oid!r}")
        if not tools:
            raise SceneError("scene needs at least one tool")
        if not model.within_limits(home):
            raise SceneError("home configuration violates joint limits")
        return Scene(
            name=name,
            model=model,
            home=home,  # type: ignore[arg-type]
            tools=tools,
            obstacles=tuple(obstacles),
            container=container,
            objects=objects,
            multi_grasps=multi,
            services=dict(tree.get("services", {})),
            faults=dict(tree.get("faults", {})),
            rng_seed=int(tree.get("rng_seed", 0)),
            raw=tree,
        )
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, SceneError):
            raise
        raise SceneError(f"malformed scene document: {exc}") from exc


def load_scene_file(path: str, name: str | None = None) -> Scene:
    with open(path, "r", encoding="utf-8") as fh:
        tree = json.load(fh)
    return load_scene(tree, name or path)


def static_env_tree(scene: Scene) -> dict[str, Any]:
    """The JSON tree bound to the reserved ``static_env`` variable."""
    return {
        "robot": {
            "links": list(scene.model.lengths),
            "limits": [list(l) for l in scene.model.limits],
            "widths": list(scene.model.widths),
            "base": [scene.model.base.x, scene.model.base.y, scene.model.base.theta],
        },
        "tools": [
            {
                "name": t.name,
                "polygon": t.polygon.tolist(),
                "tcp_offset": [t.tcp_offset.x, t.tcp_offset.y, t.tcp_offset.theta],
                "do_ports": list(t.do_ports),
            }
            for t in scene.tools
        ],
        "obstacles": [{"id": name, "polygon": poly.tolist()} for name, poly in scene.obstacles],
        "home": list(scene.home),
    }


def object_world_polygon(obj: WorldObject, pose: Pose | None = None) -> np.ndarray:
    pts = np.asarray(obj.polygon, dtype=np.float64)
    return transform_polygon(pose if pose is not None else obj.pose, pts)


# ---------------------------------------------------------------------------
# Grasp target expansion
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GraspTarget:
    """A concrete flange pose realizing one (grasp, symmetry) choice."""

    ee: Pose
    object_ids: tuple[str, ...]
    tool: int
    grasp_index: int
    symmetry_index: int
    score: float


def expand_targets(
    object_pose: Pose, obj: WorldObject, tool_index: int, tool: ToolSpec
) -> list[GraspTarget]:
    """All flange poses that realize a grasp of ``obj`` sitting at
    ``object_pose`` with the given tool: one per (symmetry, grasp) pair,
    deduplicated at pose tolerance.

    Flange pose = object pose ∘ rot(2πi/k) ∘ grasp pose ∘ tool offset.
    """
    out: list[GraspTarget] = []
    for gi, g in enumerate(obj.grasps):
        if g.tool != tool_index:
            continue
        for i in range(obj.k):
            sym = Pose.rot(TAU * i / obj.k)
            ee = object_pose.compose(sym).compose(g.pose).compose(tool.tcp_offset)
            if any(ee.almost_equal(t.ee) for t in out):
                continue
            out.append(GraspTarget(ee, (obj.id,), tool_index, gi, i, g.score))
    return out


def place_ee_targets(target: Pose, k: int, attach_pose: Pose) -> list[tuple[int, Pose]]:
    """Flange poses that put an object held at ``attach_pose`` (object pose in
    the flange frame) down at ``target``, one per symmetry index, deduplicated."""
    inv = attach_pose.inverse()
    out: list[tuple[int, Pose]] = []
    for j in range(max(1, k)):
        ee = target.compose(Pose.rot(TAU * j / max(1, k))).compose(inv)
        if any(ee.almost_equal(e) for _, e in out):
            continue
        out.append((j, ee))
    return out


# ---------------------------------------------------------------------------
# Ground truth
# ---------------------------------------------------------------------------

FREE = "free"
ATTACHED = "attached"
PLACED = "placed"


@dataclass
class ObjectState:
    obj: WorldObject
    status: str
    world_pose: Pose | None  # free / placed
    attach_pose: Pose | None = None  # flange-frame pose while attached


class WorldState:
    """Mutable ground truth, owned by the simulated services."""

    def __init__(self, scene: Scene):
        self.scene = scene
        self.q: tuple[float, float, float] = scene.home
        self.objects: dict[str, ObjectState] = {
            o.id: ObjectState(o, FREE, o.pose) for o in scene.objects
        }
        self.attach_order: list[str] = []

    def flange(self) -> Pose:
        return fk(self.scene.model, self.q)

    def free_objects(self) -> list[ObjectState]:
        return [st for st in self.objects.values() if st.status == FREE]

    def attach(self, object_id: str, attach_pose: Pose) -> None:
        st = self.objects[object_id]
        st.status = ATTACHED
        st.world_pose = None
        st.attach_pose = attach_pose
        self.attach_order.append(object_id)

    def drop(self, object_id: str) -> None:
        """Silently lose an attached object at its current world position."""
        st = self.objects[object_id]
        st.world_pose = self.flange().compose(st.attach_pose)
        st.status = FREE
        st.attach_pose = None
        self.attach_order.remove(object_id)

    def detach_all(self) -> list[str]:
        done = []
        flange = self.flange()
        for oid in list(self.attach_order):
            st = self.objects[oid]
            st.world_pose = flange.compose(st.attach_pose)
            st.status = PLACED
            st.attach_pose = None
            done.append(oid)
        self.attach_order.clear()
        return done

    def remove_placed(self) -> list[str]:
        gone = [oid for oid, st in self.objects.items() if st.status == PLACED]
        for oid in gone:
            del self.objects[oid]
        return gone

    def world_pose_of(self, object_id: str) -> Pose:
        st = self.objects[object_id]
        if st.status == ATTACHED:
            return self.flange().compose(st.attach_pose)
        assert st.world_pose is not None
        return st.world_pose
