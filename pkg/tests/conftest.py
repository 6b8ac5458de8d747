"""Shared builders for the test suite.

Most tests need the same three ingredients: a small program document with a
plan routine in it, a scene tree the loader accepts, and a variable map that
looks like the state right before the plan invocation.  The helpers here keep
those one call away.  Randomized builders take an explicit numpy Generator so
every test controls its own seed.
"""

from __future__ import annotations

import math
from typing import Any, Mapping, Sequence

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from cellscript.graph import Program, Routine, check_program
from cellscript.scene import Scene, load_scene
from cellscript.values import VariableMap

settings.register_profile(
    "suite", deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("suite")


# --- program documents -------------------------------------------------------


def P(*labels: Any) -> list[dict[str, Any]]:
    """Port lists from shorthand: strings become normal ports, dicts pass through."""
    return [{"label": l} if isinstance(l, str) else l for l in labels]


def EXC(label: str) -> dict[str, Any]:
    return {"label": label, "exception": True}


def compile_doc(doc: Mapping[str, Any]) -> Program:
    prog, diags = check_program(doc)
    assert prog is not None, [str(d) for d in diags]
    return prog


def wrap_main(plan_nodes: list, plan_edges: list, entry: str = "pe") -> dict[str, Any]:
    """A one-invoke main around a plan routine called ``cycle``."""
    return {
        "version": "1",
        "main": "main",
        "routines": {
            "main": {
                "kind": "plain",
                "entry": "e",
                "nodes": [
                    {"id": "e", "kind": "RoutineEntry", "ports": P("next")},
                    {
                        "id": "inv",
                        "kind": "RoutineInvoke",
                        "params": {"routine": "cycle"},
                        "ports": P("next", EXC("fail")),
                    },
                    {"id": "x", "kind": "RoutineExit"},
                ],
                "edges": [
                    {"from": ["e", "next"], "to": "inv"},
                    {"from": ["inv", "next"], "to": "x"},
                    {"from": ["inv", "fail"], "to": "x"},
                ],
            },
            "cycle": {"kind": "plan", "entry": entry, "nodes": plan_nodes, "edges": plan_edges},
        },
    }


def pick_place_doc(
    target: Sequence[float],
    with_home: bool = False,
    filters: Mapping[str, Any] | None = None,
) -> dict[str, Any]:
    """capture-less pick/place plan body: MoveToPick -> MoveToObjectPose -> PlaceObject."""
    nodes = [
        {"id": "pe", "kind": "PlanRoutineEntry", "ports": P("next")},
        {
            "id": "pick",
            "kind": "MoveToPick",
            "params": {"srv_id": "camera", **({"filters": dict(filters)} if filters else {})},
            "ports": P("next"),
        },
        {
            "id": "stow",
            "kind": "MoveToObjectPose",
            "params": {"target": list(target)},
            "ports": P("next"),
        },
        {"id": "drop", "kind": "PlaceObject", "ports": P("next")},
    ]
    edges = [
        {"from": ["pe", "next"], "to": "pick"},
        {"from": ["pick", "next"], "to": "stow"},
        {"from": ["stow", "next"], "to": "drop"},
    ]
    if with_home:
        nodes.append(
            {"id": "home", "kind": "MoveJoint", "params": {"target": list(HOME)}, "ports": P("next")}
        )
        edges += [{"from": ["drop", "next"], "to": "home"}, {"from": ["home", "next"], "to": "px"}]
    else:
        edges.append({"from": ["drop", "next"], "to": "px"})
    nodes.append({"id": "px", "kind": "RoutineExit"})
    return wrap_main(nodes, edges)


def pick_place_routine(
    target: Sequence[float],
    with_home: bool = False,
    filters: Mapping[str, Any] | None = None,
) -> Routine:
    return compile_doc(pick_place_doc(target, with_home, filters)).routines["cycle"]


# --- scenes -------------------------------------------------------------------

# Home kept to one side so the folded arm never blocks the workspace center.
HOME = (0.3, -0.6, 0.3)


def SQ(s: float) -> list[list[float]]:
    return [[-s, -s], [s, -s], [s, s], [-s, s]]


def rand_scene_tree(rng: np.random.Generator) -> tuple[dict, list[dict], list[float]]:
    """A small reachable cell: 1-3 square parts on an annulus around the base,
    1-4 standoff grasps each, up to two loose wall obstacles, and a random
    place target.  Returns (scene tree, perception objects, place target)."""
    n = int(rng.integers(1, 4))
    objs = []
    for i in range(n):
        ang = rng.uniform(-math.pi, math.pi)
        r = rng.uniform(0.25, 0.95)
        half = float(rng.uniform(0.02, 0.045))
        k = int(rng.choice([1, 2, 4]))
        grasps = []
        for _ in range(int(rng.integers(1, 5))):
            d = half + float(rng.uniform(0.02, 0.07))
            th = float(rng.choice([0.0, math.pi / 2, math.pi, -math.pi / 2]))
            grasps.append(
                {
                    "tool": 0,
                    "pose": [-d * math.cos(th), -d * math.sin(th), th],
                    "score": float(rng.uniform(0.1, 1.0)),
                }
            )
        objs.append(
            {
                "id": f"o{i}",
                "type": "part",
                "pose": [
                    r * math.cos(ang),
                    r * math.sin(ang),
                    float(rng.uniform(-math.pi, math.pi)),
                ],
                "polygon": SQ(half),
                "k": k,
                "grasps": grasps,
            }
        )
    obstacles = []
    for j in range(int(rng.integers(0, 3))):
        cx, cy = rng.uniform(-0.9, 0.9, 2)
        w, h = rng.uniform(0.05, 0.25, 2)
        obstacles.append(
            {
                "id": f"wall{j}",
                "polygon": [
                    [cx - w / 2, cy - h / 2],
                    [cx + w / 2, cy - h / 2],
                    [cx + w / 2, cy + h / 2],
                    [cx - w / 2, cy + h / 2],
                ],
            }
        )
    tree = {
        "robot": {"links": [0.5, 0.4, 0.2], "widths": [0.06, 0.05, 0.04]},
        "home": list(HOME),
        "tools": [{"name": "vac", "polygon": []}],
        "objects": objs,
        "obstacles": obstacles,
        "services": {},
        "rng_seed": 0,
    }
    tgt = [
        float(rng.uniform(-0.7, 0.7)),
        float(rng.uniform(-0.7, 0.7)),
        float(rng.uniform(-math.pi, math.pi)),
    ]
    return tree, objs, tgt


def planner_snapshot(objs: list[dict]) -> VariableMap:
    """The map a plan invocation would see right after a camera capture."""
    return VariableMap(
        {
            "jps": list(HOME),
            "active_tool": 0,
            "picked_objects": [],
            "placed_objects": [],
            "camera_perception": {"objects": objs},
        }
    )


def rand_scene(rng: np.random.Generator) -> tuple[Scene, list[dict], list[float]]:
    tree, objs, tgt = rand_scene_tree(rng)
    return load_scene(tree, "fuzz"), objs, tgt


# --- demos ----------------------------------------------------------------------


@pytest.fixture(scope="session")
def demo_pairs() -> list[tuple[str, str]]:
    from cellscript.demos import manifest

    return [(d["program"], d["scene"]) for d in manifest()["demos"]]


def demo_program(name: str) -> Program:
    from cellscript.demos import load_demo

    return compile_doc(load_demo("programs", name))


def demo_scene(name: str) -> Scene:
    from cellscript.demos import load_demo

    return load_scene(load_demo("scenes", name), name)
