"""Simulated cell services behind an RPC-style registry.

Every call is wrapped in the same envelope a remote transport would use:
``{"meta": {"ts_ms", "msg_id", "srv"}, "payload": {...}}``.  Request and
response share one ``msg_id``, latencies come from a per-service seeded
model, and the ground truth (:class:`~cellscript.scene.WorldState`) is only
ever touched in here — programs observe it through service responses.

The palletization pattern generator is a pure function so planner workers
may query it without ordering effects; everything effectful goes through the
single registry owned by the execution context.
"""

from __future__ import annotations

import json
import socket
import socketserver
import struct
import threading
import zlib
from dataclasses import dataclass
from typing import Any, Callable, Mapping

import numpy as np

from .geometry import Pose, contains_points, transform_polygon, wrap_angle
from .kernels import ACTIVE as KERNELS
from .motion import trajectory_from_tree
from .nodes import ServiceFault
from .scene import Scene, WorldState, object_world_polygon
from .values import to_jsonable


class SimClock:
    """The run's single time source (milliseconds, monotone)."""

    __slots__ = ("now_ms",)

    def __init__(self, now_ms: float = 0.0):
        self.now_ms = now_ms

    def advance(self, ms: float) -> float:
        if ms < 0:
            raise ValueError("time cannot go backwards")
        self.now_ms += ms
        return self.now_ms


_DEFAULTS: dict[str, dict[str, Any]] = {
    "perception": {"fixed_ms": 150.0},
    "robot": {"fixed_ms": 20.0, "duration_scale": 1.0},
    "gripper": {"fixed_ms": 20.0},
    "vibration": {"fixed_ms": 200.0},
    "conveyor": {"fixed_ms": 500.0},
    "pallet": {"fixed_ms": 0.0},
}
DEFAULT_TIMEOUT_MS = 30_000.0


def _service_seed(scene_seed: int, name: str) -> list[int]:
    return [scene_seed, zlib.crc32(name.encode("utf-8"))]


# ---------------------------------------------------------------------------
# Palletization pattern (pure)
# ---------------------------------------------------------------------------


def pallet_slots(
    size: tuple[float, float],
    placed_footprints: list[tuple[float, float]],
    footprint: tuple[float, float],
    gap: float = 0.0,
) -> list[tuple[int, tuple[float, float]]]:
    """Greedy shelf packing, row-major.  Replays the already-placed
    footprints, then enumerates every remaining slot center for the queried
    footprint.  Pure function; an oversized footprint yields no slots."""
    W, H = float(size[0]), float(size[1])
    x = y = row_h = 0.0
    eps = 1e-9

    def advance(w: float, h: float) -> tuple[float, float] | None:
        nonlocal x, y, row_h
        if x + w > W + eps:
            x, y, row_h = 0.0, y + row_h + gap, 0.0
        if w > W + eps or y + h > H + eps:
            return None
        cx, cy = x + w / 2.0, y + h / 2.0
        x += w + gap
        row_h = max(row_h, h)
        return cx, cy

    for w, h in placed_footprints:
        if advance(float(w), float(h)) is None:
            return []
    slots: list[tuple[int, tuple[float, float]]] = []
    index = len(placed_footprints)
    while True:
        pos = advance(float(footprint[0]), float(footprint[1]))
        if pos is None:
            break
        slots.append((index, pos))
        index += 1
    return slots


# ---------------------------------------------------------------------------
# Registry
# ---------------------------------------------------------------------------


@dataclass
class _ServiceState:
    cfg: dict[str, Any]
    rng: np.random.Generator
    type_name: str


class ServiceRegistry:
    """srvID → simulated endpoint.  Single-threaded by design: effectful
    calls happen only on the execution context, in trace order."""

    def __init__(
        self,
        scene: Scene,
        world: WorldState,
        clock: SimClock,
        falling_faults: Mapping[int, Any] | None = None,
    ):
        self.scene = scene
        self.world = world
        self.clock = clock
        self.falling = dict(falling_faults or {})
        self._msg_id = 0
        self._services: dict[str, _ServiceState] = {}
        configured = dict(scene.services)
        for name in set(_DEFAULTS) | set(configured):
            cfg = dict(configured.get(name, {}))
            type_name = cfg.get("type", name if name in _DEFAULTS else None)
            if type_name not in _DEFAULTS:
                continue
            merged = {**_DEFAULTS[type_name], **cfg}
            seed = merged.get("seed")
            rng = np.random.default_rng(seed if seed is not None else _service_seed(scene.rng_seed, name))
            self._services[name] = _ServiceState(merged, rng, type_name)
        self._handlers: dict[str, Callable[[_ServiceState, Mapping[str, Any], int], Mapping[str, Any]]] = {
            "perception": self._h_perception,
            "robot": self._h_robot,
            "gripper": self._h_gripper,
            "vibration": self._h_vibration,
            "conveyor": self._h_conveyor,
            "pallet": self._h_pallet,
        }

    def service_names(self) -> list[str]:
        return sorted(self._services)

    def type_of(self, srv_id: str) -> str | None:
        st = self._services.get(srv_id)
        return st.type_name if st else None

    def call(self, srv_id: str, request: Mapping[str, Any], dyn_id: int) -> dict[str, Any]:
        st = self._services.get(srv_id)
        if st is None:
            raise ServiceFault("UNKNOWN_SERVICE", f"service {srv_id!r} is not registered")
        jitter = float(st.cfg.get("jitter_ms", 0.0))
        latency = float(st.cfg.get("fixed_ms", 0.0))
        if jitter > 0.0:
            latency += jitter * float(st.rng.random())
        if latency > float(st.cfg.get("timeout_ms", DEFAULT_TIMEOUT_MS)):
            self.clock.advance(float(st.cfg.get("timeout_ms", DEFAULT_TIMEOUT_MS)))
            raise ServiceFault("SERVICE_TIMEOUT", f"{srv_id} exceeded its deadline")
        self.clock.advance(latency)
        self._msg_id += 1
        msg_id = self._msg_id
        payload = self._handlers[st.type_name](st, request, dyn_id)
        return {
            "meta": {"ts_ms": self.clock.now_ms, "msg_id": msg_id, "srv": srv_id},
            "payload": payload,
        }

    # -- endpoints ------------------------------------------------------------

    def _h_perception(self, st: _ServiceState, request: Mapping[str, Any], dyn_id: int) -> dict[str, Any]:
        noise = st.cfg.get("noise", {})
        sxy = float(noise.get("xy", 0.0))
        sth = float(noise.get("theta", 0.0))
        seen: list[dict[str, Any]] = []
        free = sorted(self.world.free_objects(), key=lambda o: o.obj.id)
        free_ids = {o.obj.id for o in free}
        for obs in free:
            nx, ny, nt = st.rng.normal(0.0, 1.0, 3)
            pose = Pose(
                obs.world_pose.x + nx * sxy,
                obs.world_pose.y + ny * sxy,
                wrap_angle(obs.world_pose.theta + nt * sth),
            )
            tree = to_jsonable(obs.obj)
            tree["pose"] = [pose.x, pose.y, pose.theta]
            seen.append(tree)
        for mg in self.scene.multi_grasps:
            if mg.object_ids and set(mg.object_ids) <= free_ids:
                anchor = next(t for t in seen if t["id"] == mg.object_ids[0])
                anchor["grasps"] = anchor["grasps"] + [to_jsonable(mg)]
        return {"objects": seen, "occluded_ids": []}

    def _h_robot(self, st: _ServiceState, request: Mapping[str, Any], dyn_id: int) -> dict[str, Any]:
        cmd = request.get("cmd", "execute")
        if cmd == "detach_all":
            detached = self.world.detach_all()
            return {"ok": True, "detached": detached}
        if cmd != "execute":
            raise ServiceFault("BAD_REQUEST", f"robot does not understand {cmd!r}")
        try:
            traj = trajectory_from_tree(request.get("trajectory"))
        except ValueError as exc:
            raise ServiceFault("BAD_REQUEST", str(exc)) from None
        cert = traj.certificate
        if not cert.collision_free or cert.resolution <= 0.0:
            raise ServiceFault("REJECTED_UNCERTIFIED", "trajectory carries no valid safety certificate")
        if len(traj.end) != len(self.world.q):
            raise ServiceFault("BAD_REQUEST", "waypoint arity does not match the robot")
        self.clock.advance(traj.duration_ms * float(st.cfg.get("duration_scale", 1.0)))
        self.world.q = traj.end
        for item in request.get("attach", ()):
            self.world.attach(str(item["id"]), Pose(*item["pose"]))
        if dyn_id in self.falling and self.world.attach_order:
            self.world.drop(self.world.attach_order[0])
        return {"ok": True, "q": list(self.world.q), "attached": list(self.world.attach_order)}

    def _h_gripper(self, st: _ServiceState, request: Mapping[str, Any], dyn_id: int) -> dict[str, Any]:
        cmd = request.get("cmd")
        if cmd == "query_holding":
            expect = [str(x) for x in request.get("expect", [])]
            holding = set(self.world.attach_order)
            lost = [oid for oid in expect if oid not in holding]
            return {"ok": not lost, "lost": lost, "holding": list(self.world.attach_order)}
        if cmd == "digital_out":
            return {"ok": True, "ports": list(request.get("ports", [])), "on": bool(request.get("on", True))}
        raise ServiceFault("BAD_REQUEST", f"gripper does not understand {cmd!r}")

    def _h_vibration(self, st: _ServiceState, request: Mapping[str, Any], dyn_id: int) -> dict[str, Any]:
        if self.scene.container is None:
            return {"ok": True, "moved": []}
        cpose, cpoly = self.scene.container
        container = transform_polygon(cpose, cpoly)
        bounds = st.cfg.get("bounds", {})
        bxy = float(bounds.get("xy", 0.03))
        bth = float(bounds.get("theta", 0.3))
        inside = [
            obs
            for obs in sorted(self.world.free_objects(), key=lambda o: o.obj.id)
            if bool(np.all(contains_points(container, object_world_polygon(obs.obj, obs.world_pose))))
        ]
        moved: list[str] = []
        for obs in inside:
            placed = False
            for _ in range(100):
                dx, dy = st.rng.uniform(-bxy, bxy, 2)
                dth = float(st.rng.uniform(-bth, bth))
                cand = Pose(obs.world_pose.x + dx, obs.world_pose.y + dy, wrap_angle(obs.world_pose.theta + dth))
                poly = object_world_polygon(obs.obj, cand)
                if not bool(np.all(contains_points(container, poly))):
                    continue
                clear = True
                for other in self.world.free_objects():
                    if other.obj.id == obs.obj.id:
                        continue
                    opoly = object_world_polygon(other.obj, other.world_pose)
                    if KERNELS.poly_clearance(poly, opoly) <= 0.0:
                        clear = False
                        break
                if clear:
                    obs.world_pose = cand
                    moved.append(obs.obj.id)
                    placed = True
                    break
            if not placed:
                raise ServiceFault("PERTURB_FAILED", f"could not re-seat object {obs.obj.id!r}")
        return {"ok": True, "moved": moved}

    def _h_conveyor(self, st: _ServiceState, request: Mapping[str, Any], dyn_id: int) -> dict[str, Any]:
        taken = self.world.remove_placed()
        return {"ok": True, "taken": taken}

    def _h_pallet(self, st: _ServiceState, request: Mapping[str, Any], dyn_id: int) -> dict[str, Any]:
        return pallet_response(st.cfg, request)


def pallet_response(cfg: Mapping[str, Any], request: Mapping[str, Any]) -> dict[str, Any]:
    """Shared by the registry endpoint and direct planner queries."""
    size = cfg.get("size")
    if not size:
        raise ServiceFault("BAD_REQUEST", "pallet service has no configured size")
    origin = Pose(*cfg.get("origin", (0.0, 0.0, 0.0)))
    gap = float(cfg.get("gap", 0.0))
    placed = [tuple(fp) for fp in request.get("placed", [])]
    footprint = request.get("footprint")
    if not footprint or len(footprint) != 2:
        raise ServiceFault("BAD_REQUEST", "request needs a [w, h] footprint")
    slots = []
    for index, (cx, cy) in pallet_slots(tuple(size), placed, tuple(footprint), gap):
        world = origin.compose(Pose(cx, cy, 0.0))
        slots.append({"index": index, "pose": [world.x, world.y, world.theta]})
    return {"slots": slots}


# ---------------------------------------------------------------------------
# Optional TCP transport: u32 big-endian length-prefixed UTF-8 JSON frames.
# ---------------------------------------------------------------------------


def encode_frame(tree: Mapping[str, Any]) -> bytes:
    blob = json.dumps(tree, sort_keys=True, separators=(",", ":"), allow_nan=False).encode("utf-8")
    return struct.pack(">I", len(blob)) + blob


def read_frame(sock: socket.socket) -> dict[str, Any] | None:
    header = _read_exact(sock, 4)
    if header is None:
        return None
    (length,) = struct.unpack(">I", header)
    body = _read_exact(sock, length)
    if body is None:
        return None
    return json.loads(body.decode("utf-8"))


def _read_exact(sock: socket.socket, n: int) -> bytes | None:
    buf = b""
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            return None
        buf += chunk
    return buf


class _RegistryTCPHandler(socketserver.StreamRequestHandler):
    def handle(self):
        registry: ServiceRegistry = self.server.registry  # type: ignore[attr-defined]
        while True:
            frame = read_frame(self.request)
            if frame is None:
                return
            try:
                envelope = registry.call(
                    frame.get("srv", ""), frame.get("payload", {}), int(frame.get("dyn_id", 0))
                )
            except ServiceFault as exc:
                envelope = {"error": {"code": exc.code, "message": str(exc)}}
            self.request.sendall(encode_frame(envelope))


class RegistryServer:
    """Serves a registry over TCP with the same envelope bytes as in-process
    calls — the substitution point for real devices."""

    def __init__(self, registry: ServiceRegistry, host: str = "127.0.0.1", port: int = 0):
        self._server = socketserver.ThreadingTCPServer((host, port), _RegistryTCPHandler, bind_and_activate=True)
        self._server.daemon_threads = True
        self._server.registry = registry  # type: ignore[attr-defined]
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)

    @property
    def address(self) -> tuple[str, int]:
        return self._server.server_address  # type: ignore[return-value]

    def start(self) -> "RegistryServer":
        self._thread.start()
        return self

    def stop(self) -> None:
        self._server.shutdown()
        self._server.server_close()


def tcp_call(address: tuple[str, int], srv_id: str, request: Mapping[str, Any], dyn_id: int = 0) -> dict[str, Any]:
    with socket.create_connection(address) as sock:
        sock.sendall(encode_frame({"srv": srv_id, "payload": request, "dyn_id": dyn_id}))
        reply = read_frame(sock)
    if reply is None:
        raise ServiceFault("TRANSPORT", "connection closed mid-frame")
    if "error" in reply:
        raise ServiceFault(reply["error"]["code"], reply["error"]["message"])
    return reply
