"""HTTP/WebSocket gateway: program storage, run control, event streaming.

Storage is a flat directory of JSON documents keyed by content hash plus one
index file — diffable, no database.  Each run gets its own interpreter on a
worker thread; trace events fan out to any number of WebSocket subscribers
with per-run monotone sequence numbers, and the same stream is written to
the run's trace file, so file and socket always agree.

Control (pause / resume / step / abort) is applied between node executions.
Pre-planning keeps working while paused — it is side-effect-free — because
the pause gate sits around the execution step as a whole; a paused run
adopts nothing and moves nothing.
"""

from __future__ import annotations

import hashlib
import json
import os
import threading
from pathlib import Path
from typing import Any

from fastapi import FastAPI, HTTPException, WebSocket, WebSocketDisconnect
from fastapi.responses import JSONResponse

from . import demos
from .graph import DIAGNOSTIC_CODES, check_program
from .interpreter import Interpreter, RunOptions
from .nodes import RUNTIME_ERROR_CODES
from .scene import SceneError, load_scene
from .trace import TraceWriter
from .values import to_jsonable

_CONTROLS = ("pause", "resume", "step", "abort")


def _doc_id(doc: Any) -> str:
    blob = json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


class Store:
    """Flat-file document store: ``<root>/programs/<hash>.json`` plus an
    index mapping ids to filenames and supersede links."""

    def __init__(self, root: Path):
        self.root = root
        (root / "programs").mkdir(parents=True, exist_ok=True)
        (root / "runs").mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()
        self._index_path = root / "index.json"
        self._index: dict[str, Any] = {"programs": {}}
        if self._index_path.is_file():
            self._index = json.loads(self._index_path.read_text())

    def _flush_index(self) -> None:
        tmp = self._index_path.with_suffix(".tmp")
        tmp.write_text(json.dumps(self._index, indent=2, sort_keys=True) + "\n")
        tmp.replace(self._index_path)

    def put_program(self, doc: Any, supersedes: str | None = None) -> str:
        pid = _doc_id(doc)
        with self._lock:
            path = self.root / "programs" / f"{pid}.json"
            if not path.is_file():
                path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
            entry = self._index["programs"].setdefault(pid, {"file": path.name})
            if supersedes and supersedes != pid:
                old = self._index["programs"].get(supersedes)
                if old is not None:
                    old["superseded_by"] = pid
                entry["supersedes"] = supersedes
            self._flush_index()
        return pid

    def get_program(self, pid: str) -> Any | None:
        path = self.root / "programs" / f"{pid}.json"
        if not path.is_file():
            return None
        return json.loads(path.read_text())

    def list_programs(self) -> list[dict[str, Any]]:
        with self._lock:
            return [
                {"id": pid, **meta} for pid, meta in sorted(self._index["programs"].items())
            ]

    def run_dir(self, run_id: str) -> Path:
        d = self.root / "runs" / run_id
        d.mkdir(parents=True, exist_ok=True)
        return d


class Run:
    """One interpreter on one worker thread, with node-boundary control."""

    def __init__(self, run_id: str, interp: Interpreter, store: Store,
                 trace_path: Path, extra: dict[str, Any]):
        self.run_id = run_id
        self.interp = interp
        self.store = store
        self.trace_path = trace_path
        self.extra = extra
        self.status = "idle"
        self.events: list[dict[str, Any]] = []
        self._cond = threading.Condition()
        self._paused = False
        self._step_credits = 0
        self._thread: threading.Thread | None = None
        interp.trace.listen(self._on_event)

    # -- event fan-in (interpreter thread) --------------------------------

    def _on_event(self, ev) -> None:
        frame = {"seq": len(self.events), "run_id": self.run_id, **ev.to_tree()}
        if ev.event == "exit":
            frame["keyframe"] = self._keyframe()
        with self._cond:
            self.events.append(frame)
            self._cond.notify_all()

    def _keyframe(self) -> dict[str, Any]:
        w = self.interp.world
        objects = {}
        for oid, st in sorted(w.objects.items()):
            if st.world_pose is not None:
                objects[oid] = {"pose": [st.world_pose.x, st.world_pose.y, st.world_pose.theta]}
            else:
                objects[oid] = {"held": True}
        return {"q": [float(x) for x in w.q], "objects": objects}

    def _finish_frame(self) -> None:
        rep = self.interp.report()
        frame = {
            "seq": len(self.events), "run_id": self.run_id,
            "t_ms": self.interp.clock.now_ms, "dyn_id": -1, "node": "-",
            "event": "finished",
            "data": {"status": self.status, "error": rep.error, "digest": rep.digest},
        }
        with self._cond:
            self.events.append(frame)
            self._cond.notify_all()

    # -- worker loop --------------------------------------------------------

    def start(self) -> None:
        self.status = "running"
        self._thread = threading.Thread(target=self._drive, name=f"run-{self.run_id}", daemon=True)
        self._thread.start()

    def _drive(self) -> None:
        interp = self.interp
        try:
            while not interp.finished:
                with self._cond:
                    while self._paused and self._step_credits == 0 and self.status == "running":
                        self._cond.wait(timeout=0.5)
                    if self._step_credits > 0:
                        self._step_credits -= 1
                interp.step()
            self.status = "finished" if interp.status == "ok" else "failed"
        except Exception as exc:  # defensive: surface, never hang subscribers
            interp.status = "error"
            interp.error = f"INTERNAL: {exc}"
            self.status = "failed"
        rep = self.interp.report()
        d = self.store.run_dir(self.run_id)
        (d / "metrics.json").write_text(json.dumps(rep.metrics, indent=2, sort_keys=True) + "\n")
        (d / "report.json").write_text(
            json.dumps(rep.as_tree(), indent=2, sort_keys=True, default=str) + "\n")
        self._finish_frame()
        with open(self.trace_path, "w") as fh:
            for ev in self.interp.trace.events:
                fh.write(json.dumps(ev.to_tree(), sort_keys=True) + "\n")

    # -- control (gateway thread) -----------------------------------------

    def control(self, action: str) -> None:
        with self._cond:
            if self.status not in ("running",) and action != "abort":
                raise ValueError(f"cannot {action} a {self.status} run")
            if action == "pause":
                self._paused = True
            elif action == "resume":
                self._paused = False
            elif action == "step":
                if not self._paused:
                    raise ValueError("step requires a paused run")
                self._step_credits += 1
            elif action == "abort":
                self.interp.abort()
                self._paused = False
            self._cond.notify_all()

    def handle(self) -> dict[str, Any]:
        with self._cond:
            paused = self._paused
            n = len(self.events)
        status = "paused" if (self.status == "running" and paused) else self.status
        return {
            "run_id": self.run_id,
            "status": status,
            "events": n,
            "steps": self.interp.steps,
            "t_ms": self.interp.clock.now_ms,
            **self.extra,
            "trace": str(self.trace_path),
        }

    def wait_events(self, since: int, timeout: float = 30.0) -> list[dict[str, Any]]:
        """Events with seq >= since, blocking briefly when none are ready."""
        deadline = threading.TIMEOUT_MAX if timeout is None else timeout
        with self._cond:
            if len(self.events) <= since and not self._done_locked():
                self._cond.wait(timeout=deadline)
            return self.events[since:]

    def _done_locked(self) -> bool:
        return bool(self.events) and self.events[-1]["event"] == "finished"


def _scene_catalog(store: Store) -> list[dict[str, Any]]:
    out = [{"id": f"demo:{name}", "source": "shipped"} for name in demos.demo_names("scenes")]
    extra = store.root / "scenes"
    if extra.is_dir():
        out += [{"id": p.stem, "source": "data-dir"} for p in sorted(extra.glob("*.json"))]
    return out


def _load_scene_ref(store: Store, ref: str):
    if ref.startswith("demo:"):
        return load_scene(demos.load_demo("scenes", ref[5:]), ref[5:])
    path = store.root / "scenes" / f"{ref}.json"
    if not path.is_file():
        raise KeyError(ref)
    return load_scene(json.loads(path.read_text()), ref)


def create_app(data_dir: str | None = None) -> FastAPI:
    root = Path(data_dir or os.environ.get("CELLSCRIPT_DATA_DIR", "./cellscript-data"))
    store = Store(root)
    runs: dict[str, Run] = {}
    runs_lock = threading.Lock()
    app = FastAPI(title="cellscript gateway")

    # -- programs ---------------------------------------------------------

    @app.post("/programs")
    def post_program(doc: dict):
        program, diags = check_program(doc)
        body = {"diagnostics": [str(d) for d in diags]}
        if program is None:
            return JSONResponse(status_code=400, content=body)
        pid = store.put_program(doc)
        return {"id": pid, **body}

    @app.get("/programs")
    def list_programs():
        return {"programs": store.list_programs()}

    @app.get("/programs/{pid}")
    def get_program(pid: str):
        doc = store.get_program(pid)
        if doc is None:
            raise HTTPException(404, f"no program {pid!r}")
        return doc

    @app.put("/programs/{pid}")
    def put_program(pid: str, doc: dict):
        if store.get_program(pid) is None:
            raise HTTPException(404, f"no program {pid!r}")
        program, diags = check_program(doc)
        body = {"diagnostics": [str(d) for d in diags]}
        if program is None:
            return JSONResponse(status_code=400, content=body)
        new_id = store.put_program(doc, supersedes=pid)
        return {"id": new_id, "supersedes": pid, **body}

    # -- scenes -----------------------------------------------------------

    @app.get("/scenes")
    def list_scenes():
        return {"scenes": _scene_catalog(store)}

    @app.get("/scenes/{ref:path}")
    def get_scene(ref: str):
        try:
            scene = _load_scene_ref(store, ref)
        except (KeyError, FileNotFoundError):
            raise HTTPException(404, f"no scene {ref!r}")
        except SceneError as exc:
            raise HTTPException(400, str(exc))
        return to_jsonable(scene.raw, strip_volatile=False)

    # -- runs ---------------------------------------------------------------

    @app.post("/runs")
    def post_run(body: dict):
        pid = body.get("program_id", "")
        scene_ref = body.get("scene_id", "")
        if isinstance(pid, str) and pid.startswith("demo:"):
            doc = demos.load_demo("programs", pid[5:])
        else:
            doc = store.get_program(str(pid))
        if doc is None:
            raise HTTPException(404, f"no program {pid!r}")
        program, diags = check_program(doc)
        if program is None:
            return JSONResponse(status_code=400, content={"diagnostics": [str(d) for d in diags]})
        try:
            scene = _load_scene_ref(store, str(scene_ref))
        except (KeyError, FileNotFoundError):
            raise HTTPException(404, f"no scene {scene_ref!r}")
        except SceneError as exc:
            raise HTTPException(400, str(exc))

        opts = body.get("options", {}) or {}
        options = RunOptions(
            preplanning=bool(opts.get("preplanning", True)),
            seed=int(opts.get("seed", 0)),
            lookahead=int(opts.get("lookahead", 2)),
            planning_inflate_ms=float(opts.get("planning_inflate_ms", 0.0)),
            realtime_scale=float(opts.get("realtime_scale", 0.0)),
            faults=opts.get("faults"),
        )
        with runs_lock:
            run_id = f"r{len(runs):04d}"
            trace_path = store.run_dir(run_id) / "trace.jsonl"
            interp = Interpreter(program, scene, options, TraceWriter())
            run = Run(run_id, interp, store, trace_path,
                      extra={"program_id": pid, "scene_id": scene_ref})
            runs[run_id] = run
        run.start()
        return {"run_id": run_id, "status": "running"}

    def _run_or_404(run_id: str) -> Run:
        run = runs.get(run_id)
        if run is None:
            raise HTTPException(404, f"no run {run_id!r}")
        return run

    @app.get("/runs")
    def list_runs():
        with runs_lock:
            return {"runs": [r.handle() for r in runs.values()]}

    @app.get("/runs/{run_id}")
    def get_run(run_id: str):
        return _run_or_404(run_id).handle()

    @app.post("/runs/{run_id}/control")
    def control_run(run_id: str, body: dict):
        action = body.get("action")
        if action not in _CONTROLS:
            raise HTTPException(400, f"action must be one of {', '.join(_CONTROLS)}")
        run = _run_or_404(run_id)
        try:
            run.control(action)
        except ValueError as exc:
            raise HTTPException(409, str(exc))
        return run.handle()

    @app.get("/runs/{run_id}/metrics")
    def run_metrics(run_id: str):
        run = _run_or_404(run_id)
        return run.interp.metrics.as_tree()

    @app.websocket("/runs/{run_id}/events")
    async def run_events(ws: WebSocket, run_id: str):
        import anyio

        run = runs.get(run_id)
        await ws.accept()
        if run is None:
            await ws.send_json({"event": "error", "data": f"no run {run_id!r}"})
            await ws.close()
            return
        since = int(ws.query_params.get("since", 0))
        try:
            while True:
                batch = await anyio.to_thread.run_sync(run.wait_events, since, 5.0)
                if not batch and run.status in ("finished", "failed"):
                    await ws.close()  # resumed past the end of a finished run
                    return
                for frame in batch:
                    await ws.send_json(frame)
                    since = frame["seq"] + 1
                    if frame["event"] == "finished":
                        await ws.close()
                        return
        except WebSocketDisconnect:
            return

    # -- meta ----------------------------------------------------------------

    @app.get("/meta/diagnostic-codes")
    def diagnostic_codes():
        return {
            "validation": list(DIAGNOSTIC_CODES),
            "runtime": list(RUNTIME_ERROR_CODES),
        }

    @app.get("/meta/health")
    def health():
        return {"ok": True, "data_dir": str(root)}

    # -- studio bundle ---------------------------------------------------------

    dist = Path(__file__).resolve().parents[2] / "frontend" / "dist"
    if dist.is_dir():
        from fastapi.staticfiles import StaticFiles

        app.mount("/", StaticFiles(directory=str(dist), html=True), name="studio")

    return app
