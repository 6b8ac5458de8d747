"""Command-line entry points.

Exit codes: 0 success, 1 validation/run failure, 2 usage or I/O error.
Program and scene arguments accept either a file path or ``demo:<name>``,
which resolves into the shipped examples.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path
from typing import Any

from . import demos
from .graph import check_program
from .interpreter import Interpreter, RunOptions
from .planner import choices_dot
from .scene import SceneError, load_scene, load_scene_file
from .trace import TraceWriter
from .values import to_jsonable

EXIT_OK = 0
EXIT_FAIL = 1
EXIT_USAGE = 2


def _read_json(path: str) -> Any:
    return json.loads(Path(path).read_text())


def _resolve_program(ref: str) -> Any:
    if ref.startswith("demo:"):
        return demos.load_demo("programs", ref[5:])
    return _read_json(ref)


def _resolve_scene(ref: str):
    if ref.startswith("demo:"):
        return load_scene(demos.load_demo("scenes", ref[5:]), ref[5:])
    return load_scene_file(ref)


def _load_checked(ref: str):
    """Program ref → (Program, diagnostics); raises SystemExit(1) on errors."""
    doc = _resolve_program(ref)
    program, diags = check_program(doc)
    for d in diags:
        print(str(d), file=sys.stderr)
    if program is None:
        raise SystemExit(EXIT_FAIL)
    return program


def cmd_validate(args: argparse.Namespace) -> int:
    try:
        doc = _resolve_program(args.path)
    except (OSError, FileNotFoundError) as exc:
        print(f"cannot read {args.path}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except json.JSONDecodeError as exc:
        # Unreadable-as-JSON is still a diagnosable document, not an I/O error.
        print(f"BAD_DOCUMENT -: not valid JSON: {exc}")
        return EXIT_FAIL
    program, diags = check_program(doc)
    for d in diags:
        print(str(d))
    errors = [d for d in diags if d.severity == "error"]
    print(f"{args.path}: {'OK' if not errors else f'{len(errors)} error(s)'}")
    return EXIT_OK if not errors else EXIT_FAIL


def cmd_run(args: argparse.Namespace) -> int:
    try:
        program = _load_checked(args.program)
        scene = _resolve_scene(args.scene)
    except SystemExit:
        raise
    except (OSError, FileNotFoundError, json.JSONDecodeError, SceneError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE

    options = RunOptions(
        preplanning=(args.preplanning == "on"),
        seed=args.seed,
        lookahead=args.lookahead,
        planning_inflate_ms=args.inflate_ms,
        realtime_scale=args.realtime_scale,
    )
    trace_stream = open(args.trace, "w") if args.trace else None
    try:
        writer = TraceWriter(trace_stream)
        report = Interpreter(program, scene, options, writer).run()
    finally:
        if trace_stream:
            trace_stream.close()

    if args.metrics:
        Path(args.metrics).write_text(json.dumps(report.metrics, indent=2, sort_keys=True) + "\n")

    summary = report.as_tree()
    summary["final_variables"] = {
        name: to_jsonable(report.final_map.get(name), strip_volatile=True)
        for name in ("picked_objects", "placed_objects", "pallet_state")
        if report.final_map.get(name) is not None
    }
    print(json.dumps(summary, indent=2, sort_keys=True, default=str))
    return EXIT_OK if report.status == "ok" else EXIT_FAIL


def cmd_choices(args: argparse.Namespace) -> int:
    try:
        program = _load_checked(args.program)
        scene = _resolve_scene(args.scene)
    except SystemExit:
        raise
    except (OSError, FileNotFoundError, json.JSONDecodeError, SceneError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    plan_ids = [rid for rid, r in program.routines.items() if r.is_plan]
    rid = args.routine or (plan_ids[0] if plan_ids else None)
    if rid is None or rid not in program.routines or not program.routines[rid].is_plan:
        print(f"error: no plan routine {rid!r} (available: {', '.join(plan_ids) or 'none'})",
              file=sys.stderr)
        return EXIT_USAGE

    from .scene import WorldState, static_env_tree
    from .services import ServiceRegistry, SimClock
    from .values import SetVar, init_map

    # Seed every perception variable with what the camera would see at t0,
    # so grasp-candidate domains reflect the scene instead of showing empty.
    vm = init_map(static_env_tree(scene), scene.home)
    registry = ServiceRegistry(scene, WorldState(scene), SimClock(), {})
    for name in registry.service_names():
        if registry.type_of(name) == "perception":
            vm = vm.apply([SetVar(f"{name}_perception", registry.call(name, {}, 0))])
    dot = choices_dot(program.routines[rid], vm, scene)
    if args.output:
        Path(args.output).write_text(dot)
        print(f"wrote {args.output}")
    else:
        print(dot)
    return EXIT_OK


def cmd_demos(args: argparse.Namespace) -> int:
    man = demos.manifest()
    if args.json:
        print(json.dumps(man, indent=2, sort_keys=True))
        return EXIT_OK
    for entry in man.get("demos", []):
        print(f"{entry['program']:24s} scene={entry['scene']:16s} {entry.get('note', '')}")
    malformed = demos.demo_names("malformed")
    print(f"({len(man.get('demos', []))} demos, {len(malformed)} malformed corpus entries)")
    return EXIT_OK


def cmd_bench(args: argparse.Namespace) -> int:
    import numpy as np

    from .kernels import HAVE_NUMBA, get_impl

    rng = np.random.default_rng(0)

    def poly(cx, cy, n=6, r=0.05):
        ang = np.sort(rng.uniform(0, 2 * np.pi, n))
        return np.column_stack([cx + r * np.cos(ang), cy + r * np.sin(ang)])

    polys = [poly(*rng.uniform(-1, 1, 2)) for _ in range(args.polys)]
    segs = rng.uniform(-1, 1, (args.segments, 4))

    names = ["numpy"] + (["numba"] if HAVE_NUMBA else [])
    results: dict[str, dict[str, float]] = {}
    baseline: dict[str, list[float]] = {}
    for name in names:
        impl = get_impl(name)
        # untimed warm-up: triggers JIT compilation on the numba path
        impl.poly_clearance(polys[0], polys[1])
        impl.seg_poly_clearance(segs[0, :2], segs[0, 2:], polys[0])

        t0 = time.perf_counter()
        pv = [impl.poly_clearance(polys[i], polys[i + 1]) for i in range(len(polys) - 1)]
        t1 = time.perf_counter()
        sv = [impl.seg_poly_clearance(s[:2], s[2:], polys[i % len(polys)])
              for i, s in enumerate(segs)]
        t2 = time.perf_counter()
        results[name] = {
            "poly_pair_us": (t1 - t0) / max(1, len(polys) - 1) * 1e6,
            "seg_poly_us": (t2 - t1) / max(1, len(segs)) * 1e6,
        }
        values = [round(v, 12) for v in pv + sv]
        baseline.setdefault("values", values)
        if values != baseline["values"]:
            print("BACKENDS DISAGREE", file=sys.stderr)
            return EXIT_FAIL

    for name, r in results.items():
        print(f"{name:6s} poly-pair {r['poly_pair_us']:8.2f} us   seg-poly {r['seg_poly_us']:8.2f} us")
    if len(results) == 2:
        speedup = results["numpy"]["seg_poly_us"] / results["numba"]["seg_poly_us"]
        print(f"numba speedup on seg-poly: {speedup:.1f}x  (backends agree on all "
              f"{len(baseline['values'])} values)")
    else:
        print("numba not importable; benchmarked numpy only")
    return EXIT_OK


def cmd_serve(args: argparse.Namespace) -> int:
    import uvicorn

    from .gateway import create_app

    app = create_app(data_dir=args.data_dir)
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cellscript",
                                description="Graph-programmed pick-and-place runtime")
    sub = p.add_subparsers(dest="command", required=True)

    v = sub.add_parser("validate", help="static-check a program document")
    v.add_argument("path", help="program file or demo:<name>")
    v.set_defaults(func=cmd_validate)

    r = sub.add_parser("run", help="execute a program in a scene")
    r.add_argument("program", help="program file or demo:<name>")
    r.add_argument("scene", help="scene file or demo:<name>")
    r.add_argument("--preplanning", choices=("on", "off"), default="on")
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--trace", help="write the event stream (JSONL) here")
    r.add_argument("--metrics", help="write planning/waiting aggregates (JSON) here")
    r.add_argument("--realtime-scale", type=float, default=0.0,
                   help="map virtual time onto wall time (0 = fast-forward)")
    r.add_argument("--lookahead", type=int, default=2)
    r.add_argument("--inflate-ms", type=float, default=0.0,
                   help="artificially lengthen every solve by this many virtual ms")
    r.set_defaults(func=cmd_run)

    c = sub.add_parser("choices", help="dump a plan routine's choice points as DOT")
    c.add_argument("program")
    c.add_argument("scene")
    c.add_argument("--routine", help="plan routine id (default: first)")
    c.add_argument("-o", "--output")
    c.set_defaults(func=cmd_choices)

    d = sub.add_parser("demos", help="list shipped example programs")
    d.add_argument("--json", action="store_true")
    d.set_defaults(func=cmd_demos)

    b = sub.add_parser("bench", help="compare collision-kernel backends")
    b.add_argument("--polys", type=int, default=2000)
    b.add_argument("--segments", type=int, default=20000)
    b.set_defaults(func=cmd_bench)

    s = sub.add_parser("serve", help="start the HTTP/WebSocket gateway")
    s.add_argument("--host", default="127.0.0.1")
    s.add_argument("--port", type=int, default=8040)
    s.add_argument("--data-dir", help="storage root (else $CELLSCRIPT_DATA_DIR or ./cellscript-data)")
    s.set_defaults(func=cmd_serve)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse uses exit code 2 for usage errors already
        return int(exc.code or 0)
    try:
        return args.func(args)
    except SystemExit as exc:
        return int(exc.code or 0)


if __name__ == "__main__":
    sys.exit(main())
