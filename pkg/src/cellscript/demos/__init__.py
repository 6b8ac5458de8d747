"""Shipped example programs and scenes.

Artifacts live next to this module as plain JSON: ``programs/*.json``,
``scenes/*.json``, and ``malformed/*.json`` (a corpus of broken programs,
each annotated with the diagnostic code it must trigger).  The CLI and
gateway resolve ``demo:<name>`` references through :func:`demo_path`.
"""

from __future__ import annotations

import json
from importlib import resources
from pathlib import Path
from typing import Any

_KINDS = ("programs", "scenes", "malformed")


def _root() -> Path:
    return Path(resources.files(__name__))  # type: ignore[arg-type]


def demo_names(kind: str) -> list[str]:
    if kind not in _KINDS:
        raise ValueError(f"unknown demo kind {kind!r}")
    d = _root() / kind
    if not d.is_dir():
        return []
    return sorted(p.stem for p in d.glob("*.json"))


def demo_path(kind: str, name: str) -> Path:
    if kind not in _KINDS:
        raise ValueError(f"unknown demo kind {kind!r}")
    p = _root() / kind / f"{name}.json"
    if not p.is_file():
        raise FileNotFoundError(f"no shipped {kind[:-1]} named {name!r}")
    return p


def load_demo(kind: str, name: str) -> Any:
    return json.loads(demo_path(kind, name).read_text())


def manifest() -> dict[str, Any]:
    """Pairings of program → scene plus per-demo notes, for `cellscript demos`
    and the run gateway."""
    p = _root() / "manifest.json"
    return json.loads(p.read_text()) if p.is_file() else {"demos": []}
