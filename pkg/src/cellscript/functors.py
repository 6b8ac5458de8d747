"""Named variable-mutation functors.

A functor is a small named update applied to the variable map by a
``FunctorVariableMutation`` statement: it declares which variables it reads
and writes (the static checker and the speculation machinery rely on those
sets) and returns a mutation batch.  Extensions register their own with
:func:`register_functor`.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Callable, Mapping

from .values import ListAppend, Mutation, SetVar, TypeMismatchError, VariableMap


@dataclass(frozen=True)
class Functor:
    name: str
    reads: Callable[[Mapping[str, Any]], frozenset[str]]
    writes: Callable[[Mapping[str, Any]], frozenset[str]]
    apply: Callable[[VariableMap, Mapping[str, Any]], list[Mutation]]


_REGISTRY: dict[str, Functor] = {}


def register_functor(
    name: str,
    apply: Callable[[VariableMap, Mapping[str, Any]], list[Mutation]],
    reads: Callable[[Mapping[str, Any]], frozenset[str]] | None = None,
    writes: Callable[[Mapping[str, Any]], frozenset[str]] | None = None,
) -> Functor:
    var_of = lambda args: frozenset({args["var"]} if isinstance(args.get("var"), str) else set())
    f = Functor(name, reads or var_of, writes or var_of, apply)
    _REGISTRY[name] = f
    return f


def get_functor(name: str) -> Functor | None:
    return _REGISTRY.get(name)


def functor_names() -> list[str]:
    return sorted(_REGISTRY)


def _require_var(args: Mapping[str, Any]) -> str:
    var = args.get("var")
    if not isinstance(var, str) or not var:
        raise TypeMismatchError("functor needs a non-empty 'var' argument")
    return var


def _counter_value(vm: VariableMap, var: str) -> int:
    value = vm.get(var, 0)
    if not isinstance(value, int) or isinstance(value, bool):
        raise TypeMismatchError(f"variable {var!r} is not a counter (got {type(value).__name__})")
    return value


def _counter_inc(vm: VariableMap, args: Mapping[str, Any]) -> list[Mutation]:
    var = _require_var(args)
    step = args.get("step", 1)
    return [SetVar(var, _counter_value(vm, var) + int(step))]


def _counter_dec(vm: VariableMap, args: Mapping[str, Any]) -> list[Mutation]:
    var = _require_var(args)
    step = args.get("step", 1)
    return [SetVar(var, _counter_value(vm, var) - int(step))]


def _list_clear(vm: VariableMap, args: Mapping[str, Any]) -> list[Mutation]:
    var = _require_var(args)
    current = vm.get(var, [])
    if not isinstance(current, list):
        raise TypeMismatchError(f"variable {var!r} is not a list")
    return [SetVar(var, [])]


def _list_append(vm: VariableMap, args: Mapping[str, Any]) -> list[Mutation]:
    var = _require_var(args)
    current = vm.get(var, [])
    if not isinstance(current, list):
        raise TypeMismatchError(f"variable {var!r} is not a list")
    return [ListAppend(var, args.get("value"))]


def _placed_clear(vm: VariableMap, args: Mapping[str, Any]) -> list[Mutation]:
    return [SetVar("placed_objects", [])]


register_functor("counter.inc", _counter_inc)
register_functor("counter.dec", _counter_dec)
register_functor("list.clear", _list_clear)
register_functor("list.append", _list_append)
register_functor(
    "placed.clear",
    _placed_clear,
    reads=lambda args: frozenset(),
    writes=lambda args: frozenset({"placed_objects"}),
)
