"""Variable map semantics: batched mutations, reserved names, poison rules,
canonical serialization, and the final-state digest."""

import json
import math

import pytest
from hypothesis import given
from hypothesis import strategies as st

from cellscript.geometry import Pose
from cellscript.values import (
    ListAppend,
    ListRemoveByKey,
    Poison,
    PoisonWriteError,
    RemoveVar,
    ReservedMutationError,
    SetVar,
    TypeMismatchError,
    UndefinedVariableError,
    VariableMap,
    WorldObject,
    init_map,
    map_digest,
    normalize_value,
    to_jsonable,
)

ENV = {"robot": {"links": [1.0], "limits": [[-3.2, 3.2]], "widths": [0.1], "base": [0, 0, 0]}}


def test_apply_batch_bumps_revision_once():
    vm = VariableMap({"xs": [1]})
    out = vm.apply([SetVar("a", 1), SetVar("b", 2), ListAppend("xs", 3)])
    assert out.revision == vm.revision + 1
    assert out.get("a") == 1 and out.get("b") == 2 and out.get("xs") == [1, 3]
    # the source map is untouched
    assert "a" not in vm and vm.get("xs") == [1]


def test_apply_failure_is_atomic():
    vm = VariableMap({"xs": [1]})
    with pytest.raises(UndefinedVariableError):
        vm.apply([SetVar("a", 1), ListAppend("nope", 2)])
    assert "a" not in vm and vm.revision == 0


def test_remove_reserved_rejected():
    vm = init_map(ENV, [0.0])
    with pytest.raises(ReservedMutationError):
        vm.apply([RemoveVar("jps")])


def test_remove_undefined_rejected():
    with pytest.raises(UndefinedVariableError):
        VariableMap({}).apply([RemoveVar("ghost")])


def test_append_type_checked():
    vm = VariableMap({"n": 3})
    with pytest.raises(TypeMismatchError):
        vm.apply([ListAppend("n", 1)])
    with pytest.raises(UndefinedVariableError):
        vm.apply([ListAppend("ghost", 1)])


def test_list_remove_by_key_matches_dicts_and_objects():
    obj = WorldObject("p1", "part", ((0, 0), (1, 0), (1, 1)), Pose(0, 0, 0))
    vm = VariableMap({"xs": [{"id": "p1"}, {"id": "p2"}, 7], "os": [obj]})
    out = vm.apply([ListRemoveByKey("xs", "p1"), ListRemoveByKey("os", "p1")])
    assert out.get("xs") == [{"id": "p2"}, 7]
    assert out.get("os") == []


def test_normalize_rejects_foreign_types():
    with pytest.raises(TypeMismatchError):
        normalize_value(object())
    assert normalize_value((1, (2, 3))) == [1, [2, 3]]


def test_poison_only_in_shadow_maps():
    vm = VariableMap({"a": 1})
    with pytest.raises(PoisonWriteError):
        vm.poison("a", 5)
    sh = vm.as_shadow()
    sh2 = sh.poison("a", 5)
    assert sh2.is_poisoned("a") and sh2.poison_origin("a") == 5
    assert not sh.is_poisoned("a")


def test_poison_many_is_one_revision():
    sh = VariableMap({"a": 1}).as_shadow()
    out = sh.poison_many(["a", "b", "c"], 9)
    assert out.revision == sh.revision + 1
    assert all(out.is_poisoned(n) for n in ("a", "b", "c"))


def test_init_map_binds_reserved_names():
    vm = init_map(ENV, [0.5])
    for name in ("jps", "active_tool", "static_env", "picked_objects", "placed_objects"):
        assert name in vm
    assert vm.get("jps") == [0.5] and vm.revision == 0


def test_init_map_validates_home():
    with pytest.raises(TypeMismatchError):
        init_map(ENV, [0.5, 0.5])  # arity
    with pytest.raises(TypeMismatchError):
        init_map(ENV, [9.0])  # limits
    with pytest.raises(TypeMismatchError):
        init_map({"robot": {}}, [0.0])


def test_to_jsonable_special_forms():
    assert to_jsonable(Pose(1, 2, 0.5)) == [1, 2, 0.5]
    assert to_jsonable(Poison(7)) == {"$poison": 7}
    tree = to_jsonable({"meta": {"ts_ms": 1, "msg_id": 2, "srv": "x"}}, strip_volatile=True)
    assert tree == {"meta": {"srv": "x"}}


def test_digest_ignores_entry_order_and_volatile_keys():
    a = VariableMap({"x": 1, "y": {"msg_id": 4, "v": 2}})
    b = VariableMap({"y": {"v": 2, "msg_id": 9}, "x": 1})
    assert map_digest(a) == map_digest(b)
    c = VariableMap({"x": 1, "y": {"msg_id": 4, "v": 3}})
    assert map_digest(a) != map_digest(c)


def test_digest_is_json_safe():
    vm = VariableMap({"p": Pose(0.25, -1.0, 0.0)})
    blob = map_digest(vm)
    assert len(blob) == 64 and all(ch in "0123456789abcdef" for ch in blob)
    with pytest.raises(ValueError):
        json.dumps(math.nan, allow_nan=False)  # the digest path forbids NaN the same way


json_scalars = st.one_of(
    st.integers(min_value=-(2**31), max_value=2**31),
    st.booleans(),
    st.text(max_size=8),
    st.floats(allow_nan=False, allow_infinity=False, width=32),
)
json_values = st.recursive(
    json_scalars,
    lambda inner: st.one_of(
        st.lists(inner, max_size=4), st.dictionaries(st.text(max_size=6), inner, max_size=4)
    ),
    max_leaves=12,
)


@given(st.dictionaries(st.text(min_size=1, max_size=8), json_values, max_size=6), st.randoms())
def test_digest_insertion_order_free(entries, rnd):
    items = list(entries.items())
    rnd.shuffle(items)
    assert map_digest(VariableMap(dict(items))) == map_digest(VariableMap(entries))


@given(st.lists(st.tuples(st.text(min_size=1, max_size=6), json_values), max_size=6))
def test_revision_counts_batches_not_mutations(muts):
    vm = VariableMap({})
    batch = [SetVar(n, v) for n, v in muts]
    if not batch:
        return
    out = vm.apply(batch)
    assert out.revision == 1
