"""Static validation of program documents and the compiled Program API."""

import time

import pytest

from cellscript.demos import demo_names, load_demo
from cellscript.graph import DIAGNOSTIC_CODES, NodeKind, check_program
from cellscript.nodes import RUNTIME_ERROR_CODES

from conftest import P, EXC, compile_doc, pick_place_doc


@pytest.mark.parametrize("name", demo_names("programs"))
def test_shipped_programs_are_clean(name):
    prog, diags = check_program(load_demo("programs", name))
    assert prog is not None
    assert diags == []


# Reachability problems are reported but do not invalidate the document;
# everything else in the corpus must refuse to compile.
WARNING_CODES = {"UNREACHABLE_NODE"}


@pytest.mark.parametrize("name", demo_names("malformed"))
def test_malformed_rejected_with_expected_code(name):
    doc = load_demo("malformed", name)
    prog, diags = check_program(doc["program"])
    assert any(d.code == doc["expect_code"] for d in diags), [str(d) for d in diags]
    if doc["expect_code"] not in WARNING_CODES:
        assert prog is None


def test_enough_hard_rejections():
    rejected = 0
    for name in demo_names("malformed"):
        prog, _ = check_program(load_demo("malformed", name)["program"])
        rejected += prog is None
    assert rejected >= 20


def test_malformed_corpus_covers_every_code():
    hit = set()
    for name in demo_names("malformed"):
        hit.add(load_demo("malformed", name)["expect_code"])
    assert hit == set(DIAGNOSTIC_CODES)


def test_code_tables_are_disjoint():
    assert len(DIAGNOSTIC_CODES) == len(set(DIAGNOSTIC_CODES))
    assert len(RUNTIME_ERROR_CODES) == len(set(RUNTIME_ERROR_CODES))


def test_whole_corpus_checks_fast():
    docs = [load_demo("programs", n) for n in demo_names("programs")]
    bad = [load_demo("malformed", n)["program"] for n in demo_names("malformed")]
    t0 = time.perf_counter()
    for d in docs + bad:
        check_program(d)
    assert time.perf_counter() - t0 < 1.0


def test_diagnostics_carry_location():
    doc = load_demo("malformed", "edge_to_missing_node")
    _, diags = check_program(doc["program"])
    d = next(x for x in diags if x.code == doc["expect_code"])
    text = str(d)
    assert d.code in text
    assert d.routine or d.node  # something to click on


# --- compiled structure -----------------------------------------------------------


def test_program_navigation():
    prog = compile_doc(pick_place_doc((0.5, 0.5, 0.0)))
    main = prog.routines["main"]
    cyc = prog.routines["cycle"]
    assert not main.is_plan and cyc.is_plan
    assert prog.main == "main"
    assert main.entry == "e"
    assert main.successor("e", "next") == "inv"
    assert main.successor("inv", "fail") == "x"
    assert main.successor("x", "anything") is None
    inv = main.nodes["inv"]
    assert inv.kind == NodeKind.ROUTINE_INVOKE
    assert inv.first_normal_port() == "next"
    # exception ports never count as the normal continuation
    assert [p.label for p in inv.ports if p.exception] == ["fail"]


def test_out_edges_table():
    doc = pick_place_doc((0.5, 0.5, 0.0))
    cyc = compile_doc(doc).routines["cycle"]
    table = cyc.out_edges()
    assert table[("pe", "next")] == "pick"
    assert table[("drop", "next")] == "px"


def test_version_and_main_required():
    _, diags = check_program({"routines": {}})
    assert any(d.code == "BAD_VERSION" for d in diags)
    _, diags = check_program({"version": "1", "routines": {}})
    assert any(d.code == "BAD_DOCUMENT" for d in diags)


def test_duplicate_port_label_rejected():
    doc = pick_place_doc((0.5, 0.5, 0.0))
    doc["routines"]["main"]["nodes"][1]["ports"] = P("next", "next")
    prog, diags = check_program(doc)
    assert prog is None
    assert any(d.code == "DUPLICATE_PORT" for d in diags)


def test_unwired_port_rejected():
    doc = pick_place_doc((0.5, 0.5, 0.0))
    doc["routines"]["main"]["nodes"][1]["ports"] = P("next", "spare", EXC("fail"))
    prog, diags = check_program(doc)
    assert prog is None
    assert any(d.code in ("UNWIRED_PORT", "DANGLING_PORT") for d in diags)


def test_loop_inside_plan_routine_rejected():
    doc = pick_place_doc((0.5, 0.5, 0.0))
    cyc = doc["routines"]["cycle"]
    # bend the last edge back to the first statement
    for e in cyc["edges"]:
        if e["to"] == "px":
            e["to"] = "pick"
    cyc["nodes"] = [n for n in cyc["nodes"] if n["id"] != "px"]
    prog, diags = check_program(doc)
    assert prog is None
    assert any(d.code == "PR_LOOP" for d in diags)
