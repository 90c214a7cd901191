import dataclasses

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dyndag.graph import load_graph, parse_graph
from dyndag.interp import ConcreteEnv, RuntimeShapeError, check_plan, interpret, numel, random_env
from dyndag.memplan import plan_from_peak, lifetimes_from_trace
from dyndag.rdp import run_rdp
from dyndag.schedule import build_exec_plan

from conftest import BUNDLED, bundled_path
from graphgen import random_graph


def load(name):
    return load_graph(bundled_path(name + ".json"))


def test_fig5_broadcast_instance():
    tr = interpret(load("fig5_broadcast"), ConcreteEnv(symbols={"I": 4, "J": 8, "K": 16}))
    assert tr.shapes["A"] == (4, 1, 1)
    assert tr.shapes["C"] == (4, 8, 16)


@pytest.mark.parametrize("branch, taken", [(0, {"path1"}), (1, {"path2a", "path2b"}),
                                           (2, {"path3"})])
def test_switch_runs_one_branch(branch, taken):
    g = load("fig1d_switch")
    tr = interpret(g, ConcreteEnv(symbols={"N": 3}, branches={"switch": branch}))
    ran = set(tr.executed())
    paths = {"path1", "path2a", "path2b", "path3"}
    assert ran & paths == taken
    assert set(tr.skipped) == paths - taken
    assert tr.branches["switch"] == branch
    assert tr.shapes["y"] == (3, 64)


def test_reshape_conserves_elements():
    g = parse_graph({
        "name": "rs", "symbols": ["N"],
        "inputs": [{"name": "x", "dtype": "f32", "shape": ["N", 12]}],
        "constants": [{"name": "t", "dtype": "i64", "shape": [3], "int_data": [0, 3, 4]}],
        "nodes": [{"id": "r", "op": "Reshape", "inputs": ["x", "t"], "outputs": ["y"],
                   "attrs": {}}],
        "outputs": ["y"],
    })
    tr = interpret(g, ConcreteEnv(symbols={"N": 5}))
    assert tr.shapes["y"] == (5, 3, 4)
    assert numel(tr.shapes["y"]) == 5 * 12


def test_runtime_mismatch_names_node():
    g = parse_graph({
        "name": "mm", "symbols": ["N"],
        "inputs": [{"name": "x", "dtype": "f32", "shape": [3, "N"]}],
        "constants": [{"name": "w", "dtype": "f32", "shape": [4, 2]}],
        "nodes": [{"id": "mm", "op": "MatMul", "inputs": ["x", "w"], "outputs": ["y"],
                   "attrs": {}}],
        "outputs": ["y"],
    })
    assert interpret(g, ConcreteEnv(symbols={"N": 4})).shapes["y"] == (3, 2)
    with pytest.raises(RuntimeShapeError) as err:
        interpret(g, ConcreteEnv(symbols={"N": 5}))
    assert err.value.node_id == "mm"


def test_peak_of_chain():
    g = load("fig1b_conv_block")
    tr = interpret(g, ConcreteEnv())
    assert tr.peak == max(tr.live_bytes)
    assert len(tr.live_bytes) == len(tr.order)


@pytest.mark.parametrize("name", BUNDLED)
def test_deterministic(name):
    g = load_graph(bundled_path(name))
    rdp = run_rdp(g)
    env = random_env(g, 3, rdp)
    a, b = interpret(g, env), interpret(g, env)
    assert a.shapes == b.shapes and a.values == b.values and a.live_bytes == b.live_bytes


@given(st.integers(0, 10_000), st.integers(0, 50))
@settings(max_examples=40, deadline=None)
def test_element_count_conserved(seed, env_seed):
    g = random_graph(seed, 30)
    tr = interpret(g, random_env(g, env_seed))
    for n in g.nodes:
        if n.op in ("Reshape", "Transpose", "Cast") and n.outputs[0] in tr.shapes:
            assert numel(tr.shapes[n.inputs[0]]) == numel(tr.shapes[n.outputs[0]])


# --- plan checking ----------------------------------------------------------

def _plans(name, seed=0):
    g = load(name)
    rdp = run_rdp(g)
    ep = build_exec_plan(g, rdp)
    env = random_env(g, seed, rdp)
    tr = interpret(g, env, ep.order)
    return g, rdp, ep, env, tr


def test_all_known_graph_passes_checks():
    g, _, ep, env, tr = _plans("fig1b_conv_block")
    mem = plan_from_peak(lifetimes_from_trace(tr))
    rep = check_plan(g, env, ep, mem)
    assert rep.ok, rep.violations


def test_overlapping_offsets_fail_check_c():
    g, _, ep, env, tr = _plans("fig1b_conv_block")
    mem = plan_from_peak(lifetimes_from_trace(tr))
    # move every tensor to offset 0: some pair overlaps in time and memory
    mem.placements = [dataclasses.replace(p, offset=0) for p in mem.placements]
    rep = check_plan(g, env, ep, mem)
    assert any(v.startswith("(c)") for v in rep.violations)


def test_short_arena_fails_check_d():
    g, _, ep, env, tr = _plans("fig1b_conv_block")
    mem = plan_from_peak(lifetimes_from_trace(tr))
    mem.arena = tr.peak - 1
    assert any(v.startswith("(d)") for v in check_plan(g, env, ep, mem).violations)


def test_non_topological_order_fails_check_a():
    g, _, ep, env, _ = _plans("fig1b_conv_block")
    ep.order = list(reversed(ep.order))
    assert check_plan(g, env, ep).violations[0].startswith("(a)")


@pytest.mark.parametrize("name", ["fig5_broadcast", "fig1d_switch", "range_slice"])
@pytest.mark.parametrize("seed", range(5))
def test_symbolic_subgraph_peaks_match(name, seed):
    g, _, ep, env, _ = _plans(name, seed)
    assert any(sp.method == "symbolic-compare" for sp in ep.subgraphs)
    rep = check_plan(g, env, ep)
    assert rep.ok, rep.violations
