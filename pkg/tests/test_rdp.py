import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dyndag.graph import load_graph, parse_graph
from dyndag.ops import AnalysisError
from dyndag.rdp import ConvergenceError, run_rdp, shuffled_order, substitute
from dyndag.symbolic import NAC, UNDEF, Known, SymbolicError, dim, parse_dim

from conftest import BUNDLED, bundled_path
from graphgen import random_graph
from oracles import entry_leq, soundness_mismatches


def shape(*dims):
    return tuple(parse_dim(d) for d in dims)


def rdp_of(name):
    return run_rdp(load_graph(bundled_path(name + ".json")))


def test_shape_chain_stays_symbolic():
    r = rdp_of("fig1a_shape_chain")
    assert r.value("s") == shape("N", 3, "H", "W")
    assert r.shape("y") == shape("N", "((3*H)*W)")
    assert not r.nac_nodes


def test_conv_block_fully_known():
    r = rdp_of("fig1b_conv_block")
    for t, e in r.shapes.items():
        assert all(isinstance(d, Known) for d in e), t
    assert r.shape("y") == shape(1, 32)


def test_topk_output_is_nac_downstream():
    r = rdp_of("fig1c_topk")
    assert r.shape("vals")[1] == NAC and r.shape("y")[1] == NAC
    assert r.shape("h") == shape("N", 64)
    assert "topk" in r.nac_nodes


def test_backward_fills_unknown_input():
    g = load_graph(bundled_path("backward_refine.json"))
    (decl,) = [d for d in g.inputs if d.name == "u"]
    assert UNDEF in decl.shape
    r = run_rdp(g)
    assert r.shape("u") == shape(32, "N")
    assert r.sweeps >= 3


def _combine_graph(width_b):
    node = lambda i, op, ins, outs, **a: {"id": i, "op": op, "inputs": ins,  # noqa: E731
                                          "outputs": outs, "attrs": a}
    return parse_graph({
        "name": "comb", "symbols": ["N"],
        "inputs": [{"name": "x", "dtype": "f32", "shape": ["N", 64]},
                   {"name": "p", "dtype": "i64", "shape": [1]}],
        "constants": [{"name": "w", "dtype": "f32", "shape": [64, width_b]}],
        "nodes": [node("sw", "Switch", ["x", "p"], ["g0", "g1"]),
                  node("a", "Relu", ["g0"], ["ra"]),
                  node("b", "MatMul", ["g1", "w"], ["rb"]),
                  node("cb", "Combine", ["ra", "rb"], ["y"])],
        "outputs": ["y"],
    })


def test_combine_meets_branches():
    assert run_rdp(_combine_graph(64)).shape("y") == shape("N", 64)
    assert run_rdp(_combine_graph(32)).shape("y") == (dim("N"), NAC)


def test_contradiction_names_node():
    d = {"name": "bad", "symbols": [], "inputs": [{"name": "x", "dtype": "f32", "shape": [3, 4]}],
         "constants": [{"name": "w", "dtype": "f32", "shape": [5, 2]}],
         "nodes": [{"id": "mm", "op": "MatMul", "inputs": ["x", "w"], "outputs": ["y"],
                    "attrs": {}}],
         "outputs": ["y"]}
    with pytest.raises(AnalysisError) as err:
        run_rdp(parse_graph(d))
    assert err.value.node_id == "mm" and len(err.value.values) == 2


def test_sweep_bound_is_enforced():
    g = load_graph(bundled_path("backward_refine.json"))
    with pytest.raises(ConvergenceError):
        run_rdp(g, max_sweeps=1)


@pytest.mark.parametrize("name", BUNDLED)
def test_last_sweep_changes_nothing(name):
    states = []
    run_rdp(load_graph(bundled_path(name)), on_sweep=states.append)
    assert not states[-1].changed
    assert len(states) <= 10 * len(load_graph(bundled_path(name)).nodes)


@pytest.mark.parametrize("name", BUNDLED)
def test_heights_never_increase(name):
    states = []
    run_rdp(load_graph(bundled_path(name)), on_sweep=states.append)
    for before, after in zip(states, states[1:]):
        for m in ("shapes", "values"):
            old, new = getattr(before, m), getattr(after, m)
            for t in old:
                assert entry_leq(new[t], old[t]), (t, old[t], new[t])


@pytest.mark.parametrize("name", BUNDLED)
def test_order_independent_on_bundled(name):
    g = load_graph(bundled_path(name))
    ref = run_rdp(g).canonical()
    for seed in range(5):
        assert run_rdp(g, order=shuffled_order(g, seed)).canonical() == ref


@given(st.integers(0, 10_000), st.integers(5, 80))
@settings(max_examples=30, deadline=None)
def test_order_independent_on_random_graphs(seed, n):
    g = random_graph(seed, n)
    ref = run_rdp(g).canonical()
    for k in range(3):
        assert run_rdp(g, order=shuffled_order(g, f"{seed}:{k}")).canonical() == ref


@pytest.mark.parametrize("name", BUNDLED)
def test_sound_against_interpreter(name):
    g = load_graph(bundled_path(name))
    assert soundness_mismatches(g, run_rdp(g), range(8)) == []


@given(st.integers(0, 10_000))
@settings(max_examples=25, deadline=None)
def test_sound_on_random_graphs(seed):
    g = random_graph(seed, 40)
    assert soundness_mismatches(g, run_rdp(g), range(4)) == []


def test_substitute_contract():
    r = rdp_of("fig1c_topk")
    sub = substitute(r, {"N": 7})
    assert sub.shapes["h"] == (7, 64)
    assert "vals" in sub.dynamic_only and "vals" not in sub.shapes
    with pytest.raises(SymbolicError):
        substitute(r, {})


def test_substitute_reports_undef():
    d = {"name": "u", "symbols": [], "inputs": [{"name": "x", "dtype": "f32", "shape": ["?", 2]}],
         "constants": [],
         "nodes": [{"id": "r", "op": "Relu", "inputs": ["x"], "outputs": ["y"], "attrs": {}}],
         "outputs": ["y"]}
    sub = substitute(run_rdp(parse_graph(d)), {})
    assert "x" in sub.unresolved and "y" in sub.unresolved
