import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dyndag.graph import is_topological, load_graph, parse_graph
from dyndag.rdp import run_rdp
from dyndag.schedule import (
    ALL_KNOWN,
    NAC_BOUNDED,
    build_exec_plan,
    order_exhaustive,
    order_heuristic,
    order_symbolic,
    partition,
    peak_of,
    tensor_sizes,
)
from dyndag.symbolic import Expr, entry_has_nac, evaluate

from conftest import BUNDLED, bundled_path
from graphgen import nac_chain, random_dag, random_graph
from oracles import all_topo_orders, naive_min_peak, order_peak


def node(id, op, ins, outs, **attrs):
    return {"id": id, "op": op, "inputs": ins, "outputs": outs, "attrs": attrs}


def dag(edges, sizes):
    """Concat DAG from ``{node: [preds]}``; node ``n`` outputs tensor ``n``."""
    nodes = []
    used = set()
    for n, preds in edges.items():
        nodes.append(node(n, "Concat", list(preds) or ["x"], [n], axis=0))
        used.update(preds)
    g = parse_graph({"name": "d", "symbols": [], "inputs": [{"name": "x", "dtype": "f32",
                                                              "shape": [4]}],
                     "constants": [], "nodes": nodes,
                     "outputs": [n for n in edges if n not in used]})
    return g, sizes


# --- exhaustive search ------------------------------------------------------

def test_chain_has_unique_order():
    g, sizes = dag({"a": [], "b": ["a"], "c": ["b"]}, {"a": 5, "b": 7, "c": 2})
    order, peak, method = order_exhaustive(g, ["a", "b", "c"], sizes)
    assert order == ["a", "b", "c"] and method == "exhaustive"
    assert peak == max(5 + 7, 7 + 2)


def test_smaller_peak_branch_first():
    # branch p: 100 then 10; branch q: 10 then 100; both join at j
    g, sizes = dag({"p1": [], "p2": ["p1"], "q1": [], "q2": ["q1"], "j": ["p2", "q2"]},
                   {"p1": 100, "p2": 10, "q1": 10, "q2": 100, "j": 1})
    nodes = ["p1", "p2", "q1", "q2", "j"]
    order, peak, _ = order_exhaustive(g, nodes, sizes)
    assert peak == naive_min_peak(g, sizes) == order_peak(g, order, sizes)
    assert order[:2] == ["p1", "p2"]


def test_diamond_tie_break_is_lexicographic():
    g, sizes = dag({"a": [], "c": ["a"], "b": ["a"], "d": ["b", "c"]},
                   {"a": 1, "b": 1, "c": 1, "d": 1})
    order, _, _ = order_exhaustive(g, ["a", "b", "c", "d"], sizes)
    assert order == ["a", "b", "c", "d"]


def test_exhaustive_cap_falls_back():
    g, sizes = random_dag(1, 14)
    order, peak, method = order_exhaustive(g, [n.id for n in g.nodes], sizes, cap=12)
    assert method == "heuristic" and is_topological(g, order)
    assert peak == order_peak(g, order, sizes)


@given(st.integers(0, 100_000), st.integers(1, 8))
@settings(max_examples=60, deadline=None)
def test_exhaustive_matches_enumeration(seed, n):
    g, sizes = random_dag(seed, n)
    nodes = [x.id for x in g.nodes]
    order, peak, _ = order_exhaustive(g, nodes, sizes)
    assert is_topological(g, order)
    assert peak == order_peak(g, order, sizes) == naive_min_peak(g, sizes)
    # lexicographically smallest among optimal orders
    best = min(o for o in all_topo_orders(g) if order_peak(g, o, sizes) == peak)
    assert order == best


@given(st.integers(0, 100_000), st.integers(1, 30))
@settings(max_examples=60, deadline=None)
def test_heuristic_orders_are_valid(seed, n):
    g, sizes = random_dag(seed, n)
    order = order_heuristic(g, [x.id for x in g.nodes], sizes)
    assert is_topological(g, order) and sorted(order) == sorted(x.id for x in g.nodes)


# --- symbolic comparison ----------------------------------------------------

N, M = Expr.symbol("N"), Expr.symbol("M")


@given(st.integers(0, 100_000), st.integers(1, 8))
@settings(max_examples=40, deadline=None)
def test_scaled_sizes_match_exhaustive(seed, n):
    g, sizes = random_dag(seed, n)
    nodes = [x.id for x in g.nodes]
    order, peak, method = order_symbolic(g, nodes, {t: N * c for t, c in sizes.items()})
    assert method == "symbolic-compare"
    ref_order, ref_peak, _ = order_exhaustive(g, nodes, sizes)
    assert order == ref_order and peak == N * ref_peak


def test_constant_difference_is_determinate():
    g, _ = dag({"a": [], "b": []}, {})
    order, peak, method = order_symbolic(g, ["a", "b"], {"a": N * M + 4, "b": N * M + 8})
    assert method == "symbolic-compare"
    assert peak == 2 * N * M + 12


def test_incomparable_sizes_probe_and_mark_heuristic():
    # running branch p first peaks at max(N+1, M+2), q first at max(M+1, N+2)
    g, _ = dag({"p1": [], "p2": ["p1"], "q1": [], "q2": ["q1"], "j": ["p2", "q2"]}, {})
    sizes = {"p1": N, "q1": M, "p2": Expr.const(1), "q2": Expr.const(1), "j": Expr.const(1)}
    order, _, method = order_symbolic(g, ["p1", "p2", "q1", "q2", "j"], sizes)
    assert method == "heuristic"
    assert is_topological(g, order)


def _random_symbolic_sizes(seed, sizes):
    rng = random.Random(seed)
    return {t: rng.choice([N * c, N * M * c, N * c + rng.randint(0, 5) * N * M])
            for t, c in sizes.items()}


@given(st.integers(0, 100_000), st.integers(2, 8))
@settings(max_examples=30, deadline=None)
def test_symbolic_plans_are_optimal_everywhere(seed, n):
    g, base = random_dag(seed, n)
    sizes = _random_symbolic_sizes(seed, base)
    nodes = [x.id for x in g.nodes]
    order, peak, method = order_symbolic(g, nodes, sizes)
    if method != "symbolic-compare":
        return
    rng = random.Random(seed)
    orders = list(all_topo_orders(g))
    for _ in range(20):
        env = {"N": rng.randint(1, 64), "M": rng.randint(1, 64)}
        concrete = {t: evaluate(e, env) for t, e in sizes.items()}
        assert evaluate(peak, env) == order_peak(g, order, concrete)
        assert evaluate(peak, env) == min(order_peak(g, o, concrete) for o in orders)


# --- partitioning -----------------------------------------------------------

def _interior_nac(g, rdp, sg):
    """Tensors produced and consumed inside ``sg`` with a nac shape, other
    than outputs of its boundary nodes."""
    inside = set(sg.nodes)
    bad = []
    for n in sg.nodes:
        if n in sg.boundary:
            continue
        for t in g.node(n).outputs:
            if entry_has_nac(rdp.shapes[t]) and any(c in inside for c in g.consumers.get(t, ())):
                bad.append(t)
    return bad


@given(st.integers(0, 10_000), st.integers(0, 5))
@settings(max_examples=40, deadline=None)
def test_nac_chain_gives_k_plus_one_subgraphs(seed, k):
    g = nac_chain(seed, k)
    rdp = run_rdp(g)
    sgs = partition(g, rdp)
    assert len(sgs) == k + 1
    for sg in sgs:
        assert _interior_nac(g, rdp, sg) == []


def test_topk_is_the_boundary():
    g = load_graph(bundled_path("fig1c_topk.json"))
    rdp = run_rdp(g)
    sgs = partition(g, rdp)
    assert sgs[0].boundary == ("topk",)
    assert sgs[0].nodes[-1] == "topk"


def test_static_graph_is_one_all_known_subgraph():
    g = load_graph(bundled_path("fig1b_conv_block.json"))
    plan = build_exec_plan(g, run_rdp(g))
    assert [sp.category for sp in plan.subgraphs] == [ALL_KNOWN]
    assert plan.subgraphs[0].method == "exhaustive"


def test_two_nonzero_give_three_subgraphs():
    g = nac_chain(3, 2)
    assert len(partition(g, run_rdp(g))) == 3


@given(st.integers(0, 10_000))
@settings(max_examples=40, deadline=None)
def test_partition_covers_graph(seed):
    g = random_graph(seed, 40)
    rdp = run_rdp(g)
    sgs = partition(g, rdp)
    members = [n for sg in sgs for n in sg.nodes]
    assert sorted(members) == sorted(n.id for n in g.nodes)
    for sg in sgs:
        assert _interior_nac(g, rdp, sg) == []
    plan = build_exec_plan(g, rdp)
    assert is_topological(g, plan.order)


@pytest.mark.parametrize("name", BUNDLED)
def test_control_regions_stay_whole(name):
    g = load_graph(bundled_path(name))
    rdp = run_rdp(g)
    sub_of = {n: sg.id for sg in partition(g, rdp) for n in sg.nodes}
    for r in g.regions():
        if r.combine is not None:
            assert len({sub_of[n] for n in r.nodes}) == 1


@pytest.mark.parametrize("name", BUNDLED)
def test_plan_orders_and_peaks(name):
    g = load_graph(bundled_path(name))
    rdp = run_rdp(g)
    plan = build_exec_plan(g, rdp)
    assert is_topological(g, plan.order)
    sizes = tensor_sizes(g, rdp)
    for sp in plan.subgraphs:
        pos = {n: i for i, n in enumerate(sp.order)}
        assert sorted(pos) == sorted(sp.nodes)
        assert all(pos[p] < pos[n] for n in sp.order for p in g.preds(n) if p in pos)
        if sp.category == NAC_BOUNDED:
            continue
        assert sp.peak == peak_of(g, sp.nodes, sp.order, sizes)

