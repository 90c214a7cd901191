"""Execution-order planning for minimal peak memory.

The graph is cut into subgraphs at nodes whose output shape contains nac.
Inside a subgraph the order is found by a memoized search over the sets of
already executed nodes: exactly when all sizes are known, by sign
comparison of size expressions when they are symbolic, and greedily when
the subgraph is too large.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

from .graph import Graph, topo_sort
from .symbolic import (
    NAC,
    UNDEF,
    Expr,
    Known,
    Sign,
    Sym,
    compare_sign,
    evaluate,
    render,
    sym_max,
)

EXHAUSTIVE_CAP = 12
PROBE_VALUE = 16
ROLLOUT_LIMIT = 48

ALL_KNOWN = "all-known"
MIXED = "mixed-const"
NAC_BOUNDED = "nac-bounded"


# ---------------------------------------------------------------------------
# sizes
# ---------------------------------------------------------------------------


def tensor_bytes(g: Graph, shape_entry, tensor) -> Expr | None:
    """Size in bytes as an expression, or None when not statically known."""
    if shape_entry in (UNDEF, NAC):
        return None
    total = Expr.const(g.elem_size(tensor))
    for d in shape_entry:
        if isinstance(d, Known):
            total = total * d.value
        elif isinstance(d, Sym):
            total = total * d.expr
        else:
            return None
    return total


def tensor_sizes(g: Graph, rdp) -> dict:
    return {t: tensor_bytes(g, rdp.shapes[t], t) for n in g.nodes for t in n.outputs}


# ---------------------------------------------------------------------------
# partitioning
# ---------------------------------------------------------------------------


@dataclass
class Subgraph:
    id: int
    nodes: tuple  # member node ids in global topological order
    level: int
    has_control: bool
    boundary: tuple  # member nodes with a nac output shape


def _units(g: Graph):
    """Outermost Switch/Combine regions contracted into single units."""
    unit_of = {n.id: n.id for n in g.nodes}
    regions = sorted(g.regions(), key=lambda r: -len(r.nodes))
    for r in regions:
        if r.combine is None:
            continue
        nodes = r.nodes
        if any(unit_of[n] != n for n in nodes):
            continue  # already inside a larger region
        head = r.switch
        for n in nodes:
            unit_of[n] = head
    return unit_of


def partition(g: Graph, rdp) -> list:
    unit_of = _units(g)
    topo = topo_sort(g)
    pos = {n: i for i, n in enumerate(topo)}
    members: dict = {}
    for n in topo:
        members.setdefault(unit_of[n], []).append(n)
    boundary = {u: any(n in rdp.nac_nodes for n in ms) for u, ms in members.items()}
    unit_preds = {u: set() for u in members}
    for n in g.nodes:
        for p in g.preds(n.id):
            if unit_of[p] != unit_of[n.id]:
                unit_preds[unit_of[n.id]].add(unit_of[p])
    level = {}
    for n in topo:  # units appear in topological order of their first member
        u = unit_of[n]
        if u in level:
            continue
        level[u] = max((level[p] + boundary[p] for p in unit_preds[u]), default=0)

    # connected components per level over unit edges
    parent = {u: u for u in members}

    def find(u):
        while parent[u] != u:
            parent[u] = parent[parent[u]]
            u = parent[u]
        return u

    for u, ps in unit_preds.items():
        for p in ps:
            if level[p] == level[u]:
                parent[find(p)] = find(u)
    comps: dict = {}
    for u in members:
        comps.setdefault(find(u), []).append(u)
    out = []
    for us in comps.values():
        nodes = sorted((n for u in us for n in members[u]), key=pos.__getitem__)
        out.append((level[us[0]], pos[nodes[0]], nodes))
    out.sort()
    subgraphs = []
    for i, (lvl, _, nodes) in enumerate(out):
        ctrl = any(g.node(n).op in ("Switch", "Combine") for n in nodes)
        bnd = tuple(n for n in nodes if n in rdp.nac_nodes)
        subgraphs.append(Subgraph(i, tuple(nodes), lvl, ctrl, bnd))
    return subgraphs


# ---------------------------------------------------------------------------
# peak accounting inside one subgraph
# ---------------------------------------------------------------------------


class _Scope:
    """Liveness facts of one subgraph, indexed by member position."""

    def __init__(self, g: Graph, nodes, sizes):
        self.nodes = list(nodes)
        self.idx = {n: i for i, n in enumerate(self.nodes)}
        inside = set(self.nodes)
        self.preds = []
        for n in self.nodes:
            mask = 0
            for p in g.preds(n):
                if p in inside:
                    mask |= 1 << self.idx[p]
            self.preds.append(mask)
        # per produced tensor: (producer index, size, escapes, mask of inside consumers)
        self.tensors = []
        for n in self.nodes:
            for t in g.node(n).outputs:
                users = g.consumers.get(t, ())
                mask = 0
                escapes = t in g.outputs
                for c in users:
                    if c in inside:
                        mask |= 1 << self.idx[c]
                    else:
                        escapes = True
                self.tensors.append((self.idx[n], t, sizes.get(t), escapes, mask))

    def live_terms(self, done: int, v: int) -> list:
        """Tensors live while executing member ``v`` after set ``done``."""
        after = done | (1 << v)
        out = []
        for p, t, size, escapes, mask in self.tensors:
            if not after >> p & 1:
                continue
            if p == v or escapes or mask & ~done:
                out.append(size)
        return out

    def post_terms(self, done: int, v: int) -> list:
        after = done | (1 << v)
        return [size for p, t, size, escapes, mask in self.tensors
                if after >> p & 1 and (escapes or mask & ~after)]

    def ready(self, done: int):
        for i in range(len(self.nodes)):
            if not done >> i & 1 and self.preds[i] & ~done == 0:
                yield i


def _as_sizes(sizes) -> dict:
    """Accept plain ints as byte sizes alongside expressions."""
    return {t: Expr.const(v) if isinstance(v, int) else v for t, v in sizes.items()}


def _sum(terms):
    total = Expr.const(0)
    for s in terms:
        total = total + (s if s is not None else Expr.const(0))
    return total


def step_profile(g: Graph, nodes, order, sizes) -> list:
    """Live-bytes expression at every step of ``order``."""
    sizes = _as_sizes(sizes)
    scope = _Scope(g, nodes, sizes)
    done, out = 0, []
    for n in order:
        v = scope.idx[n]
        out.append(_sum(scope.live_terms(done, v)))
        done |= 1 << v
    return out


def peak_of(g: Graph, nodes, order, sizes) -> Expr:
    """Peak expression of ``order``; symbolic maxima stay as max(...)."""
    kept = []
    for e in step_profile(g, nodes, order, sizes):
        if any(compare_sign(k - e) is Sign.NONNEG for k in kept):
            continue
        kept = [k for k in kept if compare_sign(e - k) is not Sign.NONNEG] + [e]
    peak = kept[0] if kept else Expr.const(0)
    for e in kept[1:]:
        peak = sym_max(peak, e)
    return peak


# ---------------------------------------------------------------------------
# comparison back-ends
# ---------------------------------------------------------------------------


class _Cmp:
    """Orders peak values; ``exact`` stays True while no probe was needed."""

    def __init__(self, symbols):
        self.exact = True
        self.probe = {s: PROBE_VALUE for s in symbols}

    def le(self, a: Expr, b: Expr) -> bool:
        if a == b:
            return True
        sign = compare_sign(b - a)
        if sign is Sign.NONNEG:
            return True
        if sign is Sign.NONPOS:
            return False
        self.exact = False
        return evaluate(a, self.probe) <= evaluate(b, self.probe)

    def max(self, a: Expr, b: Expr) -> Expr:
        if a == b:
            return a
        sign = compare_sign(b - a)
        if sign is Sign.NONNEG:
            return b
        if sign is Sign.NONPOS:
            return a
        return sym_max(a, b)


def _search(scope: _Scope, cmp: _Cmp, ids):
    full = (1 << len(scope.nodes)) - 1

    @lru_cache(maxsize=None)
    def best(done: int) -> Expr:
        if done == full:
            return Expr.const(0)
        result = None
        for v in scope.ready(done):
            cand = cmp.max(_sum(scope.live_terms(done, v)), best(done | (1 << v)))
            if result is None or not cmp.le(result, cand):
                result = cand
        return result

    opt = best(0)
    order, done = [], 0
    while done != full:
        choice = None
        for v in sorted(scope.ready(done), key=lambda i: ids[i]):
            cand = cmp.max(_sum(scope.live_terms(done, v)), best(done | (1 << v)))
            if cmp.le(cand, opt):
                choice = v
                break
        if choice is None:  # only reachable after an inexact probe decision
            choice = min(scope.ready(done), key=lambda i: ids[i])
        order.append(scope.nodes[choice])
        done |= 1 << choice
    return order


def order_exhaustive(g: Graph, nodes, sizes, cap: int = EXHAUSTIVE_CAP):
    """Minimal-peak order of ``nodes`` with known byte sizes.

    Returns ``(order, peak, method)``; beyond ``cap`` nodes the greedy
    heuristic is used instead.
    """
    nodes = list(nodes)
    sizes = _as_sizes(sizes)
    if len(nodes) > cap:
        order = order_heuristic(g, nodes, sizes)
        return order, _known_peak(g, nodes, order, sizes), "heuristic"
    scope = _Scope(g, nodes, sizes)
    order = _search(scope, _Cmp(()), nodes)
    return order, _known_peak(g, nodes, order, sizes), "exhaustive"


def _known_peak(g, nodes, order, sizes) -> int:
    return max((e.const_value() for e in step_profile(g, nodes, order, sizes)), default=0)


def order_symbolic(g: Graph, nodes, sizes, cap: int = EXHAUSTIVE_CAP):
    """Like :func:`order_exhaustive` for symbolic sizes.  The method is
    ``symbolic-compare`` when every comparison was decided by sign
    reasoning, otherwise ``heuristic``."""
    nodes = list(nodes)
    sizes = _as_sizes(sizes)
    symbols = set()
    for s in sizes.values():
        if s is not None:
            symbols |= s.symbols()
    if len(nodes) > cap:
        order = order_heuristic(g, nodes, sizes)
        return order, peak_of(g, nodes, order, sizes), "heuristic"
    scope = _Scope(g, nodes, sizes)
    cmp = _Cmp(sorted(symbols))
    order = _search(scope, cmp, nodes)
    return order, peak_of(g, nodes, order, sizes), ("symbolic-compare" if cmp.exact else "heuristic")


def order_heuristic(g: Graph, nodes, sizes, rollout_limit: int = ROLLOUT_LIMIT) -> list:
    """Greedy order.

    The base rule runs the ready node leaving the fewest live bytes behind.
    Up to ``rollout_limit`` nodes each ready candidate is instead scored by
    the peak of the schedule that the base rule completes from it.
    Symbolic sizes are compared at the probe assignment.
    """
    nodes = list(nodes)
    sizes = _as_sizes(sizes)
    symbols = set()
    for s in sizes.values():
        if s is not None:
            symbols |= s.symbols()
    probe = {s: PROBE_VALUE for s in symbols}
    concrete = {t: evaluate(e, probe) if e is not None else 0 for t, e in sizes.items()}
    scope = _Scope(g, nodes, concrete)
    full = (1 << len(nodes)) - 1

    def post(done, v):
        return sum(x or 0 for x in scope.post_terms(done, v))

    def during(done, v):
        return sum(x or 0 for x in scope.live_terms(done, v))

    def greedy_pick(done):
        return min(scope.ready(done), key=lambda i: (post(done, i), nodes[i]))

    def completion(done):
        peak = 0
        while done != full:
            v = greedy_pick(done)
            peak = max(peak, during(done, v))
            done |= 1 << v
        return peak

    rollout = len(nodes) <= rollout_limit
    done, order = 0, []
    while done != full:
        if rollout:
            v = min(scope.ready(done), key=lambda i: (
                max(during(done, i), completion(done | 1 << i)), post(done, i), nodes[i]))
        else:
            v = greedy_pick(done)
        order.append(nodes[v])
        done |= 1 << v
    return order


# ---------------------------------------------------------------------------
# plans
# ---------------------------------------------------------------------------


@dataclass
class SubgraphPlan:
    id: int
    nodes: tuple
    category: str
    order: list
    peak: Expr | None  # None = deferred to runtime
    method: str
    level: int = 0
    has_control: bool = False
    boundary: tuple = ()
    versions: int | None = None
    diagnostics: list = field(default_factory=list)

    def peak_at(self, env) -> int:
        return evaluate(self.peak, env)

    def to_dict(self) -> dict:
        d = {
            "id": self.id,
            "level": self.level,
            "category": self.category,
            "method": self.method,
            "order": list(self.order),
            "peak": None if self.peak is None else (
                self.peak.const_value() if self.peak.is_const() else render(self.peak)),
            "peak_deferred": self.peak is None,
            "boundary": list(self.boundary),
            "has_control": self.has_control,
        }
        if self.versions is not None:
            d["fusion_versions"] = self.versions
        if self.diagnostics:
            d["diagnostics"] = list(self.diagnostics)
        return d


@dataclass
class ExecPlan:
    subgraphs: list
    boundary_tensors: list
    order: list
    rdp: object = None

    def categories(self) -> dict:
        out = {ALL_KNOWN: 0, MIXED: 0, NAC_BOUNDED: 0}
        for s in self.subgraphs:
            out[s.category] += 1
        return out

    def to_dict(self) -> dict:
        return {
            "order": list(self.order),
            "boundary_tensors": list(self.boundary_tensors),
            "categories": self.categories(),
            "subgraphs": [s.to_dict() for s in self.subgraphs],
        }


def plan_subgraph(g: Graph, sg: Subgraph, sizes, cap: int = EXHAUSTIVE_CAP) -> SubgraphPlan:
    produced = [t for n in sg.nodes for t in g.node(n).outputs]
    deferred = any(sizes.get(t) is None for t in produced)
    symbolic = any(sizes.get(t) is not None and not sizes[t].is_const() for t in produced)
    if sg.boundary or deferred:
        category = NAC_BOUNDED
    elif symbolic:
        category = MIXED
    else:
        category = ALL_KNOWN
    diags = []
    if len(sg.nodes) > cap:
        diags.append(f"{len(sg.nodes)} nodes exceed exhaustive cap {cap}; greedy order used")
    if symbolic:
        order, peak, method = order_symbolic(g, sg.nodes, sizes, cap)
    else:
        order, peak, method = order_exhaustive(g, sg.nodes, sizes, cap)
        peak = Expr.const(peak)
    if deferred:
        # unknown sizes counted as zero: the order is only a guess
        method = "heuristic"
        diags.append("some tensor sizes are only known at run time; peak deferred")
    return SubgraphPlan(sg.id, sg.nodes, category, order, None if deferred else peak, method,
                        sg.level, sg.has_control, sg.boundary, None, diags)


def build_exec_plan(g: Graph, rdp, cap: int = EXHAUSTIVE_CAP, fusion=None) -> ExecPlan:
    sizes = tensor_sizes(g, rdp)
    plans = [plan_subgraph(g, sg, sizes, cap) for sg in partition(g, rdp)]
    if fusion is not None:
        for p in plans:
            members = set(p.nodes)
            counts = [grp.versions for grp in fusion.groups if set(grp.members) <= members]
            p.versions = max(counts, default=1)
    order = [n for p in plans for n in p.order]
    boundary = sorted({t for p in plans for n in p.boundary for t in g.node(n).outputs})
    return ExecPlan(plans, boundary, order, rdp)
