"""Operator fusion planning driven by RDP shape facts.

A producer/consumer pair is fused when the broadcast behaviour of every
elementwise-combined dimension is decided statically; each dimension that
is not decided doubles the number of code versions the fused kernel needs.
"""

from __future__ import annotations

import dataclasses
import heapq
from dataclasses import dataclass, field

from .graph import Graph, region_of, topo_sort
from .ops import DynClass
from .schedule import partition, tensor_sizes
from .symbolic import NAC, UNDEF, Expr, Known, render, render_dim

DEFAULT_VERSION_CAP = 4

EQUAL = "resolved-equal"
ONE = "resolved-one"
UNRESOLVED = "unresolved"

_FLOAT = {"f16", "f32", "f64"}
_BROADCAST_OPS = {"Add", "Sub", "Mul", "Div"}


@dataclass(frozen=True)
class Fusibility:
    status: str  # fusible | multi-version | infusible
    resolution: tuple = ()  # (producer dim, other dim, verdict) per combined dim
    versions: int = 1
    reason: str = ""

    def __str__(self):
        if self.status == "infusible":
            return f"infusible({self.reason})"
        if self.status == "multi-version":
            return f"multi-version({self.versions})"
        return "fusible"


@dataclass
class FusionGroup:
    members: list
    inputs: list
    outputs: list
    resolution: list  # dicts: producer, consumer, tensor, dims
    versions: int

    def unresolved(self) -> int:
        return sum(d[2] == UNRESOLVED for r in self.resolution for d in r["dims"])

    def to_dict(self) -> dict:
        return {
            "members": list(self.members),
            "inputs": list(self.inputs),
            "outputs": list(self.outputs),
            "versions": self.versions,
            "resolution": [
                {"producer": r["producer"], "consumer": r["consumer"], "tensor": r["tensor"],
                 "dims": [{"producer": render_dim(a), "other": render_dim(b), "verdict": v}
                          for a, b, v in r["dims"]]}
                for r in self.resolution
            ],
        }


@dataclass
class FusionPlan:
    groups: list
    singletons: list
    layers_before: int
    layers_after: int
    bytes_eliminated: Expr
    rejected: list = field(default_factory=list)  # (producer, consumer, reason)

    def member_groups(self) -> list:
        return [list(g.members) for g in self.groups]

    def to_dict(self) -> dict:
        saved = self.bytes_eliminated
        return {
            "groups": [g.to_dict() for g in self.groups],
            "singletons": list(self.singletons),
            "layers_before": self.layers_before,
            "layers_after": self.layers_after,
            "layer_reduction": 0.0 if not self.layers_before
            else 1 - self.layers_after / self.layers_before,
            "bytes_eliminated": saved.const_value() if saved.is_const() else render(saved),
            "rejected": [{"producer": p, "consumer": c, "reason": r} for p, c, r in self.rejected],
        }


def _kind(g: Graph, node) -> str:
    kind = node.spec.fuse_kind
    if kind == "elementwise" and not all(g.dtypes[t] in _FLOAT for t in node.outputs):
        return "none"  # integer elementwise ops compute shapes, not kernels
    return kind


def classify_dim(a, b) -> str:
    """Broadcast verdict for a producer dim ``a`` combined with ``b``."""
    if a == Known(1) or b == Known(1):
        return ONE
    if a in (NAC, UNDEF) or b in (NAC, UNDEF):
        return UNRESOLVED
    if a == b:
        return EQUAL
    return UNRESOLVED


def _resolution(g: Graph, producer, consumer, rdp) -> tuple:
    if consumer.op not in _BROADCAST_OPS:
        return ()
    shapes = rdp.shapes
    mine = [t for t in producer.outputs if t in consumer.inputs]
    out = []
    for t in mine:
        k = consumer.inputs.index(t)
        other = consumer.inputs[1 - k]
        a, b = shapes[t], shapes[other]
        if a in (UNDEF, NAC) or b in (UNDEF, NAC):
            return None
        rank = max(len(a), len(b))
        a = (Known(1),) * (rank - len(a)) + tuple(a)
        b = (Known(1),) * (rank - len(b)) + tuple(b)
        out.extend((x, y, classify_dim(x, y)) for x, y in zip(a, b))
    return tuple(out)


def fusibility(g: Graph, producer: str, consumer: str, rdp) -> Fusibility:
    p, c = g.node(producer), g.node(consumer)
    if not set(p.outputs) & set(c.inputs):
        return Fusibility("infusible", reason="producer does not feed consumer")
    for n in (p, c):
        if n.spec.dyn_class is DynClass.EDO or rdp.classes.get(n.id) is DynClass.EDO:
            return Fusibility("infusible", reason=f"{n.id} has execution-determined output")
    pk, ck = _kind(g, p), _kind(g, c)
    if pk not in ("elementwise", "heavy"):
        return Fusibility("infusible", reason=f"{p.id} ({p.op}) cannot lead into a fused consumer")
    if ck not in ("elementwise", "reduction"):
        return Fusibility("infusible", reason=f"{c.id} ({c.op}) cannot be fused as a consumer")
    res = _resolution(g, p, c, rdp)
    if res is None:
        return Fusibility("infusible", reason="operand rank unknown")
    versions = 2 ** sum(v == UNRESOLVED for _, _, v in res)
    status = "fusible" if versions == 1 else "multi-version"
    return Fusibility(status, res, versions)


def strip_facts(g: Graph, rdp):
    """RDP result without derived facts: every computed tensor keeps its
    rank but all of its dimensions become nac."""
    shapes = dict(rdp.shapes)
    for n in g.nodes:
        for t in n.outputs:
            e = shapes[t]
            if e not in (UNDEF, NAC):
                shapes[t] = (NAC,) * len(e)
    return dataclasses.replace(rdp, shapes=shapes)


def is_convex(g: Graph, members) -> bool:
    """True when no path leaves ``members`` and comes back."""
    inside = set(members)
    todo = [s for m in inside for s in g.succs(m) if s not in inside]
    seen = set()
    while todo:
        n = todo.pop()
        if n in seen:
            continue
        seen.add(n)
        for s in g.succs(n):
            if s in inside:
                return False
            todo.append(s)
    return True


def _group_io(g: Graph, members):
    inside = set(members)
    produced = {t for m in members for t in g.node(m).outputs}
    ins, outs = [], []
    for m in members:
        for t in g.node(m).inputs:
            if t not in produced and t not in ins:
                ins.append(t)
        for t in g.node(m).outputs:
            users = g.consumers.get(t, ())
            if t in g.outputs or any(u not in inside for u in users) or not users:
                outs.append(t)
    return ins, outs


def build_plan(g: Graph, rdp, cap: int = DEFAULT_VERSION_CAP, facts=None) -> FusionPlan:
    """Greedy fusion along topological order.

    A group starts at an unassigned elementwise or heavy node and absorbs
    the first eligible consumer (by topological position) of any member
    while the pair is fusible, the group stays convex, the version count
    stays within ``cap`` and no reduction has closed the group.  Groups
    never cross Switch/Combine regions or nac subgraph boundaries.
    ``facts`` is the RDP result used for broadcast resolution (defaults to
    ``rdp``; pass :func:`strip_facts` output to plan without derived facts).
    """
    facts = rdp if facts is None else facts
    topo = topo_sort(g)
    pos = {n: i for i, n in enumerate(topo)}
    sub_of = {n: sg.id for sg in partition(g, rdp) for n in sg.nodes}
    region = region_of(g)
    assigned: set = set()
    groups, rejected = [], []

    for start in topo:
        node = g.node(start)
        if start in assigned or _kind(g, node) not in ("elementwise", "heavy"):
            continue
        if node.spec.dyn_class is DynClass.EDO or start in rdp.nac_nodes:
            continue
        members, resolution, unresolved = [start], [], 0
        closed = False
        while not closed:
            cands = sorted({c for m in members for c in g.succs(m)
                            if c not in members and c not in assigned}, key=pos.__getitem__)
            grown = False
            for c in cands:
                cnode = g.node(c)
                if _kind(g, cnode) == "heavy" or c in rdp.nac_nodes:
                    continue
                if sub_of[c] != sub_of[start] or region[c] != region[start]:
                    continue
                feeders = [m for m in members if set(g.node(m).outputs) & set(cnode.inputs)]
                verdicts = [(m, fusibility(g, m, c, facts)) for m in feeders]
                bad = [(m, f) for m, f in verdicts if f.status == "infusible"]
                if bad:
                    rejected.append((bad[0][0], c, bad[0][1].reason))
                    continue
                extra = sum(v == UNRESOLVED for _, f in verdicts for _, _, v in f.resolution)
                if 2 ** (unresolved + extra) > cap:
                    rejected.append((feeders[0], c, f"needs {2 ** (unresolved + extra)} versions"))
                    continue
                if not is_convex(g, members + [c]):
                    rejected.append((feeders[0], c, "group would not be convex"))
                    continue
                members.append(c)
                unresolved += extra
                for m, f in verdicts:
                    if f.resolution:
                        tensor = next(t for t in g.node(m).outputs if t in cnode.inputs)
                        resolution.append({"producer": m, "consumer": c, "tensor": tensor,
                                           "dims": list(f.resolution)})
                closed = _kind(g, cnode) == "reduction"
                grown = True
                break
            if not grown:
                break
        if len(members) > 1:
            members.sort(key=pos.__getitem__)
            ins, outs = _group_io(g, members)
            groups.append(FusionGroup(members, ins, outs, resolution, 2 ** unresolved))
            assigned.update(members)

    singletons = [n for n in topo if n not in assigned]
    sizes = tensor_sizes(g, rdp)
    saved = Expr.const(0)
    for grp in groups:
        for m in grp.members:
            for t in g.node(m).outputs:
                if t not in grp.outputs and sizes.get(t) is not None:
                    saved = saved + sizes[t]
    after = len(singletons) + len(groups)
    return FusionPlan(groups, singletons, len(g.nodes), after, saved, rejected)


def fused_order(g: Graph, plan: FusionPlan, order=None) -> list:
    """A topological node order in which every group is contiguous.

    Groups are convex, so contracting each to one vertex leaves a DAG; the
    contracted graph is ordered stably with respect to ``order``.
    """
    order = list(order) if order is not None else topo_sort(g)
    rank = {n: i for i, n in enumerate(order)}
    unit = {n: n for n in order}
    for grp in plan.groups:
        for m in grp.members:
            unit[m] = grp.members[0]
    members: dict = {}
    for n in order:
        members.setdefault(unit[n], []).append(n)
    indeg = {u: 0 for u in members}
    succs = {u: set() for u in members}
    for n in order:
        for s in g.succs(n):
            a, b = unit[n], unit[s]
            if a != b and b not in succs[a]:
                succs[a].add(b)
                indeg[b] += 1

    heap = [(rank[members[u][0]], u) for u, d in indeg.items() if d == 0]
    heapq.heapify(heap)
    out = []
    while heap:
        _, u = heapq.heappop(heap)
        out.extend(members[u])
        for s in succs[u]:
            indeg[s] -= 1
            if indeg[s] == 0:
                heapq.heappush(heap, (rank[members[s][0]], s))
    if len(out) != len(order):
        raise ValueError("fusion groups are not convex")
    return out
