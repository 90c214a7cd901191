"""Extended computational graph: tensors, nodes, JSON I/O and traversal.

The graph is a DAG whose control flow is expressed with ``Switch`` /
``Combine`` pairs.  A Switch takes ``[data, predicate]`` and has one output
gate per branch; the matching Combine takes one input per branch, listed in
branch order.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field
from pathlib import Path

from . import ops
from .symbolic import (
    NAC,
    UNDEF,
    Known,
    Sign,
    Sym,
    SymbolicError,
    compare_sign,
    parse_dim,
    render,
)

DTYPE_SIZES = {"f32": 4, "f16": 2, "i64": 8, "i32": 4, "bool": 1}
ATTR_KINDS = ("int", "ints", "str")


class GraphError(ValueError):
    """Malformed graph file.  ``kind`` is one of parse, cycle, duplicate,
    symbol, schema, control."""

    def __init__(self, kind: str, message: str):
        self.kind = kind
        super().__init__(f"{kind}: {message}")


@dataclass(frozen=True)
class TensorDecl:
    name: str
    dtype: str
    shape: tuple
    int_data: tuple | None = None
    constant: bool = False

    @property
    def elem_size(self) -> int:
        return DTYPE_SIZES[self.dtype]


@dataclass(frozen=True)
class Node:
    id: str
    op: str
    inputs: tuple
    outputs: tuple
    attrs: dict = field(default_factory=dict, hash=False, compare=False)
    opaque: bool = False

    @property
    def spec(self) -> ops.OpSpec:
        return ops.lookup(self.op, self.opaque)


@dataclass(frozen=True)
class ControlRegion:
    switch: str
    combine: str | None
    branches: tuple  # one frozenset of node ids per gate

    @property
    def nodes(self) -> frozenset:
        out = {self.switch}
        for b in self.branches:
            out |= b
        if self.combine:
            out.add(self.combine)
        return frozenset(out)


class Graph:
    def __init__(self, name, symbols, inputs, constants, nodes, outputs):
        self.name = name
        self.symbols = tuple(symbols)
        self.inputs = list(inputs)
        self.constants = list(constants)
        self.nodes = list(nodes)
        self.outputs = tuple(outputs)
        self.node_by_id = {n.id: n for n in self.nodes}
        self.index = {n.id: i for i, n in enumerate(self.nodes)}
        self.decls = {t.name: t for t in self.inputs + self.constants}
        self.producer: dict = {}
        self.consumers: dict = {}
        for n in self.nodes:
            for t in n.outputs:
                self.producer[t] = n.id
            for t in n.inputs:
                self.consumers.setdefault(t, []).append(n.id)
        self.dtypes: dict = {t.name: t.dtype for t in self.inputs + self.constants}
        self._topo = None
        self._regions = None

    # -- structure ------------------------------------------------------

    def node(self, node_id: str) -> Node:
        return self.node_by_id[node_id]

    def tensors(self) -> list:
        names = [t.name for t in self.inputs + self.constants]
        for n in self.nodes:
            names.extend(n.outputs)
        return names

    def is_constant(self, tensor: str) -> bool:
        d = self.decls.get(tensor)
        return d is not None and d.constant

    def payload(self, tensor: str):
        d = self.decls.get(tensor)
        return d.int_data if d is not None and d.constant else None

    def const_env(self) -> dict:
        return {t.name: t.int_data is not None for t in self.constants}

    def preds(self, node_id: str) -> list:
        seen, out = set(), []
        for t in self.node(node_id).inputs:
            p = self.producer.get(t)
            if p is not None and p not in seen:
                seen.add(p)
                out.append(p)
        return out

    def succs(self, node_id: str) -> list:
        seen, out = set(), []
        for t in self.node(node_id).outputs:
            for c in self.consumers.get(t, ()):
                if c not in seen:
                    seen.add(c)
                    out.append(c)
        return sorted(out, key=self.index.__getitem__)

    def elem_size(self, tensor: str) -> int:
        return DTYPE_SIZES[self.dtypes[tensor]]

    def topo_order(self) -> list:
        if self._topo is None:
            self._topo = topo_sort(self)
        return list(self._topo)

    def regions(self) -> list:
        if self._regions is None:
            self._regions, _ = _analyze_control(self)
        return list(self._regions)

    def __repr__(self):
        return f"Graph({self.name!r}, {len(self.nodes)} nodes)"


# ---------------------------------------------------------------------------
# traversal
# ---------------------------------------------------------------------------


def _indegrees(g: Graph) -> dict:
    return {n.id: len(g.preds(n.id)) for n in g.nodes}


def topo_sort(g: Graph, rng: random.Random | None = None) -> list:
    """Depth-first topological order of node ids.

    Ties go to the earliest listed node; with ``rng`` the ready set is
    shuffled instead, which yields an arbitrary valid order.
    """
    indeg = _indegrees(g)
    ready = [n.id for n in g.nodes if indeg[n.id] == 0]
    if rng is not None:
        rng.shuffle(ready)
    stack = list(reversed(ready))
    order = []
    while stack:
        nid = stack.pop()
        order.append(nid)
        newly = []
        for s in g.succs(nid):
            indeg[s] -= 1
            if indeg[s] == 0:
                newly.append(s)
        if rng is not None:
            rng.shuffle(newly)
        stack.extend(reversed(newly))
    if len(order) != len(g.nodes):
        raise GraphError("cycle", "graph contains a cycle")
    return order


def is_topological(g: Graph, order) -> bool:
    pos = {nid: i for i, nid in enumerate(order)}
    if len(pos) != len(order) or set(pos) != set(g.node_by_id):
        return False
    return all(pos[p] < pos[n.id] for n in g.nodes for p in g.preds(n.id))


def reachable(g: Graph, start, stop=frozenset()) -> set:
    """Node ids reachable from the ``start`` node ids (inclusive), never
    entering nodes in ``stop``."""
    seen = set()
    todo = [s for s in start if s not in stop]
    while todo:
        n = todo.pop()
        if n in seen:
            continue
        seen.add(n)
        todo.extend(s for s in g.succs(n) if s not in stop and s not in seen)
    return seen


# ---------------------------------------------------------------------------
# Switch / Combine structure
# ---------------------------------------------------------------------------


def _analyze_control(g: Graph):
    regions, diags = [], []
    topo = topo_sort(g)
    pos = {nid: i for i, nid in enumerate(topo)}
    for sw in (n for n in g.nodes if n.op == "Switch"):
        gates = sw.outputs
        entries = [list(g.consumers.get(t, ())) for t in gates]
        for i, e in enumerate(entries):
            if not e:
                diags.append(f"switch {sw.id}: gate {gates[i]} has no consumer")
        reach = [reachable(g, e) for e in entries]
        common = set.intersection(*reach) if reach else set()
        combines = sorted(
            (c for c in common if g.node(c).op == "Combine"), key=pos.__getitem__
        )
        if not combines:
            diags.append(f"switch {sw.id}: branches never reconverge at a Combine")
            regions.append(ControlRegion(sw.id, None, tuple(frozenset(r) for r in reach)))
            continue
        comb = combines[0]
        branches = [frozenset(reachable(g, e, stop={comb})) for e in entries]
        regions.append(ControlRegion(sw.id, comb, tuple(branches)))
        if len(g.node(comb).inputs) != len(gates):
            diags.append(
                f"switch {sw.id}: combine {comb} has {len(g.node(comb).inputs)} inputs "
                f"for {len(gates)} branches"
            )
        for i in range(len(branches)):
            for j in range(i + 1, len(branches)):
                both = branches[i] & branches[j]
                if both:
                    diags.append(
                        f"switch {sw.id}: branches {i} and {j} share nodes {sorted(both)}"
                    )
        for i, br in enumerate(branches):
            for nid in sorted(br, key=pos.__getitem__):
                for t in g.node(nid).outputs:
                    if t in g.outputs:
                        diags.append(
                            f"switch {sw.id}: branch {i} escapes to graph output {t} "
                            f"without Combine"
                        )
                    for c in g.consumers.get(t, ()):
                        if c != comb and c not in br:
                            diags.append(
                                f"switch {sw.id}: branch {i} tensor {t} escapes to {c}"
                            )
            if gates[i] in g.outputs:
                diags.append(f"switch {sw.id}: gate {gates[i]} is a graph output")
        # Combine input k must come from branch k (or gate k directly)
        for k, t in enumerate(g.node(comb).inputs):
            src = g.producer.get(t)
            if k >= len(branches):
                break
            if not (t == gates[k] or src in branches[k]):
                diags.append(
                    f"switch {sw.id}: combine {comb} input {k} ({t}) is not produced "
                    f"by branch {k}"
                )
    matched = {r.combine for r in regions if r.combine}
    for n in g.nodes:
        if n.op == "Combine" and n.id not in matched:
            diags.append(f"combine {n.id} is not matched by any Switch")
    return regions, diags


def validate_switch_combine(g: Graph) -> list:
    """Structural diagnostics for Switch/Combine usage (empty when valid)."""
    return _analyze_control(g)[1]


def region_of(g: Graph) -> dict:
    """Node id -> tuple of (switch id, branch index) pairs, outermost first."""
    out = {n.id: () for n in g.nodes}
    regs = g.regions()
    # outer regions contain inner ones, so sorting by size puts outer first
    for r in sorted(regs, key=lambda r: -len(r.nodes)):
        for i, br in enumerate(r.branches):
            for nid in br:
                out[nid] = out[nid] + ((r.switch, i),)
    return out


# ---------------------------------------------------------------------------
# JSON I/O
# ---------------------------------------------------------------------------


def _need(obj, key, kind, where):
    if key not in obj:
        raise GraphError("parse", f"{where}: missing key {key!r}")
    v = obj[key]
    if not isinstance(v, kind):
        raise GraphError("parse", f"{where}: {key!r} has wrong type")
    return v


def _parse_shape(raw, symbols, where, allow_undef):
    if not isinstance(raw, list):
        raise GraphError("parse", f"{where}: shape must be a list")
    dims = []
    for x in raw:
        if isinstance(x, bool) or not isinstance(x, (int, str)):
            raise GraphError("parse", f"{where}: bad dimension {x!r}")
        try:
            d = parse_dim(x)
        except SymbolicError as exc:
            raise GraphError("parse", f"{where}: {exc}") from exc
        if d == UNDEF and not allow_undef:
            raise GraphError("parse", f"{where}: '?' not allowed here")
        if d == NAC:
            raise GraphError("parse", f"{where}: nac is not a declarable dimension")
        if isinstance(d, Known) and d.value < 1:
            raise GraphError("schema", f"{where}: dimension {d.value} must be >= 1")
        if isinstance(d, Sym):
            unknown = d.expr.symbols() - set(symbols)
            if unknown:
                raise GraphError("symbol", f"{where}: undeclared symbol(s) {sorted(unknown)}")
            if compare_sign(d.expr - 1) is not Sign.NONNEG:
                raise GraphError("schema", f"{where}: dimension {x!r} may be < 1")
        dims.append(d)
    return tuple(dims)


def _check_attrs(node_id, spec, attrs):
    if not isinstance(attrs, dict):
        raise GraphError("parse", f"node {node_id}: attrs must be an object")
    for k, v in attrs.items():
        if spec.attrs is not None and k not in spec.attrs:
            raise GraphError("schema", f"node {node_id}: unknown attribute {k!r} for {spec.name}")
        kind = spec.attrs.get(k) if spec.attrs is not None else None
        ok = (
            (isinstance(v, int) and not isinstance(v, bool))
            or isinstance(v, str)
            or (isinstance(v, list) and all(isinstance(x, (int, str)) and not isinstance(x, bool) for x in v))
        )
        if kind == "int":
            ok = isinstance(v, int) and not isinstance(v, bool)
        elif kind == "ints":
            ok = isinstance(v, list) and all(isinstance(x, int) and not isinstance(x, bool) for x in v)
        elif kind == "str":
            ok = isinstance(v, str)
        if not ok:
            raise GraphError("schema", f"node {node_id}: attribute {k!r} has wrong type")


def parse_graph(obj, check_control: bool = True) -> Graph:
    if not isinstance(obj, dict):
        raise GraphError("parse", "graph must be a JSON object")
    name = _need(obj, "name", str, "graph")
    symbols = _need(obj, "symbols", list, "graph")
    if len(set(symbols)) != len(symbols) or not all(isinstance(s, str) for s in symbols):
        raise GraphError("symbol", "symbols must be unique strings")
    for s in symbols:
        if s.startswith("$") or not s.isidentifier():
            raise GraphError("symbol", f"invalid symbol name {s!r}")

    producers: dict = {}

    def claim(t, who):
        if not isinstance(t, str) or not t:
            raise GraphError("parse", f"{who}: tensor names must be non-empty strings")
        if t in producers:
            raise GraphError("duplicate", f"tensor {t!r} produced by {producers[t]} and {who}")
        producers[t] = who

    inputs = []
    for i, raw in enumerate(_need(obj, "inputs", list, "graph")):
        where = f"input {i}"
        tname = _need(raw, "name", str, where)
        dtype = _need(raw, "dtype", str, where)
        if dtype not in DTYPE_SIZES:
            raise GraphError("schema", f"{where}: unknown dtype {dtype!r}")
        shape = _parse_shape(_need(raw, "shape", list, where), symbols, f"input {tname}", True)
        claim(tname, "graph input")
        inputs.append(TensorDecl(tname, dtype, shape))

    constants = []
    for i, raw in enumerate(obj.get("constants", [])):
        where = f"constant {i}"
        tname = _need(raw, "name", str, where)
        dtype = _need(raw, "dtype", str, where)
        if dtype not in DTYPE_SIZES:
            raise GraphError("schema", f"{where}: unknown dtype {dtype!r}")
        shape_raw = _need(raw, "shape", list, where)
        if not all(isinstance(x, int) and not isinstance(x, bool) for x in shape_raw):
            raise GraphError("parse", f"constant {tname}: shape must be integers")
        shape = _parse_shape(shape_raw, symbols, f"constant {tname}", False)
        data = raw.get("int_data")
        if data is not None:
            if dtype not in ops.INT_DTYPES:
                raise GraphError("schema", f"constant {tname}: int_data needs an integer dtype")
            if not all(isinstance(x, int) and not isinstance(x, bool) for x in data):
                raise GraphError("parse", f"constant {tname}: int_data must be integers")
            count = 1
            for d in shape:
                count *= d.value
            if len(shape) > 1 or count != len(data):
                raise GraphError("schema", f"constant {tname}: int_data must match a rank<=1 shape")
            data = tuple(data)
        claim(tname, "constant")
        constants.append(TensorDecl(tname, dtype, shape, data, True))

    nodes = []
    ids = set()
    for i, raw in enumerate(_need(obj, "nodes", list, "graph")):
        where = f"node {i}"
        nid = _need(raw, "id", str, where)
        if nid in ids or not nid:
            raise GraphError("duplicate", f"duplicate or empty node id {nid!r}")
        ids.add(nid)
        op = _need(raw, "op", str, where)
        ins = _need(raw, "inputs", list, where)
        outs = _need(raw, "outputs", list, where)
        opaque = bool(raw.get("opaque", False))
        try:
            spec = ops.lookup(op, opaque)
        except KeyError:
            raise GraphError("schema", f"node {nid}: unknown op {op!r} (mark it opaque)") from None
        if not spec.arity_ok(len(ins), len(outs)):
            raise GraphError("schema", f"node {nid}: bad arity {len(ins)}->{len(outs)} for {op}")
        attrs = raw.get("attrs", {})
        _check_attrs(nid, spec, attrs)
        for t in outs:
            claim(t, f"node {nid}")
        nodes.append(Node(nid, op, tuple(ins), tuple(outs), dict(attrs), opaque))

    outputs = _need(obj, "outputs", list, "graph")
    for n in nodes:
        for t in n.inputs:
            if t not in producers:
                raise GraphError("parse", f"node {n.id}: undefined tensor {t!r}")
    for t in outputs:
        if t not in producers:
            raise GraphError("parse", f"undefined graph output {t!r}")

    g = Graph(name, symbols, inputs, constants, nodes, outputs)
    topo = topo_sort(g)  # raises on cycles
    _infer_dtypes(g, topo)
    if check_control:
        diags = validate_switch_combine(g)
        if diags:
            raise GraphError("control", "; ".join(diags))
    return g


def _infer_dtypes(g: Graph, topo):
    for nid in topo:
        n = g.node(nid)
        dts = n.spec.out_dtypes(n, [g.dtypes[t] for t in n.inputs])
        for t, dt in zip(n.outputs, dts):
            if dt not in DTYPE_SIZES:
                raise GraphError("schema", f"node {nid}: unknown dtype {dt!r}")
            g.dtypes[t] = dt


def load_graph(path, check_control: bool = True) -> Graph:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise GraphError("parse", f"cannot read {path}: {exc}") from exc
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise GraphError("parse", f"{path}: {exc}") from exc
    return parse_graph(obj, check_control)


def _dim_json(d):
    if isinstance(d, Known):
        return d.value
    if d == UNDEF:
        return "?"
    return render(d.expr)


def to_dict(g: Graph) -> dict:
    def node(n):
        d = {"id": n.id, "op": n.op, "inputs": list(n.inputs), "outputs": list(n.outputs),
             "attrs": dict(sorted(n.attrs.items()))}
        if n.opaque:
            d["opaque"] = True
        return d

    def const(t):
        d = {"name": t.name, "dtype": t.dtype, "shape": [x.value for x in t.shape]}
        if t.int_data is not None:
            d["int_data"] = list(t.int_data)
        return d

    return {
        "name": g.name,
        "symbols": list(g.symbols),
        "inputs": [{"name": t.name, "dtype": t.dtype, "shape": [_dim_json(x) for x in t.shape]}
                   for t in g.inputs],
        "constants": [const(t) for t in g.constants],
        "nodes": [node(n) for n in g.nodes],
        "outputs": list(g.outputs),
    }


def dumps(g: Graph) -> str:
    return json.dumps(to_dict(g), indent=2) + "\n"
