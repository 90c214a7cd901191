"""Concrete shape/value interpreter used as ground truth.

Only shapes and small integer tensors are computed; floating point contents
never exist.  Outcomes that depend on tensor data (NonZero counts, a TopK
``k`` computed from float data, opaque operator shapes, Switch predicates)
come from the environment or from a generator seeded per node, so a run is
fully determined by the environment.
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass, field

from .graph import DTYPE_SIZES, Graph, topo_sort
from .symbolic import UNDEF, Known, Sym, evaluate

INT = ("i64", "i32")
TRACK_LIMIT = 4096
SLICE_INF = 2**31 - 1


class RuntimeShapeError(RuntimeError):
    def __init__(self, node_id, message):
        self.node_id = node_id
        super().__init__(f"node {node_id}: {message}")


@dataclass
class ConcreteEnv:
    symbols: dict = field(default_factory=dict)
    values: dict = field(default_factory=dict)  # integer graph inputs
    branches: dict = field(default_factory=dict)  # switch id -> branch index
    outcomes: dict = field(default_factory=dict)  # node id -> int or list of ints
    input_shapes: dict = field(default_factory=dict)  # fills '?' dims
    seed: int = 0

    def rng(self, node_id) -> random.Random:
        return random.Random(f"{self.seed}:{node_id}")


@dataclass
class Trace:
    order: list  # executed units (node ids, or tuples of ids for fused groups)
    shapes: dict
    values: dict
    dtypes: dict
    branches: dict
    step_of: dict  # node id -> 1-based step
    live_bytes: list
    peak: int
    lifetimes: list  # (tensor, size, birth, death)
    skipped: list

    def executed(self) -> list:
        out = []
        for u in self.order:
            out.extend(u if isinstance(u, tuple) else (u,))
        return out

    def size(self, tensor) -> int:
        return numel(self.shapes[tensor]) * DTYPE_SIZES[self.dtypes[tensor]]


def numel(shape) -> int:
    return math.prod(shape)


# ---------------------------------------------------------------------------
# concrete operator semantics
# ---------------------------------------------------------------------------


def _axis(nid, axis, rank):
    a = axis + rank if axis < 0 else axis
    if not 0 <= a < max(rank, 1):
        raise RuntimeShapeError(nid, f"axis {axis} out of range")
    return a


def _bcast(nid, a, b, allow=True):
    if not allow:
        if tuple(a) != tuple(b):
            raise RuntimeShapeError(nid, f"shapes {a} and {b} differ (broadcast disabled)")
        return tuple(a)
    r = max(len(a), len(b))
    pa = (1,) * (r - len(a)) + tuple(a)
    pb = (1,) * (r - len(b)) + tuple(b)
    out = []
    for x, y in zip(pa, pb):
        if x != y and 1 not in (x, y):
            raise RuntimeShapeError(nid, f"cannot broadcast {a} with {b}")
        out.append(max(x, y) if 1 in (x, y) else x)
    return tuple(out)


def _elementwise(nid, fn, a, b):
    if a is None or b is None:
        return None
    n = max(len(a), len(b))
    if len(a) not in (1, n) or len(b) not in (1, n):
        return None
    out = []
    for i in range(n):
        x = a[i if len(a) > 1 else 0]
        y = b[i if len(b) > 1 else 0]
        v = fn(x, y)
        if v is None:
            return None
        out.append(v)
    return out


_BIN = {
    "Add": lambda x, y: x + y,
    "Sub": lambda x, y: x - y,
    "Mul": lambda x, y: x * y,
    "Div": lambda x, y: None if y == 0 else x // y,
}


def _need_value(nid, v, what):
    if v is None:
        raise RuntimeShapeError(nid, f"{what} is not a computable integer tensor")
    return v


def _conv_out(nid, dims, kernel, pads, strides):
    n = len(kernel)
    out = []
    for i in range(n):
        span = dims[i] + pads[i] + pads[i + n] - kernel[i]
        if span < 0:
            raise RuntimeShapeError(nid, "kernel larger than padded input")
        out.append(span // strides[i] + 1)
    return out


def _draw_dims(env, nid, rank, lo=1, hi=8):
    got = env.outcomes.get(nid)
    if isinstance(got, (list, tuple)):
        return list(got)
    rng = env.rng(nid)
    return [rng.randint(lo, hi) for _ in range(rank)]


def run_node(node, shapes, values, dtypes, env):
    """Concrete outputs ``(shapes, values)`` of one node."""
    nid, op, a = node.id, node.op, node.attrs
    S = [shapes[t] for t in node.inputs]
    V = [values.get(t) for t in node.inputs]
    nout = len(node.outputs)

    if op == "Shape":
        return [(len(S[0]),)], [list(S[0])]
    if op == "ConstantOfShape":
        dims = _need_value(nid, V[0], "shape input")
        if any(d < 0 for d in dims):
            raise RuntimeShapeError(nid, "negative extent")
        fill = a.get("value", 0)
        return [tuple(dims)], [[fill] * numel(dims)]
    if op == "EyeLike":
        if len(S[0]) != 2:
            raise RuntimeShapeError(nid, "EyeLike needs rank 2")
        return [S[0]], [None]
    if op in _BIN:
        out = _bcast(nid, S[0], S[1], bool(a.get("broadcast", 1)))
        return [out], [_elementwise(nid, _BIN[op], V[0], V[1])]
    if op in ("Relu", "Sigmoid", "Round", "Softmax"):
        if op == "Softmax":
            _axis(nid, a.get("axis", -1), len(S[0]))
        return [S[0]], [None]
    if op == "Cast":
        src_int = dtypes[node.inputs[0]] in INT
        return [S[0]], [V[0] if src_int else None]
    if op == "Transpose":
        perm = a.get("perm") or list(range(len(S[0])))[::-1]
        if sorted(perm) != list(range(len(S[0]))):
            raise RuntimeShapeError(nid, "bad perm")
        return [tuple(S[0][p] for p in perm)], [None]
    if op == "Unsqueeze":
        axes = a.get("axes", [0])
        r = len(S[0]) + len(axes)
        dims = list(S[0])
        for ax in sorted(_axis(nid, x, r) for x in axes):
            dims.insert(ax, 1)
        return [tuple(dims)], [V[0]]
    if op == "Squeeze":
        axes = a.get("axes")
        if axes is None:
            axes = [i for i, d in enumerate(S[0]) if d == 1]
        axes = {_axis(nid, x, len(S[0])) for x in axes}
        if any(S[0][i] != 1 for i in axes):
            raise RuntimeShapeError(nid, "squeezed extent is not 1")
        return [tuple(d for i, d in enumerate(S[0]) if i not in axes)], [V[0]]
    if op == "Concat":
        r = len(S[0])
        if any(len(s) != r for s in S):
            raise RuntimeShapeError(nid, "concat rank mismatch")
        ax = _axis(nid, a.get("axis", 0), r)
        for i in range(r):
            if i != ax and len({s[i] for s in S}) != 1:
                raise RuntimeShapeError(nid, f"concat extents differ on axis {i}")
        out = list(S[0])
        out[ax] = sum(s[ax] for s in S)
        val = None if any(v is None for v in V) else [x for v in V for x in v]
        return [tuple(out)], [val]
    if op == "Conv":
        x, w = S[0], S[1]
        if len(x) < 3 or len(w) != len(x):
            raise RuntimeShapeError(nid, "conv rank mismatch")
        n = len(x) - 2
        pads = a.get("pads") or [0] * (2 * n)
        strides = a.get("strides") or [1] * n
        group = a.get("group", 1)
        if x[1] != w[1] * group:
            raise RuntimeShapeError(nid, f"channels {x[1]} vs {w[1]}*{group}")
        if len(S) > 2 and tuple(S[2]) != (w[0],):
            raise RuntimeShapeError(nid, "bias shape mismatch")
        return [(x[0], w[0], *_conv_out(nid, x[2:], w[2:], pads, strides))], [None]
    if op in ("MaxPool", "AveragePool"):
        x = S[0]
        k = a.get("kernel_shape") or []
        if len(x) != len(k) + 2:
            raise RuntimeShapeError(nid, "pool rank mismatch")
        pads = a.get("pads") or [0] * (2 * len(k))
        strides = a.get("strides") or [1] * len(k)
        return [(x[0], x[1], *_conv_out(nid, x[2:], k, pads, strides))], [None]
    if op == "MatMul":
        x, y = S
        if len(x) < 2 or len(y) < 2 or x[-1] != y[-2]:
            raise RuntimeShapeError(nid, f"matmul {x} x {y}")
        batch = _bcast(nid, x[:-2], y[:-2])
        return [tuple(batch) + (x[-2], y[-1])], [None]
    if op == "Gather":
        data, idx = S
        ax = _axis(nid, a.get("axis", 0), len(data))
        out = tuple(data[:ax]) + tuple(idx) + tuple(data[ax + 1:])
        val = None
        if V[1] is not None:
            for i in V[1]:
                if not -data[ax] <= i < data[ax]:
                    raise RuntimeShapeError(nid, f"gather index {i} out of range")
            if V[0] is not None and len(data) == 1:
                val = [V[0][i] for i in V[1]]
        return [out], [val]
    if op in ("ReduceSum", "ReduceMean", "ReduceMax"):
        x = S[0]
        axes = a.get("axes")
        axes = set(range(len(x))) if axes is None else {_axis(nid, i, len(x)) for i in axes}
        keep = a.get("keepdims", 1)
        out = []
        for i, d in enumerate(x):
            if i in axes:
                if keep:
                    out.append(1)
            else:
                out.append(d)
        return [tuple(out)], [None]
    if op == "Reshape":
        target = list(_need_value(nid, V[1], "reshape target"))
        x = S[0]
        out, wild = [], None
        for i, t in enumerate(target):
            if t == 0:
                if i >= len(x):
                    raise RuntimeShapeError(nid, "reshape 0 beyond input rank")
                out.append(x[i])
            elif t == -1:
                if wild is not None:
                    raise RuntimeShapeError(nid, "two -1 entries")
                wild = i
                out.append(1)
            elif t < -1:
                raise RuntimeShapeError(nid, f"invalid reshape entry {t}")
            else:
                out.append(t)
        total = numel(x)
        if wild is not None:
            rest = numel(out)
            if rest == 0 or total % rest:
                raise RuntimeShapeError(nid, f"cannot infer -1 for {total} elements")
            out[wild] = total // rest
        if numel(out) != total:
            raise RuntimeShapeError(nid, f"reshape {x} -> {out} changes element count")
        return [tuple(out)], [V[0]]
    if op == "Slice":
        x = S[0]
        starts = _need_value(nid, V[1], "slice starts")
        ends = _need_value(nid, V[2], "slice ends")
        axes = V[3] if len(V) > 3 else list(range(len(starts)))
        steps = V[4] if len(V) > 4 else [1] * len(starts)
        axes = _need_value(nid, axes, "slice axes")
        steps = _need_value(nid, steps, "slice steps")
        out = list(x)
        val = V[0]
        for s, e, ax, st in zip(starts, ends, axes, steps):
            ax = _axis(nid, ax, len(x))
            if st == 0:
                raise RuntimeShapeError(nid, "slice step 0")
            sl = slice(s, e, st)
            out[ax] = len(range(x[ax])[sl])
            if val is not None and len(x) == 1:
                val = list(val[sl])
        if len(starts) != 1 or len(x) != 1:
            val = None
        return [tuple(out)], [val]
    if op == "Expand":
        target = _need_value(nid, V[1], "expand shape")
        return [_bcast(nid, S[0], tuple(target))], [None]
    if op == "Range":
        s, l, d = (_need_value(nid, v, "range operand") for v in V)
        if d[0] == 0:
            raise RuntimeShapeError(nid, "range delta 0")
        vals = list(range(s[0], l[0], d[0]))
        return [(len(vals),)], [vals]
    if op == "Resize":
        sizes = _need_value(nid, V[1], "resize sizes")
        if len(sizes) != len(S[0]):
            raise RuntimeShapeError(nid, "resize rank mismatch")
        return [tuple(sizes)], [None]
    if op == "Upsample":
        scales = _need_value(nid, V[1], "upsample scales")
        if len(scales) != len(S[0]):
            raise RuntimeShapeError(nid, "upsample rank mismatch")
        return [tuple(d * s for d, s in zip(S[0], scales))], [None]
    if op == "TopK":
        x = S[0]
        ax = _axis(nid, a.get("axis", -1), len(x))
        if V[1] is not None:
            k = V[1][0]
        elif nid in env.outcomes:
            k = env.outcomes[nid]
        else:
            k = env.rng(nid).randint(1, x[ax])
        if not 0 <= k <= x[ax]:
            raise RuntimeShapeError(nid, f"topk k={k} exceeds extent {x[ax]}")
        out = tuple(k if i == ax else d for i, d in enumerate(x))
        return [out, out], [None, None]
    if op == "NonZero":
        x = S[0]
        if nid in env.outcomes:
            count = env.outcomes[nid]
        else:
            count = env.rng(nid).randint(1, max(1, min(numel(x), 64)))
        return [(len(x), count)], [None]
    if op == "NonMaxSuppression":
        count = env.outcomes.get(nid, env.rng(nid).randint(1, 8))
        return [(count, 3)], [None]
    if op == "Switch":
        return [S[0]] * nout, [V[0]] * nout
    # Loop, If and opaque operators
    ranks = a.get("ranks") or [1] * nout
    got = env.outcomes.get(nid)
    out = []
    for k, r in enumerate(ranks):
        if isinstance(got, (list, tuple)) and got and isinstance(got[0], (list, tuple)):
            out.append(tuple(got[k]))
        else:
            rng = random.Random(f"{env.seed}:{nid}:{k}")
            out.append(tuple(rng.randint(1, 8) for _ in range(r)))
    return out, [None] * nout


def _branch_choice(node, values, env):
    B = len(node.outputs)
    if node.id in env.branches:
        b = env.branches[node.id]
    else:
        b = env.rng(node.id).randrange(B)
    if not 0 <= b < B:
        raise RuntimeShapeError(node.id, f"branch {b} out of range")
    return b


# ---------------------------------------------------------------------------
# driver
# ---------------------------------------------------------------------------


def _input_shape(g, decl, env):
    if decl.name in env.input_shapes:
        shape = tuple(env.input_shapes[decl.name])
        if len(shape) != len(decl.shape):
            raise RuntimeShapeError("<input>", f"{decl.name}: rank mismatch")
        for have, want in zip(shape, decl.shape):
            if want != UNDEF and evaluate_dim(want, env.symbols) != have:
                raise RuntimeShapeError("<input>", f"{decl.name}: {shape} contradicts declaration")
        return shape
    out = []
    for d in decl.shape:
        if d == UNDEF:
            raise RuntimeShapeError("<input>", f"{decl.name}: '?' dimension needs input_shapes")
        out.append(evaluate_dim(d, env.symbols))
    return tuple(out)


def evaluate_dim(d, env) -> int:
    if isinstance(d, Known):
        return d.value
    return evaluate(d.expr, env)


def _units(g, order, groups):
    """Execution units: fused groups collapse into one step at the position
    of their first member in ``order``."""
    if not groups:
        return [(nid,) for nid in order]
    group_of = {}
    for grp in groups:
        for m in grp:
            group_of[m] = tuple(grp)
    units, seen = [], set()
    for nid in order:
        u = group_of.get(nid, (nid,))
        if u in seen:
            continue
        seen.add(u)
        units.append(u)
    return units


def interpret(g: Graph, env: ConcreteEnv, order=None, groups=None) -> Trace:
    """Execute ``g`` concretely.  ``groups`` (lists of node ids) run as one
    step each and do not materialize tensors used only inside the group."""
    order = list(order) if order is not None else topo_sort(g)
    shapes, values, dtypes = {}, {}, dict(g.dtypes)
    for decl in g.inputs:
        shapes[decl.name] = _input_shape(g, decl, env)
        if decl.dtype in INT and len(shapes[decl.name]) <= 1:
            v = env.values.get(decl.name)
            if v is None:
                rng = env.rng(f"input:{decl.name}")
                v = [rng.randint(1, 8) for _ in range(numel(shapes[decl.name]))]
            if len(v) != numel(shapes[decl.name]):
                raise RuntimeShapeError("<input>", f"{decl.name}: value length mismatch")
            values[decl.name] = list(v)
    for decl in g.constants:
        shapes[decl.name] = tuple(d.value for d in decl.shape)
        if decl.int_data is not None:
            values[decl.name] = list(decl.int_data)

    dead = set()
    taken = {}
    units = _units(g, order, groups)
    executed_units, skipped = [], []
    for unit in units:
        ran = []
        for nid in unit:
            node = g.node(nid)
            if node.op == "Combine":
                live = [t for t in node.inputs if t not in dead]
                if not live:
                    dead.update(node.outputs)
                    skipped.append(nid)
                    continue
                if len(live) > 1:
                    raise RuntimeShapeError(nid, "more than one live branch reaches Combine")
                shapes[node.outputs[0]] = shapes[live[0]]
                if live[0] in values:
                    values[node.outputs[0]] = values[live[0]]
                ran.append(nid)
                continue
            if any(t in dead for t in node.inputs):
                dead.update(node.outputs)
                skipped.append(nid)
                continue
            out_s, out_v = run_node(node, shapes, values, dtypes, env)
            if node.op == "Switch":
                b = _branch_choice(node, values, env)
                taken[nid] = b
                for k, t in enumerate(node.outputs):
                    if k != b:
                        dead.add(t)
            for t, s, v in zip(node.outputs, out_s, out_v):
                if t in dead:
                    continue
                shapes[t] = tuple(s)
                if v is not None and dtypes[t] in INT and len(s) <= 1 and len(v) <= TRACK_LIMIT:
                    values[t] = list(v)
            ran.append(nid)
        if ran:
            executed_units.append(tuple(ran) if len(unit) > 1 else ran[0])
    for t in g.outputs:
        if t in dead:
            raise RuntimeShapeError(g.producer.get(t, "<graph>"), f"graph output {t} was not produced")

    trace = Trace(executed_units, shapes, values, dtypes, taken, {}, [], 0, [], skipped)
    _liveness(g, trace)
    return trace


def _liveness(g: Graph, trace: Trace):
    step_of = {}
    for i, u in enumerate(trace.order, start=1):
        for nid in (u if isinstance(u, tuple) else (u,)):
            step_of[nid] = i
    trace.step_of = step_of
    last = len(trace.order)
    outputs = set(g.outputs)
    lifetimes = []
    for u in trace.order:
        members = set(u) if isinstance(u, tuple) else {u}
        for nid in sorted(members, key=g.index.__getitem__):
            for t in g.node(nid).outputs:
                if t not in trace.shapes:
                    continue
                users = [c for c in g.consumers.get(t, ()) if c in step_of]
                if len(members) > 1 and t not in outputs and users and all(c in members for c in users):
                    continue  # internal to a fused group
                birth = step_of[nid]
                death = max([step_of[c] for c in users] + [birth])
                if t in outputs:
                    death = last
                lifetimes.append((t, trace.size(t), birth, death))
    trace.lifetimes = lifetimes
    live = [0] * (last + 1)
    for _, size, b, d in lifetimes:
        for s in range(b, d + 1):
            live[s] += size
    trace.live_bytes = live[1:]
    trace.peak = max(trace.live_bytes, default=0)


# ---------------------------------------------------------------------------
# plan checking
# ---------------------------------------------------------------------------


def local_peak(g: Graph, trace: Trace, members) -> int:
    """Peak bytes of one subgraph executed in trace order: tensors produced
    inside it live until their last consumer inside it, or to its end when
    they are used elsewhere or are graph outputs."""
    members = set(members)
    seq = [n for n in trace.executed() if n in members]
    pos = {n: i for i, n in enumerate(seq)}
    live = [0] * len(seq)
    for n in seq:
        for t in g.node(n).outputs:
            if t not in trace.shapes:
                continue
            users = [c for c in g.consumers.get(t, ()) if c in trace.step_of]
            inside = [pos[c] for c in users if c in pos]
            escapes = t in g.outputs or any(c not in pos for c in users)
            end = len(seq) - 1 if escapes else max(inside + [pos[n]])
            for s in range(pos[n], end + 1):
                live[s] += trace.size(t)
    return max(live, default=0)


@dataclass
class CheckReport:
    violations: list = field(default_factory=list)
    details: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return not self.violations

    def to_dict(self) -> dict:
        return {"ok": self.ok, "violations": list(self.violations), "details": self.details}


def check_plan(g: Graph, env: ConcreteEnv, exec_plan=None, mem_plan=None, trace=None) -> CheckReport:
    """Re-execute with the planned order and verify the plans against the
    concrete run."""
    from .rdp import bind_analysis_symbols
    from .symbolic import SymbolicError

    rep = CheckReport()
    order = exec_plan.order if exec_plan is not None else None
    if order is not None:
        from .graph import is_topological

        if not is_topological(g, order):
            rep.violations.append("(a) execution order is not topological")
            return rep
    if trace is None:
        trace = interpret(g, env, order)
    rep.details["peak"] = trace.peak

    if exec_plan is not None:
        bindings = dict(env.symbols)
        if exec_plan.rdp is not None:
            bindings.update(bind_analysis_symbols(exec_plan.rdp, trace.values))
        for sp in exec_plan.subgraphs:
            if sp.method == "heuristic" or sp.peak is None:
                continue
            try:
                planned = sp.peak_at(bindings)
            except SymbolicError:
                continue
            actual = local_peak(g, trace, sp.nodes)
            if sp.has_control:
                if actual > planned:
                    rep.violations.append(
                        f"(b) subgraph {sp.id}: actual peak {actual} > planned {planned}")
            elif actual != planned:
                rep.violations.append(
                    f"(b) subgraph {sp.id}: actual peak {actual} != planned {planned}")

    if mem_plan is not None:
        placed = {p.tensor: p for p in mem_plan.placements}
        lts = [lt for lt in trace.lifetimes if lt[1] > 0]
        for t, size, b, d in lts:
            p = placed.get(t)
            if p is None:
                rep.violations.append(f"(c) tensor {t} has no offset")
            elif p.size < size:
                rep.violations.append(f"(c) tensor {t}: planned size {p.size} < actual {size}")
        for i in range(len(lts)):
            ti, si, bi, di = lts[i]
            pi = placed.get(ti)
            if pi is None:
                continue
            for j in range(i + 1, len(lts)):
                tj, sj, bj, dj = lts[j]
                pj = placed.get(tj)
                if pj is None or bi > dj or bj > di:
                    continue
                if pi.offset < pj.offset + sj and pj.offset < pi.offset + si:
                    rep.violations.append(f"(c) tensors {ti} and {tj} overlap in time and memory")
        if mem_plan.arena < trace.peak:
            rep.violations.append(f"(d) arena {mem_plan.arena} < actual peak {trace.peak}")
        rep.details["arena"] = mem_plan.arena
    return rep


def random_env(g: Graph, seed, rdp=None, lo: int = 1, hi: int = 8, symbols=None) -> ConcreteEnv:
    """A random concrete environment for ``g``.

    Declared symbols get values in ``[lo, hi]`` unless fixed by
    ``symbols``.  Inputs with '?' dims take the shape that RDP refined for
    them when one is given; any remaining unknown dim is drawn at random.
    """
    rng = random.Random(f"env:{seed}")
    drawn = {s: rng.randint(lo, hi) for s in g.symbols}
    symbols = {**drawn, **(symbols or {})}
    shapes = {}
    for decl in g.inputs:
        if UNDEF not in decl.shape:
            continue
        refined = rdp.shapes.get(decl.name) if rdp is not None else None
        dims = []
        for i, d in enumerate(decl.shape):
            r = refined[i] if isinstance(refined, tuple) else UNDEF
            if isinstance(r, Known) or (isinstance(r, Sym) and r.expr.symbols() <= set(symbols)):
                dims.append(evaluate_dim(r, symbols))
            elif d != UNDEF:
                dims.append(evaluate_dim(d, symbols))
            else:
                dims.append(rng.randint(lo, hi))
        shapes[decl.name] = tuple(dims)
    return ConcreteEnv(symbols=symbols, input_shapes=shapes, seed=seed)
