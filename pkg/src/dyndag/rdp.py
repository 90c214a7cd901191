"""Rank and dimension propagation: a forward/backward lattice fixpoint.

Every tensor owns a shape entry and a value entry (``UNDEF``, ``NAC`` or a
tuple of DimValues).  Sweeps visit nodes in depth-first topological order;
each sweep runs the forward transfer of a node and then offers its
backward proposal to every predecessor tensor that still has an Undef
part.  Sweeps repeat until nothing changes.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field

from . import ops
from .graph import Graph, topo_sort
from .ops import AnalysisError, DynClass
from .symbolic import (
    NAC,
    UNDEF,
    Expr,
    Known,
    Sym,
    SymbolicError,
    SymbolTable,
    entry_has_nac,
    evaluate,
    height,
    is_resolved,
    meet,
    render_entry,
)

DEFAULT_VALUE_CAP = 32


class ConvergenceError(RuntimeError):
    pass


@dataclass
class AnalysisState:
    shapes: dict
    values: dict
    iteration: int = 0
    changed: bool = False

    def heights(self) -> list:
        """Lattice heights of every dimension/element entry, for progress checks."""
        out = []
        for m in (self.shapes, self.values):
            for t in sorted(m):
                e = m[t]
                if e == UNDEF:
                    out.append(3)
                elif e == NAC:
                    out.append(0)
                else:
                    out.extend(height(d) for d in e)
        return out


@dataclass(frozen=True)
class RdpResult:
    graph: Graph
    shapes: dict
    values: dict
    classes: dict
    nac_nodes: frozenset
    symbols: SymbolTable = field(compare=False)
    sweeps: int = 0

    def shape(self, tensor):
        return self.shapes[tensor]

    def value(self, tensor):
        return self.values[tensor]

    def canonical(self) -> dict:
        """Rendered S/V maps; analysis symbols are already named after the
        node that produced them, so no further renaming is required."""
        return {t: (render_entry(self.shapes[t]), render_entry(self.values[t]))
                for t in sorted(self.shapes)}


def _merge_dim(node_id, old, new):
    if old == UNDEF:
        return new
    if new == UNDEF:
        return old
    if isinstance(old, Known) and isinstance(new, Known) and old != new:
        raise AnalysisError(node_id, f"conflicting facts {old!r} vs {new!r}", (old, new))
    return meet(old, new)


def merge_update(node_id, old, new):
    """Combine a freshly computed entry with the current one.

    Undef parts of either side defer to the other, so facts filled in by
    backward transfer survive a forward pass that cannot yet see them.
    """
    if old == UNDEF:
        return new
    if new == UNDEF:
        return old
    if old == NAC or new == NAC:
        return NAC
    if len(old) != len(new):
        raise AnalysisError(node_id, f"rank conflict {len(old)} vs {len(new)}")
    return tuple(_merge_dim(node_id, a, b) for a, b in zip(old, new))


def _initial_state(g: Graph, cap: int) -> AnalysisState:
    shapes = {t: UNDEF for t in g.tensors()}
    values = dict(shapes)
    for t in g.inputs:
        shapes[t.name] = t.shape
        values[t.name] = NAC
    for t in g.constants:
        shapes[t.name] = t.shape
        if t.int_data is not None and len(t.int_data) <= cap:
            values[t.name] = tuple(Known(v) for v in t.int_data)
        else:
            values[t.name] = NAC
    return AnalysisState(shapes, values)


def _symbolize(node, spec, shapes, values, symbols):
    """Name the unknown elements of an ISDO output value after the node
    (ISDO operators have a single output)."""
    out = []
    for k, (s, v) in enumerate(zip(shapes, values)):
        if (
            s in (UNDEF, NAC)
            or not all(is_resolved(d) for d in s)
            or v in (UNDEF, NAC)
            or not any(d == NAC for d in v)
        ):
            out.append(v)
            continue
        tensor = node.outputs[k]
        named = []
        for i, d in enumerate(v):
            if d == NAC:
                name = symbols.analysis_symbol(node.id, i, tensor)
                named.append(Sym(Expr.symbol(name)))
            else:
                named.append(d)
        out.append(tuple(named))
    return out


def run_rdp(
    g: Graph,
    order=None,
    cap: int = DEFAULT_VALUE_CAP,
    on_sweep=None,
    max_sweeps: int | None = None,
) -> RdpResult:
    """Fixpoint analysis of ``g``.

    ``order`` overrides the sweep order (any topological order gives the
    same result).  ``on_sweep`` is called with the state after every sweep.
    """
    order = list(order) if order is not None else topo_sort(g)
    state = _initial_state(g, cap)
    symbols = SymbolTable(g.symbols)
    const_env = g.const_env()
    classes = {n.id: ops.classify(n, const_env) for n in g.nodes}
    bound = max_sweeps if max_sweeps is not None else 10 * max(len(g.nodes), 1)
    S, V = state.shapes, state.values

    def update(m, tensor, node_id, new):
        old = m[tensor]
        merged = merge_update(node_id, old, new)
        if merged != old:
            m[tensor] = merged
            state.changed = True

    while True:
        state.changed = False
        state.iteration += 1
        if state.iteration > bound:
            raise ConvergenceError(f"no fixpoint after {bound} sweeps")
        for nid in order:
            node = g.node(nid)
            spec = node.spec
            in_s = [S[t] for t in node.inputs]
            in_v = [V[t] for t in node.inputs]
            out_dt = [g.dtypes[t] for t in node.outputs]
            try:
                new_s, new_v = ops.forward(spec, node, in_s, in_v, out_dt, cap)
            except SymbolicError as exc:
                raise AnalysisError(nid, str(exc)) from exc
            if spec.dyn_class is DynClass.ISDO:
                new_v = _symbolize(node, spec, new_s, new_v, symbols)
            for t, s, v in zip(node.outputs, new_s, new_v):
                update(S, t, nid, s)
                update(V, t, nid, v)
            if node.op in ("Switch", "Combine"):
                continue  # transit only; nothing flows backward across them
            if not any(S[t] == UNDEF or (S[t] != NAC and UNDEF in S[t]) for t in node.inputs):
                continue
            props = ops.backward(
                spec, node, [S[t] for t in node.outputs], [V[t] for t in node.outputs],
                [S[t] for t in node.inputs], [V[t] for t in node.inputs],
            )
            for t, p in zip(node.inputs, props):
                old = S[t]
                new = ops.fill_undef(old, p)
                if new != old:
                    S[t] = new
                    state.changed = True
        if on_sweep is not None:
            on_sweep(AnalysisState(dict(S), dict(V), state.iteration, state.changed))
        if not state.changed:
            break

    nac_nodes = frozenset(
        n.id for n in g.nodes if any(entry_has_nac(S[t]) for t in n.outputs)
    )
    return RdpResult(g, dict(S), dict(V), classes, nac_nodes, symbols, state.iteration)


def shuffled_order(g: Graph, seed) -> list:
    return topo_sort(g, random.Random(seed))


# ---------------------------------------------------------------------------
# substitution
# ---------------------------------------------------------------------------


@dataclass
class Substitution:
    shapes: dict  # tensor -> tuple of ints
    values: dict  # tensor -> tuple of ints (tracked values only)
    dynamic_only: list
    unresolved: list


def _concrete(entry, env):
    """Tuple of ints, or None when something is not statically known."""
    if entry in (UNDEF, NAC):
        return None
    out = []
    for d in entry:
        if isinstance(d, Known):
            out.append(d.value)
        elif isinstance(d, Sym):
            if not d.expr.symbols() <= set(env):
                return None
            out.append(evaluate(d.expr, env))
        else:
            return None
    return tuple(out)


def substitute(result: RdpResult, env: dict) -> Substitution:
    """Instantiate the symbolic shape map at ``env``.

    Tensors with a nac part, or depending on analysis symbols that ``env``
    does not bind, are listed as dynamic-only; Undef parts are reported.
    """
    missing = [s for s in result.graph.symbols if s not in env]
    if missing:
        raise SymbolicError(f"unbound symbol(s) {missing}")
    shapes, values, dyn, unresolved = {}, {}, [], []
    for t in sorted(result.shapes):
        e = result.shapes[t]
        if e == UNDEF or (e != NAC and UNDEF in e):
            unresolved.append(t)
            continue
        c = _concrete(e, env)
        if c is None:
            dyn.append(t)
            continue
        shapes[t] = c
        v = _concrete(result.values[t], env)
        if v is not None:
            values[t] = v
    return Substitution(shapes, values, dyn, unresolved)


def bind_analysis_symbols(result: RdpResult, tensor_values: dict) -> dict:
    """Bindings for analysis symbols taken from concrete tensor values
    (e.g. an interpreter trace)."""
    env = {}
    for name in result.symbols.analysis():
        origin = result.symbols.origin(name)
        if origin is None:
            continue
        _, tensor, index = origin
        val = tensor_values.get(tensor)
        if val is not None and index < len(val):
            env[name] = val[index]
    return env
