"""Artifact documents, plan (de)serialization and the breakdown report."""

from __future__ import annotations

from . import memplan
from .interp import ConcreteEnv, interpret
from .rdp import RdpResult, substitute
from .schedule import ALL_KNOWN, MIXED, NAC_BOUNDED, ExecPlan, SubgraphPlan
from .symbolic import Expr, render_entry, parse_expr, render

SCHEMA = "dyndag/1"


def document(kind: str, body: dict) -> dict:
    return {"schema": SCHEMA, "kind": kind, **body}


def analysis_doc(rdp: RdpResult) -> dict:
    g = rdp.graph
    tensors = {}
    for t, (s, v) in rdp.canonical().items():
        tensors[t] = {"shape": s, "value": v}
    return document("analysis", {
        "graph": g.name,
        "sweeps": rdp.sweeps,
        "classes": {n: c.name for n, c in sorted(rdp.classes.items())},
        "nac_nodes": sorted(rdp.nac_nodes),
        "analysis_symbols": {
            name: {"node": o[0], "tensor": o[1], "index": o[2]}
            for name in rdp.symbols.analysis()
            if (o := rdp.symbols.origin(name)) is not None
        },
        "tensors": tensors,
    })


# ---------------------------------------------------------------------------
# plan documents read back from disk
# ---------------------------------------------------------------------------


def exec_plan_from_dict(d: dict, rdp=None) -> ExecPlan:
    subs = []
    for s in d["subgraphs"]:
        peak = s.get("peak")
        if peak is None:
            expr = None
        elif isinstance(peak, int):
            expr = Expr.const(peak)
        else:
            expr = parse_expr(peak)
        subs.append(SubgraphPlan(
            s["id"], tuple(s["order"]), s["category"], list(s["order"]), expr, s["method"],
            s.get("level", 0), s.get("has_control", False), tuple(s.get("boundary", ())),
            s.get("fusion_versions"),
        ))
    return ExecPlan(subs, list(d.get("boundary_tensors", [])), list(d["order"]), rdp)


def mem_plan_from_dict(d: dict) -> memplan.MemPlan:
    places = [memplan.Placement(t["name"], t["offset"], t["size"], t["birth"], t["death"])
              for t in d["tensors"]]
    return memplan.MemPlan(d["arena"], places, d["strategy"], d.get("alignment", 1))


# ---------------------------------------------------------------------------
# concrete memory planning
# ---------------------------------------------------------------------------


def concrete_sizes(rdp: RdpResult, env: ConcreteEnv, trace) -> dict:
    """Bytes per tensor: from the substituted RDP shapes where static,
    otherwise from the concrete run."""
    g = rdp.graph
    static = substitute(rdp, env.symbols).shapes
    sizes = {}
    for t, shape in trace.shapes.items():
        if g.producer.get(t) is None:
            continue  # graph inputs and constants are not arena tensors
        dims = static.get(t, shape)
        n = 1
        for d in dims:
            n *= d
        sizes[t] = n * g.elem_size(t)
    return sizes


def plan_memory(rdp: RdpResult, exec_plan: ExecPlan, env: ConcreteEnv,
                strategy: str = "from-peak", alignment: int = memplan.DEFAULT_ALIGNMENT):
    """Run ``exec_plan``'s order at ``env`` and assign arena offsets."""
    g = rdp.graph
    trace = interpret(g, env, exec_plan.order)
    sizes = concrete_sizes(rdp, env, trace)
    lts = memplan.lifetimes(trace.executed(), g, sizes)
    if strategy == "optimal-oracle":
        plan = memplan.plan_optimal(lts, alignment)
    else:
        plan = memplan.STRATEGIES[strategy](lts, alignment)
    return plan, trace, lts


def compare_strategies(lts, alignment: int = memplan.DEFAULT_ALIGNMENT) -> dict:
    out = {name: fn(lts, alignment).arena for name, fn in memplan.STRATEGIES.items()}
    out["lower_bound"] = memplan.lower_bound(
        [memplan.Lifetime(lt.tensor, -(-lt.size // alignment) * alignment, lt.birth, lt.death)
         for lt in lts])
    if len(lts) <= memplan.ORACLE_CAP:
        out["optimal-oracle"] = memplan.plan_optimal(lts, alignment).arena
    return out


# ---------------------------------------------------------------------------
# breakdown report
# ---------------------------------------------------------------------------


def build_report(rdp: RdpResult, fusion, exec_plan: ExecPlan, envs) -> dict:
    """Breakdown statistics of this graph: fusion layer counts, eliminated
    intermediate bytes, subgraph categories and arena sizes per strategy."""
    g = rdp.graph
    fd = fusion.to_dict()
    cats = exec_plan.categories()
    total = sum(cats.values()) or 1
    arenas = []
    for env in envs:
        plan, trace, lts = plan_memory(rdp, exec_plan, env)
        row = {"symbols": dict(sorted(env.symbols.items())), "actual_peak": trace.peak}
        row.update(compare_strategies(lts))
        arenas.append(row)
    ratios = {}
    for key in ("from-peak", "best-fit"):
        vals = [r[key] / r["optimal-oracle"] for r in arenas
                if r.get("optimal-oracle")]
        if vals:
            ratios[key] = sum(vals) / len(vals)
    return document("report", {
        "graph": g.name,
        "fusion": {
            "layers_before": fd["layers_before"],
            "layers_after": fd["layers_after"],
            "layer_reduction": fd["layer_reduction"],
            "groups": len(fd["groups"]),
            "max_versions": max((grp["versions"] for grp in fd["groups"]), default=1),
            "bytes_eliminated": fd["bytes_eliminated"],
        },
        "subgraphs": {
            "counts": cats,
            "shares": {k: v / total for k, v in cats.items()},
            "methods": _count(s.method for s in exec_plan.subgraphs),
        },
        "memory": {"environments": arenas, "mean_ratio_to_oracle": ratios},
    })


def _count(items) -> dict:
    out: dict = {}
    for x in items:
        out[x] = out.get(x, 0) + 1
    return dict(sorted(out.items()))


def render_report(doc: dict) -> str:
    f = doc["fusion"]
    s = doc["subgraphs"]
    lines = [
        f"graph {doc['graph']}",
        "",
        "fusion",
        f"  layers            {f['layers_before']} -> {f['layers_after']}"
        f"  ({100 * f['layer_reduction']:.1f}% fewer)",
        f"  fused groups      {f['groups']} (max {f['max_versions']} versions)",
        f"  bytes eliminated  {f['bytes_eliminated']}",
        "",
        "subgraphs",
    ]
    for cat in (ALL_KNOWN, MIXED, NAC_BOUNDED):
        lines.append(f"  {cat:<16}  {s['counts'][cat]:>3}  {100 * s['shares'][cat]:5.1f}%")
    lines.append("  methods           " + ", ".join(f"{k}={v}" for k, v in s["methods"].items()))
    lines += ["", "memory (bytes)"]
    header = f"  {'env':<24} {'peak':>10} {'lower':>10} {'from-peak':>10} {'best-fit':>10} {'oracle':>10}"
    lines.append(header)
    for r in doc["memory"]["environments"]:
        env = ",".join(f"{k}={v}" for k, v in r["symbols"].items()) or "-"
        lines.append(
            f"  {env:<24} {r['actual_peak']:>10} {r['lower_bound']:>10} {r['from-peak']:>10}"
            f" {r['best-fit']:>10} {r.get('optimal-oracle', '-'):>10}")
    for k, v in doc["memory"]["mean_ratio_to_oracle"].items():
        lines.append(f"  mean {k}/oracle = {v:.3f}")
    return "\n".join(lines)


def render_analysis(rdp: RdpResult) -> str:
    rows = []
    width = max((len(t) for t in rdp.shapes), default=4)
    for t in sorted(rdp.shapes):
        rows.append(f"{t:<{width}}  S={render_entry(rdp.shapes[t])}  V={render_entry(rdp.values[t])}")
    return "\n".join(rows)


def render_peak(e) -> str:
    if e is None:
        return "deferred"
    return str(e.const_value()) if e.is_const() else render(e)
