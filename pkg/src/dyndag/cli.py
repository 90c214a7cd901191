"""Command-line front end: ``dyndag <command> ...``.

Exit status: 0 success, 2 input error, 3 analysis error, 4 plan-check
failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from importlib import resources
from pathlib import Path

from . import memplan, ops
from .fusion import build_plan, strip_facts
from .graph import GraphError, load_graph
from .interp import ConcreteEnv, RuntimeShapeError, check_plan, interpret, random_env
from .ops import AnalysisError
from .rdp import ConvergenceError, run_rdp
from .report import (
    analysis_doc,
    build_report,
    compare_strategies,
    document,
    exec_plan_from_dict,
    mem_plan_from_dict,
    plan_memory,
    render_analysis,
    render_peak,
    render_report,
)
from .schedule import EXHAUSTIVE_CAP, build_exec_plan
from .symbolic import SymbolicError

EXIT_OK, EXIT_INPUT, EXIT_ANALYSIS, EXIT_CHECK = 0, 2, 3, 4


class InputError(Exception):
    pass


class CheckFailed(Exception):
    pass


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def bundled_graphs() -> list:
    root = resources.files("dyndag") / "data" / "graphs"
    return sorted(p.name for p in root.iterdir() if p.name.endswith(".json"))


def resolve_graph(name: str) -> Path:
    """A path on disk, or the name of a bundled graph (with or without .json)."""
    p = Path(name)
    if p.exists():
        return p
    fname = name if name.endswith(".json") else name + ".json"
    bundled = resources.files("dyndag") / "data" / "graphs" / fname
    if bundled.is_file():
        return Path(str(bundled))
    raise InputError(f"graph file not found: {name}")


def parse_bindings(text, what="binding") -> dict:
    out = {}
    if not text:
        return out
    for item in text.split(","):
        item = item.strip()
        if not item:
            continue
        key, sep, val = item.partition("=")
        try:
            if not sep:
                raise ValueError
            out[key.strip()] = int(val)
        except ValueError:
            raise InputError(f"bad {what} {item!r}; expected NAME=INT") from None
    return out


def seed_of(args) -> int:
    env = os.environ.get("DYNDAG_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise InputError(f"DYNDAG_SEED must be an integer, got {env!r}") from None
    return args.seed


def make_env(g, rdp, args, seed) -> ConcreteEnv:
    """Random environment from ``seed`` overridden by --env/--branches."""
    symbols, values = {}, {}
    for k, v in parse_bindings(getattr(args, "env", None), "env binding").items():
        if k in g.symbols:
            if v < 1:
                raise InputError(f"symbol {k} must be >= 1")
            symbols[k] = v
        elif k in g.decls and g.decls[k].int_data is None:
            values[k] = [v]
        else:
            raise InputError(f"unknown symbol {k!r}")
    env = random_env(g, seed, rdp, symbols=symbols)
    env.values.update(values)
    env.branches.update(parse_bindings(getattr(args, "branches", None), "branch"))
    return env


def write_json(doc, path=None):
    text = json.dumps(doc, indent=2, sort_keys=True) + "\n"
    if path:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text)
    else:
        sys.stdout.write(text)


def read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise InputError(f"cannot read {path}: {exc}") from None


def load(args):
    g = load_graph(resolve_graph(args.graph))
    rdp = run_rdp(g, cap=args.value_cap)
    return g, rdp


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_analyze(args):
    g, rdp = load(args)
    if args.json:
        write_json(analysis_doc(rdp), args.out)
        return EXIT_OK
    if args.dump_state:
        def show(state):
            print(f"-- sweep {state.iteration} ({'changed' if state.changed else 'stable'})")
        rdp = run_rdp(g, cap=args.value_cap, on_sweep=show)
    print(render_analysis(rdp))
    print(f"-- fixpoint after {rdp.sweeps} sweeps; nac producers: "
          f"{', '.join(sorted(rdp.nac_nodes)) or 'none'}")
    return EXIT_OK


def _fusion(g, rdp, args):
    facts = strip_facts(g, rdp) if getattr(args, "no_facts", False) else None
    return build_plan(g, rdp, cap=args.version_cap, facts=facts)


def cmd_plan(args):
    g, rdp = load(args)
    if args.what == "fusion":
        plan = _fusion(g, rdp, args)
        write_json(document("fusion", {"graph": g.name, **plan.to_dict()}), args.out)
    elif args.what == "exec":
        plan = build_exec_plan(g, rdp, cap=args.cap, fusion=_fusion(g, rdp, args))
        write_json(document("exec", {"graph": g.name, **plan.to_dict()}), args.out)
    else:
        seed = seed_of(args)
        if args.order:
            exec_plan = exec_plan_from_dict(read_json(args.order), rdp)
        else:
            exec_plan = build_exec_plan(g, rdp, cap=args.cap)
        env = make_env(g, rdp, args, seed)
        plan, trace, lts = plan_memory(rdp, exec_plan, env, args.strategy, args.alignment)
        body = {"graph": g.name, "symbols": env.symbols, **plan.to_dict()}
        if args.compare:
            body["compare"] = compare_strategies(lts, args.alignment)
        write_json(document("mem", body), args.out)
    return EXIT_OK


def _simulate(g, rdp, env, exec_plan=None, mem_plan=None):
    trace = interpret(g, env, exec_plan.order if exec_plan else None)
    rep = check_plan(g, env, exec_plan, mem_plan) if (exec_plan or mem_plan) else None
    body = {
        "graph": g.name,
        "symbols": env.symbols,
        "executed": trace.executed(),
        "branches": trace.branches,
        "peak": trace.peak,
        "live_bytes": trace.live_bytes,
        "outputs": {t: list(trace.shapes[t]) for t in g.outputs},
    }
    if rep is not None:
        body["check"] = rep.to_dict()
    return document("simulate", body), rep


def cmd_simulate(args):
    g, rdp = load(args)
    env = make_env(g, rdp, args, seed_of(args))
    exec_plan = mem_plan = None
    if args.check:
        for path in args.check.split(","):
            d = read_json(path)
            if d.get("kind") == "exec":
                exec_plan = exec_plan_from_dict(d, rdp)
            elif d.get("kind") == "mem":
                mem_plan = mem_plan_from_dict(d)
            else:
                raise InputError(f"{path}: not an exec or mem plan")
    doc, rep = _simulate(g, rdp, env, exec_plan, mem_plan)
    if args.json:
        write_json(doc, args.out)
    else:
        print(f"executed {len(doc['executed'])} nodes, peak {doc['peak']} bytes")
        for t, s in doc["outputs"].items():
            print(f"  {t}: {s}")
        if rep is not None:
            print("check: " + ("ok" if rep.ok else "; ".join(rep.violations)))
    if rep is not None and not rep.ok:
        raise CheckFailed("; ".join(rep.violations))
    return EXIT_OK


def _envs(g, rdp, args, seed, count):
    first = make_env(g, rdp, args, seed)
    return [first] + [random_env(g, f"{seed}:{i}", rdp) for i in range(1, count)]


def cmd_report(args):
    g, rdp = load(args)
    fusion = _fusion(g, rdp, args)
    exec_plan = build_exec_plan(g, rdp, cap=args.cap, fusion=fusion)
    doc = build_report(rdp, fusion, exec_plan, _envs(g, rdp, args, seed_of(args), args.envs))
    if args.json:
        write_json(doc, args.out)
    else:
        if args.out:
            write_json(doc, args.out)
        print(render_report(doc))
    return EXIT_OK


def cmd_pipeline(args):
    g, rdp = load(args)
    seed = seed_of(args)
    out = Path(args.outdir)
    fusion = _fusion(g, rdp, args)
    exec_plan = build_exec_plan(g, rdp, cap=args.cap, fusion=fusion)
    env = make_env(g, rdp, args, seed)
    mem, _, _ = plan_memory(rdp, exec_plan, env, args.strategy, args.alignment)
    sim, rep = _simulate(g, rdp, env, exec_plan, mem)
    write_json(analysis_doc(rdp), out / "analysis.json")
    write_json(document("fusion", {"graph": g.name, **fusion.to_dict()}), out / "fusion.json")
    write_json(document("exec", {"graph": g.name, **exec_plan.to_dict()}), out / "exec.json")
    write_json(document("mem", {"graph": g.name, "symbols": env.symbols, **mem.to_dict()}),
               out / "mem.json")
    write_json(sim, out / "simulate.json")
    print(f"{g.name}: {len(g.nodes)} nodes, {rdp.sweeps} RDP sweeps, "
          f"{fusion.layers_before}->{fusion.layers_after} layers, "
          f"{len(exec_plan.subgraphs)} subgraphs, arena {mem.arena} B, peak {sim['peak']} B")
    for sp in exec_plan.subgraphs:
        print(f"  subgraph {sp.id}: {sp.category:<12} {sp.method:<16} peak {render_peak(sp.peak)}")
    print("check: " + ("ok" if rep.ok else "; ".join(rep.violations)))
    if not rep.ok:
        raise CheckFailed("; ".join(rep.violations))
    return EXIT_OK


def cmd_ops(args):
    rows = ops.catalog_table()
    if args.json:
        write_json(document("ops", {"ops": rows}))
    else:
        for r in rows:
            lo, hi = r["inputs"]
            print(f"{r['op']:<18} {r['class']:<7} inputs {lo}..{hi}  "
                  f"shape inputs {r['shape_input_indices'] or '-'}")
    return EXIT_OK


def cmd_graphs(args):
    for name in bundled_graphs():
        print(name)
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dyndag", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, env=False):
        sp.add_argument("graph", help="graph JSON file or bundled graph name")
        sp.add_argument("--value-cap", type=int, default=32,
                        help="longest integer tensor whose value is tracked")
        sp.add_argument("--out", help="write JSON here instead of stdout")
        if env:
            sp.add_argument("--env", help="symbol bindings, e.g. N=64,M=3")
            sp.add_argument("--seed", type=int, default=0)

    def planning(sp):
        sp.add_argument("--cap", type=int, default=EXHAUSTIVE_CAP,
                        help="largest subgraph searched exhaustively")
        sp.add_argument("--version-cap", type=int, default=4)
        sp.add_argument("--no-facts", action="store_true",
                        help="plan fusion without RDP-derived dimension facts")

    def memory(sp):
        sp.add_argument("--strategy", choices=sorted(memplan.STRATEGIES) + ["optimal-oracle"],
                        default="from-peak")
        sp.add_argument("--alignment", type=int, default=memplan.DEFAULT_ALIGNMENT)

    a = sub.add_parser("analyze", help="run rank and dimension propagation")
    common(a)
    a.add_argument("--dump-state", action="store_true", help="report every sweep")
    a.add_argument("--json", action="store_true")
    a.set_defaults(func=cmd_analyze)

    pl = sub.add_parser("plan", help="fusion, execution-order or memory plan")
    pl.add_argument("what", choices=["fusion", "exec", "mem"])
    common(pl, env=True)
    planning(pl)
    memory(pl)
    pl.add_argument("--order", help="exec plan JSON whose order the memory plan follows")
    pl.add_argument("--compare", action="store_true",
                    help="also report arenas of every strategy and the oracle")
    pl.set_defaults(func=cmd_plan)

    s = sub.add_parser("simulate", help="interpret the graph concretely")
    common(s, env=True)
    s.add_argument("--branches", help="switch choices, e.g. sw1=0")
    s.add_argument("--check", help="comma-separated exec/mem plan files to verify")
    s.add_argument("--json", action="store_true")
    s.set_defaults(func=cmd_simulate)

    r = sub.add_parser("report", help="breakdown statistics for one graph")
    common(r, env=True)
    planning(r)
    r.add_argument("--envs", type=int, default=3, help="number of environments")
    r.add_argument("--json", action="store_true")
    r.set_defaults(func=cmd_report)

    pp = sub.add_parser("pipeline", help="analyze, plan, simulate and check")
    common(pp, env=True)
    planning(pp)
    memory(pp)
    pp.add_argument("--branches", help="switch choices, e.g. sw1=0")
    pp.add_argument("--outdir", default="dyndag-out")
    pp.set_defaults(func=cmd_pipeline)

    o = sub.add_parser("ops", help="operator catalog")
    o.add_argument("--json", action="store_true")
    o.set_defaults(func=cmd_ops)

    gr = sub.add_parser("graphs", help="list bundled graphs")
    gr.set_defaults(func=cmd_graphs)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (InputError, GraphError) as exc:
        print(f"dyndag: input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (AnalysisError, ConvergenceError, SymbolicError, RuntimeShapeError) as exc:
        print(f"dyndag: analysis error: {exc}", file=sys.stderr)
        return EXIT_ANALYSIS
    except CheckFailed as exc:
        print(f"dyndag: plan check failed: {exc}", file=sys.stderr)
        return EXIT_CHECK


if __name__ == "__main__":
    sys.exit(main())
