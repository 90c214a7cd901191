import itertools
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dyndag.symbolic import (
    NAC,
    UNDEF,
    Expr,
    Known,
    Sign,
    Sym,
    SymbolicError,
    SymbolTable,
    apply,
    compare_sign,
    dim,
    evaluate,
    floordiv,
    height,
    leq,
    meet,
    normalize,
    parse_dim,
    parse_expr,
    render,
    render_dim,
    sym_max,
    sym_min,
)

N, M, K = (Expr.symbol(s) for s in "NMK")
SYMS = ["N", "M", "K"]


# --- strategies -------------------------------------------------------------

def exprs(depth=3):
    leaf = st.one_of(
        st.integers(0, 9).map(Expr.const),
        st.sampled_from(SYMS).map(Expr.symbol),
    )
    return st.recursive(
        leaf,
        lambda sub: st.one_of(
            st.tuples(sub, sub).map(lambda p: p[0] + p[1]),
            st.tuples(sub, sub).map(lambda p: p[0] - p[1]),
            st.tuples(sub, sub).map(lambda p: p[0] * p[1]),
            st.tuples(sub, st.integers(1, 4)).map(lambda p: floordiv(p[0], p[1])),
            st.tuples(sub, sub).map(lambda p: sym_max(p[0], p[1])),
            st.tuples(sub, sub).map(lambda p: sym_min(p[0], p[1])),
        ),
        max_leaves=depth * 3,
    )


dims = st.one_of(
    st.just(UNDEF),
    st.just(NAC),
    st.integers(0, 4).map(Known),
    st.sampled_from(["N", "M", "(2*N)", "(N+1)"]).map(parse_dim),
)
envs = st.fixed_dictionaries({s: st.integers(1, 50) for s in SYMS})


# --- expressions ------------------------------------------------------------

def test_evaluate_examples():
    assert evaluate(2 * N + 1, {"N": 3}) == 7
    assert evaluate(floordiv(N, 2), {"N": 5}) == 2
    assert evaluate(sym_max(N, M), {"N": 3, "M": 9}) == 9


def test_evaluate_unbound_symbol():
    with pytest.raises(SymbolicError):
        evaluate(N + M, {"N": 1})


def test_literal_expressions_fold():
    e = (Expr.const(3) + 4) * 2 - 1
    assert e.is_const() and e.const_value() == 13
    assert floordiv(Expr.const(7), 2) == Expr.const(3)


def test_floordiv_exact_division_folds():
    assert floordiv(2 * N, 2) == N
    assert floordiv(N * M, N) == M
    for n in range(1, 65):
        assert evaluate(floordiv(2 * N, 2), {"N": n}) == n


def test_floordiv_inexact_stays_opaque():
    e = floordiv(N, 2)
    assert not e.is_const() and "//" in render(e)


def test_render_is_fully_parenthesized():
    assert render(2 * N + 1) == "((2*N)+1)"
    assert render_dim(UNDEF) == "undef" and render_dim(NAC) == "nac"
    assert render_dim(Known(7)) == "7"


@given(exprs())
def test_render_parse_round_trip(e):
    assert parse_expr(render(e)) == e


@given(exprs())
def test_normalize_idempotent(e):
    assert normalize(normalize(e)) == normalize(e)


@given(exprs(), envs)
def test_normalization_preserves_value(e, env):
    assert evaluate(normalize(e), env) == evaluate(e, env)


@given(exprs(), exprs())
@settings(max_examples=200)
def test_structural_equality_implies_semantic(a, b):
    if a == b:
        rng = random.Random(0)
        for _ in range(100):
            env = {s: rng.randint(1, 60) for s in SYMS}
            assert evaluate(a, env) == evaluate(b, env)


# --- sign reasoning ---------------------------------------------------------

def test_compare_sign_examples():
    assert compare_sign(N * M - N) is Sign.NONNEG
    assert compare_sign(N - M) is Sign.INDETERMINATE
    assert compare_sign(3 * N + 2) is Sign.NONNEG
    assert compare_sign(-N) is Sign.NONPOS
    assert compare_sign((N * M + 4) - (N * M + 8)) is Sign.NONPOS


def test_compare_sign_nm_minus_n_search():
    rng = random.Random(7)
    for _ in range(2000):
        env = {"N": rng.randint(1, 100), "M": rng.randint(1, 100)}
        assert evaluate(N * M - N, env) >= 0


@given(exprs())
@settings(max_examples=300)
def test_compare_sign_sound(e):
    sign = compare_sign(e)
    if sign is Sign.INDETERMINATE:
        return
    rng = random.Random(str(e))
    for _ in range(1000):
        env = {s: rng.choice([1, 2, 3, rng.randint(1, 10_000)]) for s in SYMS}
        v = evaluate(e, env)
        assert v >= 0 if sign is Sign.NONNEG else v <= 0


# --- lattice ----------------------------------------------------------------

def test_meet_examples():
    assert meet(UNDEF, Known(4)) == Known(4)
    assert meet(Known(4), Known(5)) == NAC
    assert meet(dim("N"), dim("N")) == dim("N")
    assert meet(dim("N"), Known(4)) == NAC


def test_meet_tag_table():
    reps = [UNDEF, Known(4), dim("N"), NAC]
    for a, b in itertools.product(reps, repeat=2):
        m = meet(a, b)
        assert m == meet(b, a)
        assert leq(m, a) and leq(m, b)
        assert height(m) <= min(height(a), height(b))


@given(dims, dims, dims)
def test_meet_lattice_laws(a, b, c):
    assert meet(a, b) == meet(b, a)
    assert meet(meet(a, b), c) == meet(a, meet(b, c))
    assert meet(a, a) == a
    assert meet(UNDEF, a) == a
    assert meet(NAC, a) == NAC


def test_sym_of_literal_is_rejected():
    with pytest.raises(SymbolicError):
        Sym(Expr.const(3))
    assert dim(Expr.const(3)) == Known(3)


def test_apply_examples():
    assert apply("mul", Known(2), dim("N")) == dim("(2*N)")
    assert apply("add", dim("N"), Known(0)) == dim("N")
    assert apply("floordiv", dim("(2*N)"), Known(2)) == dim("N")
    assert apply("add", Known(2), Known(3)) == Known(5)
    assert apply("add", NAC, UNDEF) == NAC
    assert apply("max", UNDEF, Known(1)) == UNDEF
    with pytest.raises(SymbolicError):
        apply("floordiv", dim("N"), Known(0))


@given(st.sampled_from(["add", "sub", "mul", "max", "min"]), dims, dims, dims)
def test_apply_monotone(op, a, b, lower):
    """Replacing an operand by a lower element never gives a higher result."""
    if not leq(lower, a):
        return
    hi = apply(op, a, b)
    lo = apply(op, lower, b)
    assert height(lo) <= height(hi)
    assert leq(lo, hi) or hi == UNDEF or lo == NAC


def test_parse_dim_grammar():
    assert parse_dim("?") is UNDEF and parse_dim("undef") is UNDEF
    assert parse_dim("nac") is NAC
    assert parse_dim(5) == Known(5)
    assert parse_dim("(N*2)") == dim(2 * N)


# --- symbol table -----------------------------------------------------------

def test_symbol_table_roles_and_fresh_names():
    tab = SymbolTable(["N", "M"])
    name = tab.analysis_symbol("shape", 1, "s")
    assert name == "$shape_1" and tab.role(name) == "analysis"
    assert tab.origin(name) == ("shape", "s", 1)
    fresh = {tab.fresh() for _ in range(20)}
    assert len(fresh) == 20 and not fresh & {"N", "M"}
    with pytest.raises(SymbolicError):
        tab.declare_input("N")
    with pytest.raises(SymbolicError):
        tab.declare_input("$x")
