"""Symbolic integer expressions and the per-dimension value lattice.

Expressions are kept as a canonical sum of products: a sorted tuple of
``(monomial, coefficient)`` pairs where a monomial is a sorted tuple of atoms.
An atom is either a symbol name or an opaque ``floordiv``/``max``/``min`` node
whose arguments are themselves canonical expressions.  Two expressions are
structurally equal iff their canonical forms are equal.

Every symbol is assumed to be >= 1 (tensor dimensions are positive); sign
reasoning in :func:`compare_sign` relies on that.
"""

from __future__ import annotations

import enum
import itertools
import re
import threading
from dataclasses import dataclass
from typing import Mapping, Union


class SymbolicError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Expressions
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Opaque:
    kind: str  # "floordiv" | "max" | "min"
    args: tuple  # tuple[Expr, Expr]


def _atom_key(atom):
    if isinstance(atom, str):
        return (0, atom)
    return (1, atom.kind, tuple(a.key for a in atom.args))


def _mono_key(mono):
    return tuple(_atom_key(a) for a in mono)


def _mono_mul(m1, m2):
    return tuple(sorted(m1 + m2, key=_atom_key))


class Expr:
    """Immutable canonical polynomial over symbols and opaque atoms."""

    __slots__ = ("terms", "_hash", "_key")

    def __init__(self, terms):
        object.__setattr__(self, "terms", terms)
        object.__setattr__(self, "_hash", None)
        object.__setattr__(self, "_key", None)

    def __setattr__(self, name, value):
        raise AttributeError("Expr is immutable")

    @classmethod
    def _from_map(cls, coeffs: dict) -> "Expr":
        items = [(m, c) for m, c in coeffs.items() if c != 0]
        items.sort(key=lambda mc: (len(mc[0]) == 0, _mono_key(mc[0])))
        return cls(tuple(items))

    @classmethod
    def const(cls, value: int) -> "Expr":
        return cls._from_map({(): int(value)})

    @classmethod
    def symbol(cls, name: str) -> "Expr":
        return cls._from_map({(name,): 1})

    @classmethod
    def atom(cls, atom) -> "Expr":
        return cls._from_map({(atom,): 1})

    # -- inspection --------------------------------------------------------

    @property
    def key(self):
        if self._key is None:
            object.__setattr__(
                self, "_key", tuple((_mono_key(m), c) for m, c in self.terms)
            )
        return self._key

    def is_const(self) -> bool:
        return all(not m for m, _ in self.terms)

    def const_value(self) -> int:
        if not self.is_const():
            raise SymbolicError(f"{render(self)} is not a literal")
        return self.terms[0][1] if self.terms else 0

    def constant_term(self) -> int:
        for m, c in self.terms:
            if not m:
                return c
        return 0

    def symbols(self) -> set:
        out = set()
        for m, _ in self.terms:
            for a in m:
                if isinstance(a, str):
                    out.add(a)
                else:
                    for arg in a.args:
                        out |= arg.symbols()
        return out

    def _as_map(self) -> dict:
        return dict(self.terms)

    # -- arithmetic --------------------------------------------------------

    def __add__(self, other):
        other = as_expr(other)
        acc = self._as_map()
        for m, c in other.terms:
            acc[m] = acc.get(m, 0) + c
        return Expr._from_map(acc)

    __radd__ = __add__

    def __neg__(self):
        return Expr(tuple((m, -c) for m, c in self.terms))

    def __sub__(self, other):
        return self + (-as_expr(other))

    def __rsub__(self, other):
        return as_expr(other) - self

    def __mul__(self, other):
        other = as_expr(other)
        acc: dict = {}
        for m1, c1 in self.terms:
            for m2, c2 in other.terms:
                m = _mono_mul(m1, m2)
                acc[m] = acc.get(m, 0) + c1 * c2
        return Expr._from_map(acc)

    __rmul__ = __mul__

    def __floordiv__(self, other):
        return floordiv(self, other)

    def __eq__(self, other):
        if isinstance(other, int):
            other = Expr.const(other)
        return isinstance(other, Expr) and self.terms == other.terms

    def __hash__(self):
        if self._hash is None:
            object.__setattr__(self, "_hash", hash(self.terms))
        return self._hash

    def __repr__(self):
        return f"Expr({render(self)})"

    def __str__(self):
        return render(self)


def as_expr(x) -> Expr:
    if isinstance(x, Expr):
        return x
    if isinstance(x, bool) or not isinstance(x, int):
        raise TypeError(f"cannot convert {x!r} to Expr")
    return Expr.const(x)


def normalize(e: Expr) -> Expr:
    """Re-canonicalize ``e`` bottom-up (folding opaque atoms whose arguments
    have become simplifiable).  Idempotent."""
    acc = Expr.const(0)
    for m, c in e.terms:
        term = Expr.const(c)
        for a in m:
            if isinstance(a, str):
                term = term * Expr.symbol(a)
            else:
                x, y = (normalize(arg) for arg in a.args)
                term = term * _OPAQUE_BUILDERS[a.kind](x, y)
        acc = acc + term
    return acc


def _divide_monomial(m, d):
    """Return m / d as a monomial, or None if d does not divide m."""
    rest = list(m)
    for a in d:
        if a in rest:
            rest.remove(a)
        else:
            return None
    return tuple(rest)


def floordiv(a, b) -> Expr:
    a, b = as_expr(a), as_expr(b)
    if b.is_const():
        c = b.const_value()
        if c == 0:
            raise SymbolicError("division by zero")
        if a.is_const():
            return Expr.const(a.const_value() // c)
        if c == 1:
            return a
        if c > 0:
            k = a.constant_term()
            rest = a - k
            if all(coef % c == 0 for _, coef in rest.terms):
                return Expr._from_map({m: coef // c for m, coef in rest.terms}) + k // c
        return Expr.atom(Opaque("floordiv", (a, b)))
    if a == b and (lower_bound(b) or 0) >= 1:
        return Expr.const(1)
    if len(b.terms) == 1:
        (dm, dc), = b.terms
        if dc > 0:
            quotient = {}
            for m, coef in a.terms:
                q = _divide_monomial(m, dm)
                if q is None or coef % dc:
                    break
                quotient[q] = coef // dc
            else:
                return Expr._from_map(quotient)
    return Expr.atom(Opaque("floordiv", (a, b)))


def _minmax(kind: str, a, b) -> Expr:
    a, b = as_expr(a), as_expr(b)
    if a.is_const() and b.is_const():
        pick = max if kind == "max" else min
        return Expr.const(pick(a.const_value(), b.const_value()))
    if a == b:
        return a
    sign = compare_sign(a - b)
    if sign is Sign.NONNEG:
        return a if kind == "max" else b
    if sign is Sign.NONPOS:
        return b if kind == "max" else a
    x, y = sorted((a, b), key=lambda e: e.key)
    return Expr.atom(Opaque(kind, (x, y)))


def sym_max(a, b) -> Expr:
    return _minmax("max", a, b)


def sym_min(a, b) -> Expr:
    return _minmax("min", a, b)


_OPAQUE_BUILDERS = {"floordiv": floordiv, "max": sym_max, "min": sym_min}


def evaluate(e: Expr, env: Mapping[str, int]) -> int:
    e = as_expr(e)
    total = 0
    for m, c in e.terms:
        v = c
        for a in m:
            v *= _eval_atom(a, env)
        total += v
    return total


def _eval_atom(a, env) -> int:
    if isinstance(a, str):
        try:
            return int(env[a])
        except KeyError:
            raise SymbolicError(f"unbound symbol {a!r}") from None
    x, y = (evaluate(arg, env) for arg in a.args)
    if a.kind == "floordiv":
        if y == 0:
            raise SymbolicError("division by zero")
        return x // y
    return max(x, y) if a.kind == "max" else min(x, y)


# ---------------------------------------------------------------------------
# Sign reasoning
# ---------------------------------------------------------------------------


class Sign(enum.Enum):
    NONNEG = "always-nonnegative"
    NONPOS = "always-nonpositive"
    INDETERMINATE = "indeterminate"


_MAX_SHIFT_DEGREE = 12


def _atom_lower(a):
    if isinstance(a, str):
        return 1
    x, y = a.args
    if a.kind == "floordiv":
        lx = lower_bound(x)
        if lx is None or lx < 0:
            return None
        if y.is_const() and y.const_value() > 0:
            return lx // y.const_value()
        ly = lower_bound(y)
        return 0 if ly is not None and ly >= 1 else None
    lows = [lower_bound(x), lower_bound(y)]
    if a.kind == "max":
        known = [v for v in lows if v is not None]
        return max(known) if known else None
    if None in lows:
        return None
    return min(lows)


def lower_bound(e: Expr):
    """A sound integer lower bound of ``e`` over all symbol values >= 1, or
    None if none can be established.

    Each atom ``x`` with lower bound ``l`` is rewritten as ``l + y`` with
    ``y >= 0``; when every non-constant coefficient of the expanded
    polynomial is nonnegative the constant term is a lower bound.
    """
    e = as_expr(e)
    shifted: dict = {}
    for m, c in e.terms:
        if len(m) > _MAX_SHIFT_DEGREE:
            return None
        lows = []
        for a in m:
            low = _atom_lower(a)
            if low is None:
                return None
            lows.append(low)
        for picks in itertools.product((False, True), repeat=len(m)):
            coef = c
            ys = []
            for a, low, as_var in zip(m, lows, picks):
                if as_var:
                    ys.append(_atom_key(a))
                else:
                    coef *= low
            if coef:
                k = tuple(sorted(ys))
                shifted[k] = shifted.get(k, 0) + coef
    if any(c < 0 for k, c in shifted.items() if k):
        return None
    return shifted.get((), 0)


def compare_sign(e) -> Sign:
    e = as_expr(e)
    low = lower_bound(e)
    if low is not None and low >= 0:
        return Sign.NONNEG
    neg_low = lower_bound(-e)
    if neg_low is not None and neg_low >= 0:
        return Sign.NONPOS
    return Sign.INDETERMINATE


# ---------------------------------------------------------------------------
# Rendering and parsing
# ---------------------------------------------------------------------------


def _render_atom(a) -> str:
    if isinstance(a, str):
        return a
    x, y = (render(arg) for arg in a.args)
    if a.kind == "floordiv":
        return f"({x}//{y})"
    return f"{a.kind}({x},{y})"


def _render_term(m, c) -> str:
    factors = [_render_atom(a) for a in m]
    if c != 1 or not factors:
        factors.insert(0, str(c))
    out = factors[0]
    for f in factors[1:]:
        out = f"({out}*{f})"
    return out


def render(e) -> str:
    """Fully parenthesized infix, e.g. ``((2*N)+1)``."""
    e = as_expr(e)
    if not e.terms:
        return "0"
    pos = [(m, c) for m, c in e.terms if c > 0]
    neg = [(m, -c) for m, c in e.terms if c < 0]
    if pos:
        out = _render_term(*pos[0])
        rest = [("+", t) for t in pos[1:]]
    else:
        out = f"(-{_render_term(*neg[0])})"
        neg = neg[1:]
        rest = []
    rest += [("-", t) for t in neg]
    for op, t in rest:
        out = f"({out}{op}{_render_term(*t)})"
    return out


_TOKEN = re.compile(r"\s*(?:(\d+)|([A-Za-z_$][A-Za-z0-9_$]*)|(//|[-+*(),]))")


def _tokenize(text: str):
    pos, out = 0, []
    text = text.rstrip()
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if not m:
            raise SymbolicError(f"bad expression {text!r} at offset {pos}")
        num, name, op = m.groups()
        out.append(("int", int(num)) if num else ("name", name) if name else ("op", op))
        pos = m.end()
    return out


class _Parser:
    def __init__(self, text):
        self.text = text
        self.toks = _tokenize(text)
        self.i = 0

    def peek(self):
        return self.toks[self.i] if self.i < len(self.toks) else (None, None)

    def take(self, kind=None, value=None):
        tok = self.peek()
        if tok[0] is None or (kind and tok[0] != kind) or (value and tok[1] != value):
            raise SymbolicError(f"bad expression {self.text!r}")
        self.i += 1
        return tok

    def parse(self):
        e = self.expr()
        if self.i != len(self.toks):
            raise SymbolicError(f"trailing input in {self.text!r}")
        return e

    def expr(self):
        e = self.term()
        while self.peek() in (("op", "+"), ("op", "-")):
            op = self.take()[1]
            rhs = self.term()
            e = e + rhs if op == "+" else e - rhs
        return e

    def term(self):
        e = self.unary()
        while self.peek() in (("op", "*"), ("op", "//")):
            op = self.take()[1]
            rhs = self.unary()
            e = e * rhs if op == "*" else floordiv(e, rhs)
        return e

    def unary(self):
        if self.peek() == ("op", "-"):
            self.take()
            return -self.unary()
        return self.atom()

    def atom(self):
        kind, val = self.peek()
        if kind == "int":
            self.take()
            return Expr.const(val)
        if kind == "name":
            self.take()
            if val in ("max", "min") and self.peek() == ("op", "("):
                self.take()
                a = self.expr()
                self.take("op", ",")
                b = self.expr()
                self.take("op", ")")
                return _minmax(val, a, b)
            return Expr.symbol(val)
        self.take("op", "(")
        e = self.expr()
        self.take("op", ")")
        return e


def parse_expr(text: str) -> Expr:
    return _Parser(text).parse()


# ---------------------------------------------------------------------------
# Lattice
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class _Undef:
    def __repr__(self):
        return "UNDEF"


@dataclass(frozen=True)
class _Nac:
    def __repr__(self):
        return "NAC"


UNDEF = _Undef()
NAC = _Nac()


@dataclass(frozen=True)
class Known:
    value: int

    def __repr__(self):
        return f"Known({self.value})"


@dataclass(frozen=True)
class Sym:
    expr: Expr

    def __post_init__(self):
        if self.expr.is_const():
            raise SymbolicError("literal-only Sym must be folded to Known")

    def __repr__(self):
        return f"Sym({render(self.expr)})"


DimValue = Union[_Undef, _Nac, Known, Sym]


def dim(x) -> DimValue:
    """Coerce an int, Expr, symbol name or DimValue into a DimValue."""
    if isinstance(x, (_Undef, _Nac, Known, Sym)):
        return x
    if isinstance(x, str):
        return parse_dim(x)
    e = as_expr(x)
    return Known(e.const_value()) if e.is_const() else Sym(e)


def is_resolved(d) -> bool:
    return isinstance(d, (Known, Sym))


def to_expr(d) -> Expr:
    if isinstance(d, Known):
        return Expr.const(d.value)
    if isinstance(d, Sym):
        return d.expr
    raise SymbolicError(f"{d!r} has no expression")


def meet(a: DimValue, b: DimValue) -> DimValue:
    if a is UNDEF or a == UNDEF:
        return b
    if b == UNDEF:
        return a
    if a == b:
        return a
    return NAC


_HEIGHT = {_Undef: 2, Known: 1, Sym: 1, _Nac: 0}


def height(d) -> int:
    return _HEIGHT[type(d)]


def leq(a: DimValue, b: DimValue) -> bool:
    """Lattice order: a <= b iff meet(a, b) == a."""
    return meet(a, b) == a


_ARITH = {
    "add": lambda x, y: x + y,
    "sub": lambda x, y: x - y,
    "mul": lambda x, y: x * y,
    "floordiv": floordiv,
    "max": sym_max,
    "min": sym_min,
}


def apply(op: str, a: DimValue, b: DimValue) -> DimValue:
    if op not in _ARITH:
        raise SymbolicError(f"unknown arithmetic kind {op!r}")
    if a == NAC or b == NAC:
        return NAC
    if a == UNDEF or b == UNDEF:
        return UNDEF
    if op == "floordiv" and b == Known(0):
        raise SymbolicError("division by known zero")
    return dim(_ARITH[op](to_expr(a), to_expr(b)))


def render_dim(d) -> str:
    if d == UNDEF:
        return "undef"
    if d == NAC:
        return "nac"
    if isinstance(d, Known):
        return str(d.value)
    return render(d.expr)


def parse_dim(text) -> DimValue:
    if isinstance(text, int):
        return Known(text)
    t = text.strip()
    if t in ("undef", "?"):
        return UNDEF
    if t == "nac":
        return NAC
    return dim(parse_expr(t))


# Entries of the shape and value maps: UNDEF (rank unknown), NAC (rank not a
# constant) or a tuple of DimValues.


def meet_entry(a, b):
    if a == UNDEF:
        return b
    if b == UNDEF:
        return a
    if a == NAC or b == NAC or len(a) != len(b):
        return NAC
    return tuple(meet(x, y) for x, y in zip(a, b))


def entry_leq(a, b) -> bool:
    return meet_entry(a, b) == a


def render_entry(e) -> str:
    if e == UNDEF:
        return "undef"
    if e == NAC:
        return "nac"
    return "[" + ", ".join(render_dim(d) for d in e) + "]"


def entry_has(e, pred) -> bool:
    if e == UNDEF or e == NAC:
        return False
    return any(pred(d) for d in e)


def entry_has_undef(e) -> bool:
    return e == UNDEF or entry_has(e, lambda d: d == UNDEF)


def entry_has_nac(e) -> bool:
    return e == NAC or entry_has(e, lambda d: d == NAC)


# ---------------------------------------------------------------------------
# Symbol namespace
# ---------------------------------------------------------------------------

INPUT_SYMBOL = "input"
ANALYSIS_SYMBOL = "analysis"


class SymbolTable:
    """Symbol name -> role.  Analysis symbols start with ``$`` and therefore
    cannot collide with declared input symbols."""

    def __init__(self, inputs=()):
        self._roles: dict = {}
        self._origins: dict = {}
        self._counter = 0
        self._lock = threading.Lock()
        for name in inputs:
            self.declare_input(name)

    def declare_input(self, name: str):
        if name.startswith("$"):
            raise SymbolicError(f"input symbol {name!r} may not start with '$'")
        with self._lock:
            if name in self._roles:
                raise SymbolicError(f"duplicate symbol {name!r}")
            self._roles[name] = INPUT_SYMBOL

    def analysis_symbol(self, node_id: str, index: int, tensor: str | None = None) -> str:
        name = f"${node_id}_{index}"
        with self._lock:
            self._roles.setdefault(name, ANALYSIS_SYMBOL)
            self._origins.setdefault(name, (node_id, tensor, index))
        return name

    def fresh(self) -> str:
        with self._lock:
            while True:
                self._counter += 1
                name = f"$t{self._counter}"
                if name not in self._roles:
                    self._roles[name] = ANALYSIS_SYMBOL
                    return name

    def role(self, name: str) -> str:
        return self._roles[name]

    def origin(self, name: str):
        """(node id, tensor, element index) an analysis symbol stands for."""
        return self._origins.get(name)

    def inputs(self) -> list:
        return [n for n, r in self._roles.items() if r == INPUT_SYMBOL]

    def analysis(self) -> list:
        return [n for n, r in self._roles.items() if r == ANALYSIS_SYMBOL]

    def __contains__(self, name):
        return name in self._roles

    def __iter__(self):
        return iter(self._roles)
