"""Operator catalog: dynamism classes and lattice transfer functions.

Every operator carries a forward transfer (output shapes and, for small
integer tensors, output values) and a backward transfer that proposes input
shapes from output shapes.  Shape-map and value-map entries are ``UNDEF``,
``NAC`` or a tuple of DimValues (see :mod:`dyndag.symbolic`).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Callable, Optional

from .symbolic import (
    NAC,
    UNDEF,
    Known,
    Sign,
    SymbolicError,
    apply,
    compare_sign,
    is_resolved,
    meet,
    render_dim,
    to_expr,
)

INT_DTYPES = ("i64", "i32")
FLOAT_DTYPES = ("f32", "f16")
# Slice bounds at or beyond this magnitude mean "to the end".
SLICE_INF = 2**31 - 1


class DynClass(enum.Enum):
    ISDO = "ISDO"
    ISDOS = "ISDOS"
    ISVDOS = "ISVDOS"
    EDO = "EDO"

    @property
    def long_name(self) -> str:
        return _LONG_NAMES[self]


_LONG_NAMES = {
    DynClass.ISDO: "Input Shape Determined Output",
    DynClass.ISDOS: "Input Shape Determined Output Shape",
    DynClass.ISVDOS: "Input Shape & Value Determined Output Shape",
    DynClass.EDO: "Execution Determined Output",
}


class AnalysisError(Exception):
    """A static contradiction detected while analyzing a node."""

    def __init__(self, node_id, message, values=()):
        self.node_id = node_id
        self.values = tuple(values)
        super().__init__(f"node {node_id}: {message}")


class _Bottom(Exception):
    """Raised inside a shape function when every output is nac."""


@dataclass(frozen=True)
class OpSpec:
    name: str
    dyn_class: DynClass
    inputs: tuple  # (min, max); max None = variadic
    outputs: tuple
    attrs: Optional[dict]  # name -> "int" | "ints" | "str"; None = unchecked
    shape_fn: Callable
    value_fn: Optional[Callable] = None
    backward_fn: Optional[Callable] = None
    dtype_fn: Optional[Callable] = None
    shape_inputs: tuple = ()
    required: Optional[tuple] = None  # input indices whose shapes must be known
    fuse_kind: str = "none"

    def __post_init__(self):
        if bool(self.shape_inputs) != (self.dyn_class is DynClass.ISVDOS):
            raise ValueError(f"{self.name}: shape_inputs iff ISVDOS")

    def arity_ok(self, n_in: int, n_out: int) -> bool:
        lo, hi = self.inputs
        olo, ohi = self.outputs
        return lo <= n_in and (hi is None or n_in <= hi) and olo <= n_out and (
            ohi is None or n_out <= ohi
        )

    def out_dtypes(self, node, in_dtypes) -> list:
        if self.dtype_fn is not None:
            return list(self.dtype_fn(node, in_dtypes))
        first = in_dtypes[0] if in_dtypes else "f32"
        return [first] * len(node.outputs)


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _attr(node, key, default=None):
    return node.attrs.get(key, default)


def _tuple(entry):
    if entry == NAC:
        raise _Bottom
    return entry


def _norm_axis(node, axis, rank):
    a = axis + rank if axis < 0 else axis
    if not 0 <= a < max(rank, 1):
        raise AnalysisError(node.id, f"axis {axis} out of range for rank {rank}")
    return a


def _contradiction(node, what, a, b):
    raise AnalysisError(node.id, f"{what}: {render_dim(a)} vs {render_dim(b)}", (a, b))


def _same(node, a, b, what="dimension mismatch"):
    """Two dims the operator requires to be equal."""
    if isinstance(a, Known) and isinstance(b, Known) and a != b:
        _contradiction(node, what, a, b)
    return meet(a, b)


ONE = Known(1)


def bcast_dim(node, a, b):
    """Output extent of one broadcast dimension pair."""
    if a == b:
        return a
    if a == UNDEF or b == UNDEF:
        return UNDEF  # wait, so that refining either side never raises the result
    if a == ONE:
        return b
    if b == ONE:
        return a
    if isinstance(a, Known) and isinstance(b, Known):
        _contradiction(node, "broadcast mismatch", a, b)
    if isinstance(a, Known):
        return a
    if isinstance(b, Known):
        return b
    if a == NAC or b == NAC:
        return NAC
    # valid broadcasting of two symbolic extents always yields their max
    return apply("max", a, b)


def bcast_shapes(node, sa, sb):
    sa, sb = _tuple(sa), _tuple(sb)
    r = max(len(sa), len(sb))
    pa = (ONE,) * (r - len(sa)) + tuple(sa)
    pb = (ONE,) * (r - len(sb)) + tuple(sb)
    return tuple(bcast_dim(node, x, y) for x, y in zip(pa, pb))


def _product(dims):
    out = ONE
    for d in dims:
        out = apply("mul", out, d)
    return out


def _trackable(shape, dtype, cap):
    if shape in (UNDEF, NAC) or dtype not in INT_DTYPES or len(shape) > 1:
        return False
    if len(shape) == 0:
        return True
    n = shape[0]
    return isinstance(n, Known) and n.value <= cap


def _scalar(value):
    """The single element of a tracked scalar / length-1 value, or the
    UNDEF/NAC marker."""
    if value in (UNDEF, NAC):
        return value
    if len(value) != 1:
        return NAC
    return value[0]


def _values_ready(*values):
    for v in values:
        if v == UNDEF:
            return UNDEF
    for v in values:
        if v == NAC:
            return NAC
    return None


def _int_elements(node, value):
    out = []
    for d in value:
        if not isinstance(d, Known):
            return None
        out.append(d.value)
    return out


# ---------------------------------------------------------------------------
# shape functions (forward)
# ---------------------------------------------------------------------------


def _shape_of_shape(node, S, V):
    x = S[0]
    return [(Known(len(x)),) if x != NAC else (NAC,)]


def _value_shape(node, S, V, out):
    x = S[0]
    return [NAC if x == NAC else tuple(x)]


def _backward_shape_op(node, outS, outV, S, V):
    v = outV[0]
    if v in (UNDEF, NAC):
        return [None]
    return [tuple(v)]


def _dims_from_value(node, value, shape_of_value):
    """Interpret a tracked integer tensor as a list of output extents."""
    if value == UNDEF:
        return UNDEF
    if value == NAC:
        if shape_of_value not in (UNDEF, NAC) and len(shape_of_value) == 1:
            n = shape_of_value[0]
            if isinstance(n, Known):
                return (NAC,) * n.value
        raise _Bottom
    out = []
    for d in value:
        if isinstance(d, Known) and d.value < 0:
            raise AnalysisError(node.id, f"negative extent {d.value}")
        out.append(d)
    return tuple(out)


def _shape_constant_of_shape(node, S, V):
    return [_dims_from_value(node, V[0], S[0])]


def _value_constant_of_shape(node, S, V, out):
    shape = out[0]
    n = 1 if len(shape) == 0 else shape[0].value
    return [(Known(int(_attr(node, "value", 0))),) * n]


def _shape_identity(node, S, V):
    return [tuple(_tuple(S[0]))]


def _backward_identity(node, outS, outV, S, V):
    o = outS[0]
    return [None if o in (UNDEF, NAC) else tuple(o)] + [None] * (len(S) - 1)


def _value_passthrough(node, S, V, out):
    return [V[0]]


def _shape_binary(node, S, V):
    if int(_attr(node, "broadcast", 1)):
        return [bcast_shapes(node, S[0], S[1])]
    a, b = _tuple(S[0]), _tuple(S[1])
    if len(a) != len(b):
        raise AnalysisError(node.id, f"rank mismatch {len(a)} vs {len(b)} with broadcast=0")
    return [tuple(_same(node, x, y) for x, y in zip(a, b))]


_BINARY_KIND = {"Add": "add", "Sub": "sub", "Mul": "mul", "Div": "floordiv"}


def _value_binary(node, S, V, out):
    ready = _values_ready(V[0], V[1])
    if ready is not None:
        return [ready]
    a, b = V[0], V[1]
    n = max(len(a), len(b))
    if len(a) not in (1, n) or len(b) not in (1, n):
        return [NAC]
    kind = _BINARY_KIND[node.op]
    vals = []
    for i in range(n):
        x = a[i if len(a) > 1 else 0]
        y = b[i if len(b) > 1 else 0]
        try:
            vals.append(apply(kind, x, y))
        except SymbolicError:
            vals.append(NAC)
    return [tuple(vals)]


def _backward_binary(node, outS, outV, S, V):
    o = outS[0]
    if o in (UNDEF, NAC):
        return [None, None]
    if not int(_attr(node, "broadcast", 1)):
        return [tuple(o), tuple(o)]
    props = []
    for i in (0, 1):
        mine, other = S[i], S[1 - i]
        r = len(o) if mine in (UNDEF, NAC) else len(mine)
        if r > len(o):
            props.append(None)
            continue
        dims = []
        for j in range(r):
            od = o[len(o) - r + j]
            k = len(o) - r + j  # index aligned to output
            if od == ONE:
                dims.append(ONE)
                continue
            if other in (UNDEF, NAC):
                dims.append(UNDEF)
                continue
            oi = k - (len(o) - len(other))
            other_dim = other[oi] if oi >= 0 else ONE
            dims.append(od if other_dim == ONE else UNDEF)
        props.append(tuple(dims))
    return props


def _shape_transpose(node, S, V):
    x = _tuple(S[0])
    perm = _attr(node, "perm") or list(range(len(x)))[::-1]
    if sorted(perm) != list(range(len(x))):
        raise AnalysisError(node.id, f"bad perm {perm} for rank {len(x)}")
    return [tuple(x[p] for p in perm)]


def _backward_transpose(node, outS, outV, S, V):
    o = outS[0]
    if o in (UNDEF, NAC):
        return [None]
    perm = _attr(node, "perm") or list(range(len(o)))[::-1]
    if sorted(perm) != list(range(len(o))):
        return [None]
    dims = [UNDEF] * len(o)
    for i, p in enumerate(perm):
        dims[p] = o[i]
    return [tuple(dims)]


def _unsqueeze_axes(node, rank_out):
    return sorted(_norm_axis(node, a, rank_out) for a in _attr(node, "axes", [0]))


def _shape_unsqueeze(node, S, V):
    x = list(_tuple(S[0]))
    r = len(x) + len(_attr(node, "axes", [0]))
    for a in _unsqueeze_axes(node, r):
        x.insert(a, ONE)
    return [tuple(x)]


def _backward_unsqueeze(node, outS, outV, S, V):
    o = outS[0]
    if o in (UNDEF, NAC):
        return [None]
    axes = set(_unsqueeze_axes(node, len(o)))
    return [tuple(d for i, d in enumerate(o) if i not in axes)]


def _shape_squeeze(node, S, V):
    x = _tuple(S[0])
    axes = _attr(node, "axes")
    if axes is None:
        axes = [i for i, d in enumerate(x) if d == ONE]
    axes = {_norm_axis(node, a, len(x)) for a in axes}
    for a in axes:
        if isinstance(x[a], Known) and x[a] != ONE:
            _contradiction(node, "squeezed extent must be 1", x[a], ONE)
    return [tuple(d for i, d in enumerate(x) if i not in axes)]


def _shape_concat(node, S, V):
    shapes = [_tuple(s) for s in S]
    r = len(shapes[0])
    if any(len(s) != r for s in shapes):
        raise AnalysisError(node.id, "concat rank mismatch")
    axis = _norm_axis(node, int(_attr(node, "axis", 0)), r)
    out = []
    for i in range(r):
        if i == axis:
            d = shapes[0][i]
            for s in shapes[1:]:
                d = apply("add", d, s[i])
        else:
            d = shapes[0][i]
            for s in shapes[1:]:
                d = _same(node, d, s[i], "concat extent mismatch")
        out.append(d)
    return [tuple(out)]


def _value_concat(node, S, V, out):
    ready = _values_ready(*V)
    if ready is not None:
        return [ready]
    vals = []
    for v in V:
        vals.extend(v)
    return [tuple(vals)]


def _backward_concat(node, outS, outV, S, V):
    o = outS[0]
    if o in (UNDEF, NAC):
        return [None] * len(S)
    axis = int(_attr(node, "axis", 0))
    axis = axis + len(o) if axis < 0 else axis
    if not 0 <= axis < len(o):
        return [None] * len(S)
    props = []
    for i in range(len(S)):
        dims = list(o)
        rest = o[axis]
        for j, s in enumerate(S):
            if j == i:
                continue
            other = UNDEF if s in (UNDEF, NAC) or len(s) != len(o) else s[axis]
            rest = apply("sub", rest, other) if is_resolved(rest) else rest
            if not is_resolved(other):
                rest = UNDEF
        dims[axis] = rest
        props.append(tuple(dims))
    return props


def _spatial(node, x, kernel, pads, strides):
    out = []
    nsp = len(kernel)
    for i in range(nsp):
        d = x[i]
        pb, pe = pads[i], pads[i + nsp]
        num = apply("sub", apply("add", d, Known(pb + pe)), kernel[i])
        out.append(apply("add", apply("floordiv", num, Known(strides[i])), ONE))
    return out


def _conv_params(node, nsp):
    pads = _attr(node, "pads") or [0] * (2 * nsp)
    strides = _attr(node, "strides") or [1] * nsp
    if len(pads) != 2 * nsp or len(strides) != nsp or min(strides) < 1:
        raise AnalysisError(node.id, "bad pads/strides")
    return pads, strides


def _shape_conv(node, S, V):
    x, w = _tuple(S[0]), _tuple(S[1])
    if len(x) < 3 or len(w) != len(x):
        raise AnalysisError(node.id, f"conv rank mismatch {len(x)} vs {len(w)}")
    nsp = len(x) - 2
    pads, strides = _conv_params(node, nsp)
    group = int(_attr(node, "group", 1))
    _same(node, x[1], apply("mul", w[1], Known(group)), "conv channel mismatch")
    if len(S) > 2 and S[2] not in (UNDEF, NAC):
        if len(S[2]) != 1:
            raise AnalysisError(node.id, "conv bias must be rank 1")
        _same(node, S[2][0], w[0], "conv bias mismatch")
    return [(x[0], w[0], *_spatial(node, x[2:], list(w[2:]), pads, strides))]


def _backward_conv(node, outS, outV, S, V):
    o = outS[0]
    if o in (UNDEF, NAC) or len(o) < 3:
        return [None] * len(S)
    nsp = len(o) - 2
    pads = _attr(node, "pads") or [0] * (2 * nsp)
    strides = _attr(node, "strides") or [1] * nsp
    w = S[1]
    x_dims = [o[0], UNDEF]
    if w not in (UNDEF, NAC) and len(w) == len(o):
        x_dims[1] = apply("mul", w[1], Known(int(_attr(node, "group", 1))))
    for i in range(nsp):
        if strides[i] == 1 and w not in (UNDEF, NAC) and len(w) == len(o):
            k = w[2 + i]
            x_dims.append(apply("sub", apply("add", o[2 + i], k), Known(1 + pads[i] + pads[i + nsp])))
        else:
            x_dims.append(UNDEF)
    w_dims = (o[1],) + (UNDEF,) * (len(o) - 1)
    props = [tuple(x_dims), w_dims]
    if len(S) > 2:
        props.append((o[1],))
    return props


def _shape_pool(node, S, V):
    x = _tuple(S[0])
    kernel = _attr(node, "kernel_shape")
    if not kernel or len(x) != len(kernel) + 2:
        raise AnalysisError(node.id, "pool kernel_shape/rank mismatch")
    pads, strides = _conv_params(node, len(kernel))
    ks = [Known(k) for k in kernel]
    return [(x[0], x[1], *_spatial(node, x[2:], ks, pads, strides))]


def _backward_pool(node, outS, outV, S, V):
    o = outS[0]
    kernel = _attr(node, "kernel_shape") or []
    if o in (UNDEF, NAC) or len(o) != len(kernel) + 2:
        return [None]
    nsp = len(kernel)
    pads = _attr(node, "pads") or [0] * (2 * nsp)
    strides = _attr(node, "strides") or [1] * nsp
    dims = [o[0], o[1]]
    for i in range(nsp):
        if strides[i] == 1:
            dims.append(apply("add", o[2 + i], Known(kernel[i] - 1 - pads[i] - pads[i + nsp])))
        else:
            dims.append(UNDEF)
    return [tuple(dims)]


def _shape_matmul(node, S, V):
    a, b = _tuple(S[0]), _tuple(S[1])
    if len(a) < 2 or len(b) < 2:
        raise AnalysisError(node.id, "matmul operands must have rank >= 2")
    _same(node, a[-1], b[-2], "matmul inner dimension mismatch")
    batch = bcast_shapes(node, a[:-2], b[:-2])
    return [tuple(batch) + (a[-2], b[-1])]


def _backward_matmul(node, outS, outV, S, V):
    o = outS[0]
    if o in (UNDEF, NAC) or len(o) != 2:
        return [None, None]
    a, b = S
    k_from_b = b[-2] if b not in (UNDEF, NAC) and len(b) == 2 else UNDEF
    k_from_a = a[-1] if a not in (UNDEF, NAC) and len(a) == 2 else UNDEF
    return [(o[0], k_from_b), (k_from_a, o[1])]


def _shape_gather(node, S, V):
    data, idx = _tuple(S[0]), _tuple(S[1])
    axis = _norm_axis(node, int(_attr(node, "axis", 0)), len(data))
    return [tuple(data[:axis]) + tuple(idx) + tuple(data[axis + 1:])]


def _value_gather(node, S, V, out):
    ready = _values_ready(V[0], V[1])
    if ready is not None:
        return [ready]
    idx = _int_elements(node, V[1])
    if idx is None or len(S[0]) != 1:
        return [NAC]
    data = V[0]
    vals = []
    for i in idx:
        j = i + len(data) if i < 0 else i
        if not 0 <= j < len(data):
            raise AnalysisError(node.id, f"gather index {i} out of range {len(data)}")
        vals.append(data[j])
    return [tuple(vals)]


def _backward_gather(node, outS, outV, S, V):
    o = outS[0]
    data, idx = S
    if o in (UNDEF, NAC) or idx in (UNDEF, NAC) or data in (UNDEF, NAC):
        return [None, None]
    axis = int(_attr(node, "axis", 0))
    axis = axis + len(data) if axis < 0 else axis
    if len(o) != len(data) - 1 + len(idx) or not 0 <= axis < len(data):
        return [None, None]
    d = tuple(o[:axis]) + (UNDEF,) + tuple(o[axis + len(idx):])
    return [d, tuple(o[axis:axis + len(idx)])]


def _reduce_axes(node, rank):
    axes = _attr(node, "axes")
    if axes is None:
        return set(range(rank))
    return {_norm_axis(node, a, rank) for a in axes}


def _shape_reduce(node, S, V):
    x = _tuple(S[0])
    if node.op == "Softmax":
        return [tuple(x)]
    axes = _reduce_axes(node, len(x))
    keep = int(_attr(node, "keepdims", 1))
    out = []
    for i, d in enumerate(x):
        if i in axes:
            if keep:
                out.append(ONE)
        else:
            out.append(d)
    return [tuple(out)]


def _backward_reduce(node, outS, outV, S, V):
    o, x = outS[0], S[0]
    if o in (UNDEF, NAC):
        return [None]
    keep = int(_attr(node, "keepdims", 1))
    if keep:
        try:
            axes = _reduce_axes(node, len(o))
        except AnalysisError:
            return [None]
        return [tuple(UNDEF if i in axes else d for i, d in enumerate(o))]
    if x in (UNDEF, NAC):
        return [None]
    try:
        axes = _reduce_axes(node, len(x))
    except AnalysisError:
        return [None]
    it = iter(o)
    return [tuple(UNDEF if i in axes else next(it, UNDEF) for i in range(len(x)))]


def _reshape_target(node, value, shape_of_value):
    # reshape targets may hold the 0 (copy) and -1 (infer) markers
    if value in (UNDEF, NAC):
        return _dims_from_value(node, value, shape_of_value)
    for d in value:
        if isinstance(d, Known) and d.value < -1:
            raise AnalysisError(node.id, f"invalid reshape entry {d.value}")
    return tuple(value)


def _shape_reshape(node, S, V):
    target = _reshape_target(node, V[1], S[1])
    if target == UNDEF:
        return [UNDEF]
    data = S[0]
    out, wildcard = [], None
    for i, t in enumerate(target):
        if isinstance(t, Known) and t.value == 0:
            if data in (UNDEF, NAC) or i >= len(data):
                out.append(NAC if data == NAC else UNDEF)
            else:
                out.append(data[i])
        elif isinstance(t, Known) and t.value == -1:
            if wildcard is not None:
                raise AnalysisError(node.id, "reshape has more than one -1")
            wildcard = i
            out.append(UNDEF)
        else:
            out.append(t)
    if wildcard is not None:
        if data in (UNDEF, NAC):
            out[wildcard] = data
        else:
            rest = _product(d for i, d in enumerate(out) if i != wildcard)
            if rest == Known(0):
                raise AnalysisError(node.id, "reshape -1 with zero-sized remainder")
            out[wildcard] = apply("floordiv", _product(data), rest)
    return [tuple(out)]


def _shape_expand(node, S, V):
    target = _dims_from_value(node, V[1], S[1])
    if target == UNDEF:
        return [UNDEF]
    return [bcast_shapes(node, S[0], target)]


def _slice_extent(node, d, s, e, step):
    if not isinstance(step, Known):
        return NAC
    if step.value == 0:
        raise AnalysisError(node.id, "slice step 0")
    if all(isinstance(v, Known) for v in (d, s, e)):
        return Known(len(range(d.value)[s.value:e.value:step.value]))
    if step.value != 1 or not all(is_resolved(v) for v in (d, s, e)):
        if UNDEF in (d, s, e):
            return UNDEF
        return NAC

    def clamp(b, is_end):
        if isinstance(b, Known) and is_end and b.value >= SLICE_INF:
            return d
        if isinstance(b, Known) and not is_end and b.value <= -SLICE_INF:
            return Known(0)
        sign = compare_sign(to_expr(b))
        if sign is Sign.NONNEG:
            return apply("min", b, d)
        if sign is Sign.NONPOS:
            return apply("max", apply("add", d, b), Known(0))
        return NAC

    lo, hi = clamp(s, False), clamp(e, True)
    return apply("max", apply("sub", hi, lo), Known(0))


def _slice_args(node, S, V):
    starts, ends = V[1], V[2]
    axes = V[3] if len(V) > 3 else None
    steps = V[4] if len(V) > 4 else None
    return starts, ends, axes, steps


def _shape_slice(node, S, V):
    data = _tuple(S[0])
    starts, ends, axes, steps = _slice_args(node, S, V)
    n = None
    for v, s in ((starts, S[1]), (ends, S[2])):
        if v not in (UNDEF, NAC):
            n = len(v)
        elif s not in (UNDEF, NAC) and len(s) == 1 and isinstance(s[0], Known):
            n = s[0].value
    if n is None:
        raise _Bottom
    if axes is None:
        axes_l = list(range(n))
    elif axes in (UNDEF, NAC):
        return [(NAC,) * len(data)]
    else:
        axes_l = _int_elements(node, axes)
        if axes_l is None:
            return [(NAC,) * len(data)]
        axes_l = [_norm_axis(node, a, len(data)) for a in axes_l]
    out = list(data)
    for i, a in enumerate(axes_l):
        s = starts[i] if starts not in (UNDEF, NAC) else starts
        e = ends[i] if ends not in (UNDEF, NAC) else ends
        if steps is None:
            st = ONE
        elif steps in (UNDEF, NAC):
            st = steps
        else:
            st = steps[i]
        if UNDEF in (s, e, st):
            out[a] = UNDEF
        elif NAC in (s, e, st):
            out[a] = NAC
        else:
            out[a] = _slice_extent(node, data[a], s, e, st)
    return [tuple(out)]


def _value_slice(node, S, V, out):
    data = V[0]
    starts, ends, axes, steps = _slice_args(node, S, V)
    extra = [x for x in (axes, steps) if x is not None]
    ready = _values_ready(data, starts, ends, *extra)
    if ready is not None:
        return [ready]
    s, e = _int_elements(node, starts), _int_elements(node, ends)
    st = _int_elements(node, steps) if steps is not None else [1]
    if s is None or e is None or st is None or len(s) != 1 or 0 in st:
        return [NAC]
    return [tuple(data[s[0]:e[0]:st[0]])]


def _backward_slice(node, outS, outV, S, V):
    o = outS[0]
    if o in (UNDEF, NAC):
        return [None] * len(S)
    axes = V[3] if len(V) > 3 else None
    if axes is None:
        return [None] * len(S)
    axes_l = _int_elements(node, axes) if axes not in (UNDEF, NAC) else None
    if axes_l is None:
        return [None] * len(S)
    axes_l = {a + len(o) if a < 0 else a for a in axes_l}
    return [tuple(UNDEF if i in axes_l else d for i, d in enumerate(o))] + [None] * (len(S) - 1)


def _range_length(node, start, limit, delta):
    if isinstance(delta, Known):
        if delta.value == 0:
            raise AnalysisError(node.id, "range delta 0")
        if delta.value > 0:
            n = apply("floordiv", apply("add", apply("sub", limit, start), Known(delta.value - 1)), delta)
        else:
            k = Known(-delta.value)
            n = apply("floordiv", apply("add", apply("sub", start, limit), Known(k.value - 1)), k)
        return apply("max", n, Known(0))
    if isinstance(delta, type(NAC)) or delta == UNDEF:
        return delta
    if compare_sign(to_expr(delta) - 1) is Sign.NONNEG:
        n = apply("floordiv", apply("sub", apply("add", apply("sub", limit, start), delta), ONE), delta)
        return apply("max", n, Known(0))
    return NAC


def _shape_range(node, S, V):
    parts = [_scalar(v) for v in V[:3]]
    if UNDEF in parts:
        return [UNDEF]
    return [(_range_length(node, *parts),)]


def _value_range(node, S, V, out):
    start, limit, delta = (_scalar(v) for v in V[:3])
    n = out[0][0]
    if NAC in (start, delta) or UNDEF in (start, delta):
        return [NAC]
    return [tuple(apply("add", start, apply("mul", Known(i), delta)) for i in range(n.value))]


def _shape_resize(node, S, V):
    x = _tuple(S[0])
    sizes = _dims_from_value(node, V[1], S[1])
    if sizes == UNDEF:
        return [UNDEF]
    if len(sizes) != len(x):
        raise AnalysisError(node.id, "resize sizes rank mismatch")
    return [tuple(sizes)]


def _shape_upsample(node, S, V):
    x = _tuple(S[0])
    scales = _dims_from_value(node, V[1], S[1])
    if scales == UNDEF:
        return [UNDEF]
    if len(scales) != len(x):
        raise AnalysisError(node.id, "upsample scales rank mismatch")
    return [tuple(apply("mul", d, s) for d, s in zip(x, scales))]


def _backward_resize_like(node, outS, outV, S, V):
    o = outS[0]
    if o in (UNDEF, NAC):
        return [None] * len(S)
    return [(UNDEF,) * len(o)] + [None] * (len(S) - 1)


def _shape_topk(node, S, V):
    x = _tuple(S[0])
    axis = _norm_axis(node, int(_attr(node, "axis", -1)), len(x))
    k = _scalar(V[1])
    if k == UNDEF:
        return [UNDEF, UNDEF]
    if isinstance(k, Known) and isinstance(x[axis], Known) and k.value > x[axis].value:
        _contradiction(node, "topk k exceeds extent", k, x[axis])
    out = tuple(k if i == axis else d for i, d in enumerate(x))
    return [out, out]


def _backward_topk(node, outS, outV, S, V):
    o = outS[0]
    if o in (UNDEF, NAC):
        return [None, None]
    axis = int(_attr(node, "axis", -1))
    axis = axis + len(o) if axis < 0 else axis
    return [tuple(UNDEF if i == axis else d for i, d in enumerate(o)), None]


def _shape_nonzero(node, S, V):
    x = S[0]
    rank = Known(len(x)) if x != NAC else NAC
    return [(rank, NAC)]


def _shape_switch(node, S, V):
    x = S[0]
    return [x] * len(node.outputs)


def _value_switch(node, S, V, out):
    return [V[0]] * len(node.outputs)


def _shape_combine(node, S, V):
    from .symbolic import meet_entry

    out = S[0]
    for s in S[1:]:
        out = meet_entry(out, s)
    return [out]


def _value_combine(node, S, V, out):
    from .symbolic import meet_entry

    v = V[0]
    for x in V[1:]:
        v = meet_entry(v, x)
    return [v]


def _shape_opaque(node, S, V):
    ranks = _attr(node, "ranks")
    if ranks is None:
        raise _Bottom
    return [(NAC,) * r for r in ranks]


def _shape_nms(node, S, V):
    return [(NAC, Known(3))]


# ---------------------------------------------------------------------------
# dtype rules
# ---------------------------------------------------------------------------


def _dt_i64(node, ins):
    return ["i64"] * len(node.outputs)


def _dt_cast(node, ins):
    return [_attr(node, "to", "f32")]


def _dt_attr(default):
    def rule(node, ins):
        return [_attr(node, "dtype", default if default else (ins[0] if ins else "f32"))] * len(node.outputs)

    return rule


def _dt_topk(node, ins):
    return [ins[0], "i64"]


def _dt_opaque(node, ins):
    dts = _attr(node, "dtypes")
    return list(dts) if dts else ["f32"] * len(node.outputs)


# ---------------------------------------------------------------------------
# catalog
# ---------------------------------------------------------------------------

_ANY = (0, None)
_V = None  # variadic marker

CATALOG: dict = {}


def _reg(spec: OpSpec):
    CATALOG[spec.name] = spec


_ISDO, _ISDOS, _ISVDOS, _EDO = DynClass.ISDO, DynClass.ISDOS, DynClass.ISVDOS, DynClass.EDO

_reg(OpSpec("Shape", _ISDO, (1, 1), (1, 1), {}, _shape_of_shape, _value_shape,
            _backward_shape_op, _dt_i64))
_reg(OpSpec("ConstantOfShape", _ISDO, (1, 1), (1, 1), {"value": "int", "dtype": "str"},
            _shape_constant_of_shape, _value_constant_of_shape, None, _dt_attr("f32")))
_reg(OpSpec("EyeLike", _ISDO, (1, 1), (1, 1), {"dtype": "str", "k": "int"},
            lambda n, S, V: [tuple(_tuple(S[0]))] if len(_tuple(S[0])) == 2
            else (_ for _ in ()).throw(AnalysisError(n.id, "EyeLike needs rank 2")),
            None, _backward_identity, _dt_attr(None)))

for _name in ("Add", "Sub", "Mul", "Div"):
    _reg(OpSpec(_name, _ISDOS, (2, 2), (1, 1), {"broadcast": "int"}, _shape_binary,
                _value_binary, _backward_binary, fuse_kind="elementwise"))

for _name in ("Relu", "Sigmoid", "Round"):
    _reg(OpSpec(_name, _ISDOS, (1, 1), (1, 1), {}, _shape_identity, None,
                _backward_identity, fuse_kind="elementwise"))
_reg(OpSpec("Cast", _ISDOS, (1, 1), (1, 1), {"to": "str"}, _shape_identity,
            _value_passthrough, _backward_identity, _dt_cast, fuse_kind="elementwise"))
_reg(OpSpec("Softmax", _ISDOS, (1, 1), (1, 1), {"axis": "int"}, _shape_reduce, None,
            _backward_identity, fuse_kind="reduction"))
_reg(OpSpec("Transpose", _ISDOS, (1, 1), (1, 1), {"perm": "ints"}, _shape_transpose, None,
            _backward_transpose))
_reg(OpSpec("Unsqueeze", _ISDOS, (1, 1), (1, 1), {"axes": "ints"}, _shape_unsqueeze,
            _value_passthrough, _backward_unsqueeze))
_reg(OpSpec("Squeeze", _ISDOS, (1, 1), (1, 1), {"axes": "ints"}, _shape_squeeze,
            _value_passthrough))
_reg(OpSpec("Concat", _ISDOS, (1, None), (1, 1), {"axis": "int"}, _shape_concat,
            _value_concat, _backward_concat))
_reg(OpSpec("Conv", _ISDOS, (2, 3), (1, 1), {"pads": "ints", "strides": "ints", "group": "int"},
            _shape_conv, None, _backward_conv, fuse_kind="heavy"))
for _name in ("MaxPool", "AveragePool"):
    _reg(OpSpec(_name, _ISDOS, (1, 1), (1, 1),
                {"kernel_shape": "ints", "pads": "ints", "strides": "ints"},
                _shape_pool, None, _backward_pool, fuse_kind="heavy"))
_reg(OpSpec("MatMul", _ISDOS, (2, 2), (1, 1), {}, _shape_matmul, None, _backward_matmul,
            fuse_kind="heavy"))
_reg(OpSpec("Gather", _ISDOS, (2, 2), (1, 1), {"axis": "int"}, _shape_gather, _value_gather,
            _backward_gather))
for _name in ("ReduceSum", "ReduceMean", "ReduceMax"):
    _reg(OpSpec(_name, _ISDOS, (1, 1), (1, 1), {"axes": "ints", "keepdims": "int"},
                _shape_reduce, None, _backward_reduce, fuse_kind="reduction"))

_reg(OpSpec("Reshape", _ISVDOS, (2, 2), (1, 1), {}, _shape_reshape, _value_passthrough,
            None, shape_inputs=(1,), required=(0,)))
_reg(OpSpec("Slice", _ISVDOS, (3, 5), (1, 1), {}, _shape_slice, _value_slice, _backward_slice,
            shape_inputs=(1, 2, 3, 4), required=(0,)))
_reg(OpSpec("Expand", _ISVDOS, (2, 2), (1, 1), {}, _shape_expand, None, None,
            shape_inputs=(1,), required=(0,)))
_reg(OpSpec("Range", _ISVDOS, (3, 3), (1, 1), {}, _shape_range, _value_range, None,
            _dt_attr(None), shape_inputs=(0, 1, 2), required=()))
_reg(OpSpec("Resize", _ISVDOS, (2, 2), (1, 1), {"mode": "str"}, _shape_resize, None,
            _backward_resize_like, shape_inputs=(1,), required=(0,)))
_reg(OpSpec("Upsample", _ISVDOS, (2, 2), (1, 1), {"mode": "str"}, _shape_upsample, None,
            _backward_resize_like, shape_inputs=(1,), required=(0,)))
_reg(OpSpec("TopK", _ISVDOS, (2, 2), (2, 2), {"axis": "int"}, _shape_topk, None,
            _backward_topk, _dt_topk, shape_inputs=(1,), required=(0,)))

_reg(OpSpec("NonZero", _EDO, (1, 1), (1, 1), {}, _shape_nonzero, None, None, _dt_i64))
_reg(OpSpec("Switch", _EDO, (2, 2), (2, None), {}, _shape_switch, _value_switch, None,
            lambda n, ins: [ins[0]] * len(n.outputs), required=(0,), fuse_kind="control"))
_reg(OpSpec("Combine", _EDO, (2, None), (1, 1), {}, _shape_combine, _value_combine, None,
            fuse_kind="control"))
_reg(OpSpec("NonMaxSuppression", _EDO, (2, 5), (1, 1), None, _shape_nms, None, None, _dt_i64))
_reg(OpSpec("Loop", _EDO, _ANY, (1, None), None, _shape_opaque, None, None, _dt_opaque,
            required=()))
_reg(OpSpec("If", _EDO, (1, None), (1, None), None, _shape_opaque, None, None, _dt_opaque,
            required=()))

OPAQUE = OpSpec("<opaque>", _EDO, _ANY, (1, None), None, _shape_opaque, None, None, _dt_opaque,
                required=())


def lookup(op: str, opaque: bool = False) -> OpSpec:
    spec = CATALOG.get(op)
    if spec is not None:
        return spec
    if opaque:
        return OPAQUE
    raise KeyError(f"unknown operator {op!r}")


# ---------------------------------------------------------------------------
# classification and transfer entry points
# ---------------------------------------------------------------------------


def classify(node, const_env) -> DynClass:
    """Effective dynamism class of ``node``.

    ``const_env`` maps tensor names to True when the tensor is a constant
    with an integer payload.  An ISVDOS node whose shape-determining inputs
    are all such constants behaves as ISDOS.
    """
    spec = lookup(node.op, getattr(node, "opaque", False))
    if spec.dyn_class is not DynClass.ISVDOS:
        return spec.dyn_class
    present = [i for i in spec.shape_inputs if i < len(node.inputs)]
    if all(const_env.get(node.inputs[i], False) for i in present):
        return DynClass.ISDOS
    return DynClass.ISVDOS


def forward(spec: OpSpec, node, in_shapes, in_values, out_dtypes, cap=32):
    """Forward transfer.  Returns ``(out_shapes, out_values)``."""
    n_out = len(node.outputs)
    required = spec.required if spec.required is not None else range(len(in_shapes))
    if any(in_shapes[i] == UNDEF for i in required if i < len(in_shapes)):
        return [UNDEF] * n_out, [UNDEF] * n_out
    if any(in_values[i] == UNDEF for i in spec.shape_inputs if i < len(in_values)):
        return [UNDEF] * n_out, [UNDEF] * n_out
    try:
        shapes = list(spec.shape_fn(node, list(in_shapes), list(in_values)))
    except _Bottom:
        shapes = [NAC] * n_out
    except SymbolicError as exc:
        raise AnalysisError(node.id, str(exc)) from exc
    values = [UNDEF if s == UNDEF else NAC for s in shapes]
    if spec.value_fn is not None and any(
        _trackable(s, dt, cap) for s, dt in zip(shapes, out_dtypes)
    ):
        try:
            computed = spec.value_fn(node, list(in_shapes), list(in_values), shapes)
        except _Bottom:
            computed = [NAC] * n_out
        for i, (s, dt) in enumerate(zip(shapes, out_dtypes)):
            if not _trackable(s, dt, cap) or i >= len(computed):
                continue
            v = computed[i]
            expected = 1 if len(s) == 0 else s[0].value
            if v in (UNDEF, NAC) or len(v) == expected:
                values[i] = v
            else:
                values[i] = NAC
    return shapes, values


def forward_shape(spec, node, in_shapes, in_values, out_dtypes=None, cap=32):
    out_dtypes = out_dtypes or ["f32"] * len(node.outputs)
    return forward(spec, node, in_shapes, in_values, out_dtypes, cap)[0]


def forward_value(spec, node, in_shapes, in_values, out_dtypes=None, cap=32):
    out_dtypes = out_dtypes or ["i64"] * len(node.outputs)
    return forward(spec, node, in_shapes, in_values, out_dtypes, cap)[1]


def backward(spec: OpSpec, node, out_shapes, out_values, in_shapes, in_values):
    """Proposed input shapes (None where the operator has nothing to say).
    The caller merges proposals into Undef entries only."""
    if spec.backward_fn is None:
        return [None] * len(in_shapes)
    try:
        props = list(spec.backward_fn(node, list(out_shapes), list(out_values),
                                      list(in_shapes), list(in_values)))
    except (_Bottom, SymbolicError):
        return [None] * len(in_shapes)
    return props + [None] * (len(in_shapes) - len(props))


def backward_shape(spec, node, out_shapes, in_shapes, out_values=None, in_values=None):
    out_values = out_values or [UNDEF] * len(out_shapes)
    in_values = in_values or [UNDEF] * len(in_shapes)
    props = backward(spec, node, out_shapes, out_values, in_shapes, in_values)
    return [fill_undef(s, p) for s, p in zip(in_shapes, props)]


def fill_undef(old, proposed):
    """Refine only the Undef parts of ``old`` with ``proposed``."""
    if proposed is None or old == NAC:
        return old
    if old == UNDEF:
        return tuple(proposed)
    if len(old) != len(proposed):
        return old
    return tuple(p if o == UNDEF else o for o, p in zip(old, proposed))


def catalog_table() -> list:
    rows = []
    for name in sorted(CATALOG):
        spec = CATALOG[name]
        rows.append({
            "op": name,
            "class": spec.dyn_class.value,
            "class_name": spec.dyn_class.long_name,
            "inputs": [spec.inputs[0], spec.inputs[1]],
            "outputs": [spec.outputs[0], spec.outputs[1]],
            "shape_input_indices": list(spec.shape_inputs),
        })
    return rows
