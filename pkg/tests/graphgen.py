"""Random graph generators for property and acceptance tests.

Shapes are tracked with a small template of per-dimension tokens so every
generated graph is well-formed and executes in the interpreter.  Dims are
ints, symbol names, or opaque tokens for data-dependent extents; derived
dims (concatenations, flattened products) get fresh tokens too, since the
generator only needs to know which dims are provably equal.
"""

from __future__ import annotations

import itertools
import random

from dyndag.graph import parse_graph

FLOAT = "f32"


class _Builder:
    def __init__(self, rng: random.Random, symbols=("N", "M")):
        self.rng = rng
        self.symbols = list(symbols)
        self.inputs, self.constants, self.nodes = [], [], []
        self.pool = []  # (tensor, dims) for float tensors
        self.fresh = itertools.count()
        self.consumed = set()

    def name(self, prefix):
        return f"{prefix}{next(self.fresh)}"

    def node(self, op, ins, n_out=1, **attrs):
        nid = self.name(op.lower())
        outs = [f"{nid}_o{i}" for i in range(n_out)]
        self.nodes.append({"id": nid, "op": op, "inputs": list(ins), "outputs": outs,
                           "attrs": attrs})
        self.consumed.update(ins)
        return outs[0] if n_out == 1 else outs

    def const(self, shape, dtype=FLOAT, data=None):
        t = self.name("c")
        d = {"name": t, "dtype": dtype, "shape": list(shape)}
        if data is not None:
            d["int_data"] = list(data)
        self.constants.append(d)
        return t

    def add_input(self, rank=None):
        rank = rank if rank is not None else self.rng.randint(1, 3)
        dims = [self.rng.choice(self.symbols + [2, 3, 4]) for _ in range(rank)]
        t = self.name("x")
        self.inputs.append({"name": t, "dtype": FLOAT, "shape": dims})
        self.pool.append((t, dims))
        return t, dims

    def token(self):
        return ("#", next(self.fresh))

    # --- operations -----------------------------------------------------

    def unary(self, t, dims):
        return self.node(self.rng.choice(["Relu", "Sigmoid"]), [t]), dims

    def broadcast(self, t, dims):
        op = self.rng.choice(["Add", "Mul", "Sub"])
        same = [(u, d) for u, d in self.pool if d == dims and u != t]
        if same and self.rng.random() < 0.5:
            u = self.rng.choice(same)[0]
        else:
            shape = [d if isinstance(d, int) and self.rng.random() < 0.5 else 1 for d in dims]
            shape = shape[self.rng.randint(0, len(shape)):] if self.rng.random() < 0.3 else shape
            u = self.const(shape)
        ins = [t, u] if self.rng.random() < 0.5 else [u, t]
        return self.node(op, ins), dims

    def transpose(self, t, dims):
        perm = list(range(len(dims)))
        self.rng.shuffle(perm)
        return self.node("Transpose", [t], perm=perm), [dims[p] for p in perm]

    def reduce(self, t, dims):
        k = self.rng.randint(1, len(dims))
        axes = sorted(self.rng.sample(range(len(dims)), k))
        keep = self.rng.randint(0, 1)
        out = [1 if i in axes else d for i, d in enumerate(dims)] if keep else \
            [d for i, d in enumerate(dims) if i not in axes]
        if not out:
            keep, out = 1, [1] * len(dims)
        return self.node(self.rng.choice(["ReduceSum", "ReduceMean"]), [t], axes=axes,
                         keepdims=keep), out

    def unsqueeze(self, t, dims):
        a = self.rng.randint(0, len(dims))
        return self.node("Unsqueeze", [t], axes=[a]), dims[:a] + [1] + dims[a:]

    def concat(self, t, dims):
        axis = self.rng.randrange(len(dims))
        out = list(dims)
        out[axis] = self.token()
        return self.node("Concat", [t, t], axis=axis), out

    def flatten(self, t, dims):
        """Shape -> Gather -> Concat -> Reshape to [d_k, -1]."""
        k = self.rng.randrange(len(dims))
        s = self.node("Shape", [t])
        g = self.node("Gather", [s, self.const([1], "i64", [k])], axis=0)
        tgt = self.node("Concat", [g, self.const([1], "i64", [-1])], axis=0)
        return self.node("Reshape", [t, tgt]), [dims[k], self.token()]

    def matmul(self, t, dims):
        if len(dims) < 2 or not isinstance(dims[-1], int):
            return self.unary(t, dims)
        c = self.rng.choice([2, 4, 8])
        w = self.const([dims[-1], c])
        return self.node("MatMul", [t, w]), dims[:-1] + [c]

    def nonzero(self, t, dims):
        z = self.node("NonZero", [t])
        f = self.node("Cast", [z], to=FLOAT)
        return f, [len(dims), self.token()]

    def step(self, dynamic=True):
        t, dims = self.rng.choice(self.pool[-6:])
        ops = [self.unary, self.broadcast, self.transpose, self.reduce, self.unsqueeze,
               self.concat, self.flatten, self.matmul]
        if dynamic:
            ops.append(self.nonzero)
        op = self.rng.choice(ops)
        if len(dims) >= 4 and op in (self.unsqueeze, self.concat):
            op = self.reduce
        out, odims = op(t, dims)
        self.pool.append((out, odims))
        return out

    def finish(self, name):
        outputs = [t for n in self.nodes for t in n["outputs"] if t not in self.consumed]
        return {"name": name, "symbols": self.symbols, "inputs": self.inputs,
                "constants": self.constants, "nodes": self.nodes, "outputs": outputs}


def random_graph_dict(seed, n_nodes: int = 30, dynamic: bool = True) -> dict:
    rng = random.Random(seed)
    b = _Builder(rng)
    for _ in range(rng.randint(1, 3)):
        b.add_input()
    while len(b.nodes) < n_nodes:
        if rng.random() < 0.05:
            b.add_input()
        b.step(dynamic)
    return b.finish(f"random{seed}")


def random_graph(seed, n_nodes: int = 30, dynamic: bool = True):
    return parse_graph(random_graph_dict(seed, n_nodes, dynamic))


def nac_chain_dict(seed, k: int, seg: int = 3) -> dict:
    """``k`` NonZero nodes in a chain, separated by static segments.

    Each NonZero count is reduced to a scalar that rescales the running
    tensor, so the data path stays static between the dynamic nodes.
    """
    rng = random.Random(seed)
    b = _Builder(rng, symbols=("N",))
    t, dims = b.add_input(rank=2)
    for i in range(k + 1):
        for _ in range(rng.randint(1, seg)):
            t, dims = rng.choice([b.unary, b.broadcast])(t, dims)
            b.pool.append((t, dims))
        if i == k:
            break
        z = b.node("NonZero", [t])
        count = b.node("ReduceSum", [z], axes=[0, 1], keepdims=0)
        scale = b.node("Cast", [count], to=FLOAT)
        t = b.node("Mul", [t, scale])
        b.pool.append((t, dims))
    return b.finish(f"chain{seed}_{k}")


def nac_chain(seed, k: int, seg: int = 3):
    return parse_graph(nac_chain_dict(seed, k, seg))


def random_dag(seed, n_nodes: int):
    """Small DAG of Concat nodes plus random byte sizes for its tensors.

    Only the dependency structure matters to order planning, so sizes are
    drawn independently of the (1-D) shapes.
    """
    rng = random.Random(seed)
    nodes, outs = [], []
    for i in range(n_nodes):
        k = rng.randint(0, min(2, i))
        preds = rng.sample(range(i), k) if k else []
        ins = [outs[p] for p in preds] or ["x"]
        nodes.append({"id": f"n{i}", "op": "Concat", "inputs": ins, "outputs": [f"t{i}"],
                      "attrs": {"axis": 0}})
        outs.append(f"t{i}")
    used = {t for n in nodes for t in n["inputs"]}
    g = parse_graph({"name": f"dag{seed}", "symbols": [],
                     "inputs": [{"name": "x", "dtype": FLOAT, "shape": [4]}],
                     "constants": [], "nodes": nodes,
                     "outputs": [t for t in outs if t not in used]})
    sizes = {t: rng.randint(1, 100) for t in outs}
    return g, sizes
