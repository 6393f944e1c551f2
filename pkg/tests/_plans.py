"""Random plan generators, one per rewrite family.

Each generator returns (plan, env) where env maps leaf names to dense numpy
arrays.  Plans are built so that the family's rules have something to fire
on, mixed with random sub-expressions underneath.  Shapes are kept to at
most eight blocks per side so executor runs stay fast.
"""
from __future__ import annotations

import numpy as np

from matrel.plan import (Aggregate, Const, EWise, Leaf, MatMul, ScalarOp, Select, Transpose)
from matrel.predicate import parse_predicate


class PlanGen:
    def __init__(self, rng, L, max_dim=64, rich=False):
        self.rng = rng
        self.L = L
        self.env = {}
        self.max_dim = min(max_dim, 8 * L)
        self.rich = rich  # also emit aggregates and selections inside mat()
        self.leaf_p = 0.15 if rich else 0.35

    # -- leaves ---------------------------------------------------------
    def dim(self, lo=1):
        return int(self.rng.integers(lo, self.max_dim + 1))

    def leaf(self, shape, nonzero=False):
        name = f"M{len(self.env)}"
        m, n = shape
        rng = self.rng
        vals = rng.uniform(-1, 1, size=(m, n))
        vals[np.abs(vals) < 1e-3] = 0.5
        if nonzero:
            arr = np.where(rng.random((m, n)) < 0.5, 1, -1) * rng.uniform(0.5, 1.5, (m, n))
        else:
            density = rng.choice([0.05, 0.2, 0.6, 1.0])
            arr = np.where(rng.random((m, n)) < density, vals, 0.0)
            if rng.random() < 0.2:
                arr = np.round(arr * 4) / 4  # repeated values for max/min ties
        self.env[name] = arr
        return Leaf(name)

    def beta(self, nonzero=True):
        b = float(np.round(self.rng.uniform(-3, 3), 3))
        if nonzero and b == 0:
            b = 1.25
        return b

    # -- random sub-expressions ------------------------------------------
    def mat(self, shape, depth=2, allow_const=True):
        """A random expression with the given shape."""
        rng = self.rng
        if depth <= 0 or rng.random() < self.leaf_p:
            return self.leaf(shape)
        m, n = shape
        if self.rich and rng.random() < 0.3:
            return self._wrapped(shape, depth)
        pick = rng.integers(6)
        if pick == 0:
            return Transpose(self.mat((n, m), depth - 1, allow_const))
        if pick == 1:
            return ScalarOp("*", self.mat(shape, depth - 1, allow_const), self.beta())
        if pick == 2:
            return ScalarOp("+", self.mat(shape, depth - 1, allow_const), self.beta())
        if pick == 3:
            op = "+" if rng.random() < 0.5 else "*"
            return EWise(op, self.mat(shape, depth - 1, allow_const),
                         self.mat(shape, depth - 1, allow_const))
        if pick == 4:
            return EWise("/", self.mat(shape, depth - 1, allow_const),
                         self.leaf(shape, nonzero=True))
        k = self.dim()
        left = self.mat((m, k), depth - 1, allow_const)
        if allow_const and rng.random() < 0.15:
            left = Const(m, k, float(rng.choice([1.0, 2.0, 0.0])))
        return MatMul(left, self.mat((k, n), depth - 1, allow_const))

    def _wrapped(self, shape, depth):
        """An aggregate or selection producing ``shape``."""
        rng = self.rng
        m, n = shape
        fn = str(rng.choice(["sum", "nnz", "max", "min", "avg"]))
        options = ["entry", "slice"]
        if n == 1:
            options.append("agg_r")
        if m == 1:
            options.append("agg_c")
        if m == n == 1:
            options.append("agg_ad")
        pick = str(rng.choice(options))
        if pick == "entry":
            return Select(self._entry_pred(), self.mat(shape, depth - 1))
        if pick == "slice":
            extra = int(rng.integers(0, 4))
            lo = int(rng.integers(0, extra + 1))
            pred = parse_predicate(f"RID >= {lo} AND RID <= {lo + m - 1}")
            return Select(pred, self.mat((m + extra, n), depth - 1))
        if pick == "agg_r":
            return Aggregate(fn, "r", self.mat((m, self.dim()), depth - 1))
        if pick == "agg_c":
            return Aggregate(fn, "c", self.mat((self.dim(), n), depth - 1))
        dim = str(rng.choice(["a", "d"]))
        k = self.dim()
        return Aggregate(fn, dim, self.mat((k, k) if dim == "d" else (k, self.dim()), depth - 1))

    def shape(self, square=False):
        m = self.dim()
        return (m, m) if square else (m, self.dim())

    # -- family generators -------------------------------------------------
    def avg_expand(self):
        dim = str(self.rng.choice(["r", "c", "d", "a"]))
        return Aggregate("avg", dim, self.mat(self.shape(dim == "d")))

    def _entry_pred(self):
        rng = self.rng
        op = str(rng.choice(["<", "<=", ">", ">=", "!="]))
        c = float(np.round(rng.uniform(-1, 1), 2))
        text = f"VAL {op} {c}"
        if rng.random() < 0.3:
            text = f"NOT {text}"
        if rng.random() < 0.3:
            text += f" OR VAL = {float(np.round(rng.uniform(-1, 1), 2))}"
        return parse_predicate(text)

    def select_fuse(self):
        e = self.mat(self.shape())
        for _ in range(int(self.rng.integers(2, 4))):
            e = Select(self._entry_pred(), e)
        return e

    def _dim_pred(self, shape, which):
        m, n = shape
        i, j = int(self.rng.integers(m)), int(self.rng.integers(n))
        text = {"r": f"RID = {i}", "c": f"CID = {j}", "rc": f"RID = {i} AND CID = {j}"}[which]
        return parse_predicate(text)

    def agg_select_swap(self):
        rng = self.rng
        shape = self.shape()
        fn = str(rng.choice(["sum", "nnz", "max", "min"]))
        dim = str(rng.choice(["r", "c", "a"]))
        which = dim if dim in ("r", "c") and rng.random() < 0.8 else str(rng.choice(["r", "c"]))
        return Aggregate(fn, dim, Select(self._dim_pred(shape, which), self.mat(shape)))

    def sum_push(self):
        rng = self.rng
        dim = str(rng.choice(["r", "c", "d", "a"]))
        shape = self.shape(dim == "d")
        m, n = shape
        pick = rng.integers(6)
        if pick == 0:
            child = Transpose(self.mat((n, m)))
        elif pick == 1:
            child = ScalarOp(str(rng.choice(["+", "*"])), self.mat(shape), self.beta(False))
        elif pick == 2:
            child = EWise("+", self.mat(shape), self.mat(shape))
        elif pick == 3:
            k = self.dim()
            child = MatMul(self.mat((m, k)), self.mat((k, n)))
        elif pick == 4:
            k = self.dim()
            # A^T A style trace and Gram shapes
            a = self.mat((k, m))
            child = MatMul(Transpose(a), a if m == n else self.mat((k, n)))
        else:
            k = self.dim()
            child = MatMul(self.mat((m, k)), Const(k, n, float(rng.choice([1.0, 0.5]))))
        return Aggregate("sum", dim, child)

    def nnz_push(self):
        rng = self.rng
        dim = str(rng.choice(["r", "c", "d", "a"]))
        shape = self.shape(dim == "d")
        m, n = shape
        pick = rng.integers(4)
        if pick == 0:
            child = Transpose(self.mat((n, m), allow_const=False))
        elif pick == 1:
            # random non-integer beta: no entry can equal -beta
            child = ScalarOp("+", self.mat(shape, allow_const=False),
                             float(rng.uniform(0.1, 3)) * float(rng.choice([-1, 1])))
        elif pick == 2:
            child = ScalarOp("*", self.mat(shape, allow_const=False),
                             float(rng.choice([0.0, 2.5, -0.75])))
        else:
            child = EWise("/", self.mat(shape, allow_const=False),
                          self.leaf(shape, nonzero=True))
        return Aggregate("nnz", dim, child)

    def minmax_push(self):
        rng = self.rng
        fn = str(rng.choice(["max", "min"]))
        dim = str(rng.choice(["r", "c", "d", "a"]))
        shape = self.shape(dim == "d")
        m, n = shape
        pick = rng.integers(4)
        if pick == 0:
            child = Transpose(self.mat((n, m)))
        elif pick == 1:
            child = ScalarOp("+", self.mat(shape), self.beta())
        elif pick == 2:
            child = ScalarOp("*", self.mat(shape), self.beta())
        else:
            child = EWise("+", self.mat(shape), self.mat(shape))  # never rewritten
        return Aggregate(fn, dim, child)

    def select_push(self):
        rng = self.rng
        shape = self.shape()
        m, n = shape
        which = str(rng.choice(["r", "c", "rc"]))
        pick = rng.integers(4)
        if pick == 0:
            child = Transpose(self.mat((n, m)))
        elif pick == 1:
            child = ScalarOp(str(rng.choice(["+", "*"])), self.mat(shape), self.beta())
        elif pick == 2:
            op = str(rng.choice(["+", "*", "/"]))
            right = self.leaf(shape, nonzero=True) if op == "/" else self.mat(shape)
            child = EWise(op, self.mat(shape), right)
        else:
            k = self.dim()
            child = MatMul(self.mat((m, k)), self.mat((k, n)))
        return Select(self._dim_pred(shape, which), child)

    def chain_order(self):
        rng = self.rng
        count = int(rng.integers(3, 6))
        dims = [self.dim() for _ in range(count + 1)]
        ops = [self.leaf((dims[i], dims[i + 1])) if rng.random() < 0.7
               else self.mat((dims[i], dims[i + 1]), 1) for i in range(count)]
        e = ops[0]
        for o in ops[1:]:
            e = MatMul(e, o)
        return e


FAMILY_GENERATORS = {
    "AvgExpand": PlanGen.avg_expand,
    "SelectFuse": PlanGen.select_fuse,
    "AggSelectSwap": PlanGen.agg_select_swap,
    "SumPush": PlanGen.sum_push,
    "NnzPush": PlanGen.nnz_push,
    "MinMaxPush": PlanGen.minmax_push,
    "SelectPush": PlanGen.select_push,
    "ChainOrder": PlanGen.chain_order,
}


def fuzz_plan(seed, depth=8, max_dim=12):
    """A mixed plan of up to ``depth`` levels drawn from every node kind."""
    rng = np.random.default_rng(seed)
    gen = PlanGen(rng, int(rng.choice([2, 4, 8])), max_dim=max_dim, rich=True)
    plan = gen.mat(gen.shape(), depth)
    if rng.random() < 0.5:
        plan = Aggregate(str(rng.choice(["sum", "nnz", "max", "min", "avg"])),
                         str(rng.choice(["r", "c", "a"])), plan)
    return plan, gen.env, gen.L


def random_plan(family, seed, L=None):
    rng = np.random.default_rng(seed)
    L = L or int(rng.choice([2, 4, 8]))
    gen = PlanGen(rng, L)
    plan = FAMILY_GENERATORS[family](gen)
    return plan, gen.env, L
