"""Rule-based plan optimizer.

Every rule is a function ``rule(node, ctx) -> Expr | None`` that either
returns a replacement for ``node`` or ``None`` when it does not apply.  The
driver walks the plan top-down, tries the enabled families in a fixed order
at each node, applies the first rule that fires, re-infers metadata and
starts over from the root.  Each application is recorded as
``(rule name, node path)`` so a trace can be replayed on the original plan.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional

from .block import estimate_fill
from .errors import RewriteBudgetExceeded
from .plan import (Aggregate, Const, EWise, Expr, Leaf, MatMul, Meta, Replicate, ScalarOp,
                   Select, Transpose, children, get_at, infer_meta, node_count, replace_at,
                   walk)
from .predicate import conjoin, dim_equality, is_entry_only, make_dim_equality

FAMILIES = ("AvgExpand", "SelectFuse", "AggSelectSwap", "SumPush", "NnzPush",
            "MinMaxPush", "SelectPush", "ChainOrder")


@dataclass
class RuleContext:
    assume_no_cancellation: bool = True
    parent: Optional[Expr] = None


@dataclass(frozen=True)
class Rule:
    name: str
    family: str
    fn: Callable


RULES: list[Rule] = []


def rule(family: str):
    def register(fn):
        RULES.append(Rule(fn.__name__, family, fn))
        return fn
    return register


def _agg(fn, dim, x):
    return Aggregate(fn, dim, x)


def _is_agg(e, fn, dims=None):
    return isinstance(e, Aggregate) and e.fn == fn and (dims is None or e.dim in dims)


_FLIP_DIM = {"r": "c", "c": "r", "d": "d", "a": "a"}


def _transpose_push(e: Aggregate) -> Optional[Expr]:
    """Shared shape of Rules 11-12, 25-26 and 33-34."""
    x = e.child.child
    if e.dim in ("r", "c"):
        return Transpose(_agg(e.fn, _FLIP_DIM[e.dim], x))
    return _agg(e.fn, e.dim, x)


# -- avg --------------------------------------------------------------------

@rule("AvgExpand")
def avg_expand(e, ctx):
    if _is_agg(e, "avg"):
        return EWise("/", _agg("sum", e.dim, e.child), _agg("nnz", e.dim, e.child))
    return None


# -- selections ---------------------------------------------------------------

@rule("SelectFuse")
def select_fuse(e, ctx):
    if isinstance(e, Select) and isinstance(e.child, Select) \
            and is_entry_only(e.pred) and is_entry_only(e.child.pred):
        return Select(conjoin(e.pred, e.child.pred), e.child.child)
    return None


@rule("AggSelectSwap")
def agg_select_swap(e, ctx):
    if not (isinstance(e, Aggregate) and e.fn in ("sum", "nnz", "max", "min")
            and isinstance(e.child, Select)):
        return None
    eq = dim_equality(e.child.pred)
    if eq is None or len(eq) != 1:
        return None
    if (e.dim == "r" and "RID" in eq) or (e.dim == "c" and "CID" in eq):
        return Select(e.child.pred, _agg(e.fn, e.dim, e.child.child))
    return None


def _dim_select(e):
    if isinstance(e, Select):
        eq = dim_equality(e.pred)
        if eq:
            return eq
    return None


@rule("SelectPush")
def select_push_transpose(e, ctx):
    eq = _dim_select(e)
    if eq is None or not isinstance(e.child, Transpose):
        return None
    return Transpose(Select(make_dim_equality(eq.get("CID"), eq.get("RID")), e.child.child))


@rule("SelectPush")
def select_push_scalar(e, ctx):
    eq = _dim_select(e)
    if eq is None or not isinstance(e.child, ScalarOp):
        return None
    s = e.child
    return ScalarOp(s.op, Select(e.pred, s.child), s.beta)


@rule("SelectPush")
def select_push_ewise(e, ctx):
    eq = _dim_select(e)
    if eq is None or not isinstance(e.child, EWise):
        return None
    w = e.child
    return EWise(w.op, Select(e.pred, w.left), Select(e.pred, w.right))


@rule("SelectPush")
def select_push_matmul(e, ctx):
    eq = _dim_select(e)
    if eq is None or not isinstance(e.child, MatMul):
        return None
    left, right = e.child.left, e.child.right
    if "RID" in eq:
        left = Select(make_dim_equality(rid=eq["RID"]), left)
    if "CID" in eq:
        right = Select(make_dim_equality(cid=eq["CID"]), right)
    return MatMul(left, right)


# -- sum (Rules 11-22) -----------------------------------------------------------

@rule("SumPush")
def sum_transpose(e, ctx):
    if _is_agg(e, "sum") and isinstance(e.child, Transpose):
        return _transpose_push(e)
    return None


def _scalar_add_total(dim, beta, shape):
    m, n = shape
    return {"r": beta * n, "c": beta * m, "a": beta * m * n, "d": beta * n}[dim]


@rule("SumPush")
def sum_scalar_add(e, ctx):
    if _is_agg(e, "sum") and isinstance(e.child, ScalarOp) and e.child.op == "+":
        s = e.child
        return ScalarOp("+", _agg("sum", e.dim, s.child),
                        _scalar_add_total(e.dim, s.beta, s.child.meta.shape))
    return None


@rule("SumPush")
def sum_scalar_mul(e, ctx):
    if _is_agg(e, "sum") and isinstance(e.child, ScalarOp) and e.child.op == "*":
        s = e.child
        return ScalarOp("*", _agg("sum", e.dim, s.child), s.beta)
    return None


@rule("SumPush")
def sum_ewise_add(e, ctx):
    if _is_agg(e, "sum") and isinstance(e.child, EWise) and e.child.op == "+":
        w = e.child
        return EWise("+", _agg("sum", e.dim, w.left), _agg("sum", e.dim, w.right))
    return None


@rule("SumPush")
def sum_matmul(e, ctx):
    if not (_is_agg(e, "sum") and isinstance(e.child, MatMul)):
        return None
    a, b = e.child.left, e.child.right
    if e.dim == "r":
        return MatMul(a, _agg("sum", "r", b))
    if e.dim == "c":
        return MatMul(_agg("sum", "c", a), b)
    if e.dim == "a":
        return MatMul(_agg("sum", "c", a), _agg("sum", "r", b))
    # trace(A x B) = sum_a(A^T * B); A^T of a transpose is its child
    at = a.child if isinstance(a, Transpose) else Transpose(a)
    return _agg("sum", "a", EWise("*", at, b))


@rule("SumPush")
def ones_matmul(e, ctx):
    """ones(m, k) * v x B repeats v * colsum(B) on every row (and mirrored)."""
    if not isinstance(e, MatMul):
        return None
    a, b = e.left, e.right
    if isinstance(a, Const):
        m, n = a.rows, b.meta.cols
        if a.value == 0:
            return Const(m, n, 0.0)
        inner = _agg("sum", "c", b)
        inner = inner if a.value == 1 else ScalarOp("*", inner, a.value)
        return Replicate(inner, m, "rows")
    if isinstance(b, Const):
        m, n = a.meta.rows, b.cols
        if b.value == 0:
            return Const(m, n, 0.0)
        inner = _agg("sum", "r", a)
        inner = inner if b.value == 1 else ScalarOp("*", inner, b.value)
        return Replicate(inner, n, "cols")
    return None


# -- nnz (Rules 25-32) -------------------------------------------------------------

def _agg_shape(dim, shape):
    m, n = shape
    return {"r": (m, 1), "c": (1, n), "d": (1, 1), "a": (1, 1)}[dim]


@rule("NnzPush")
def nnz_transpose(e, ctx):
    if _is_agg(e, "nnz") and isinstance(e.child, Transpose):
        return _transpose_push(e)
    return None


@rule("NnzPush")
def nnz_scalar_add(e, ctx):
    # unsound if some entry equals -beta; only applied under the
    # no-cancellation assumption
    if not (_is_agg(e, "nnz") and isinstance(e.child, ScalarOp) and e.child.op == "+"
            and e.child.beta != 0 and ctx.assume_no_cancellation):
        return None
    m, n = e.child.child.meta.shape
    count = {"r": n, "c": m, "d": n, "a": m * n}[e.dim]
    rows, cols = _agg_shape(e.dim, (m, n))
    return Const(rows, cols, float(count))


@rule("NnzPush")
def nnz_scalar_mul(e, ctx):
    if not (_is_agg(e, "nnz") and isinstance(e.child, ScalarOp) and e.child.op == "*"):
        return None
    s = e.child
    if s.beta == 0:
        rows, cols = _agg_shape(e.dim, s.child.meta.shape)
        return Const(rows, cols, 0.0)
    return _agg("nnz", e.dim, s.child)


@rule("NnzPush")
def nnz_ewise_div(e, ctx):
    if _is_agg(e, "nnz") and isinstance(e.child, EWise) and e.child.op == "/":
        return _agg("nnz", e.dim, e.child.left)
    return None


# -- max / min (Rules 33-37) --------------------------------------------------------

_OTHER = {"max": "min", "min": "max"}


@rule("MinMaxPush")
def minmax_transpose(e, ctx):
    if isinstance(e, Aggregate) and e.fn in _OTHER and isinstance(e.child, Transpose):
        return _transpose_push(e)
    return None


@rule("MinMaxPush")
def minmax_scalar_add(e, ctx):
    if isinstance(e, Aggregate) and e.fn in _OTHER and isinstance(e.child, ScalarOp) \
            and e.child.op == "+":
        return ScalarOp("+", _agg(e.fn, e.dim, e.child.child), e.child.beta)
    return None


@rule("MinMaxPush")
def minmax_scalar_mul(e, ctx):
    if not (isinstance(e, Aggregate) and e.fn in _OTHER and isinstance(e.child, ScalarOp)
            and e.child.op == "*" and e.child.beta != 0):
        return None
    beta = e.child.beta
    fn = e.fn if beta > 0 else _OTHER[e.fn]
    return ScalarOp("*", _agg(fn, e.dim, e.child.child), beta)


# -- matmul chains ------------------------------------------------------------------

def _flatten_chain(e):
    if isinstance(e, MatMul):
        return _flatten_chain(e.left) + _flatten_chain(e.right)
    return [e]


def chain_cost_table(metas: list[Meta]):
    """Interval DP over a chain.  Returns (cost, split) tables; cost of a
    product is m*k*n*density(left)*density(right)."""
    n = len(metas)
    dims = [metas[0].rows] + [m.cols for m in metas]
    # density of each interval, folded left to right with the fill estimate
    dens = [[0.0] * n for _ in range(n)]
    for i in range(n):
        nnz = metas[i].nnz
        dens[i][i] = metas[i].density
        for j in range(i + 1, n):
            fill = estimate_fill(nnz, metas[j].nnz, dims[i], dims[j], dims[j + 1])
            nnz = fill * dims[i] * dims[j + 1]
            dens[i][j] = fill
    cost = [[0.0] * n for _ in range(n)]
    split = [[0] * n for _ in range(n)]
    for length in range(2, n + 1):
        for i in range(n - length + 1):
            j = i + length - 1
            best, best_k = None, None
            # k = j-1 first so ties keep the left-deep grouping
            for k in range(j - 1, i - 1, -1):
                c = (cost[i][k] + cost[k + 1][j]
                     + dims[i] * dims[k + 1] * dims[j + 1] * dens[i][k] * dens[k + 1][j])
                if best is None or c < best:
                    best, best_k = c, k
            cost[i][j] = best
            split[i][j] = best_k
    return cost, split


def _build_chain(ops, split, i, j):
    if i == j:
        return ops[i]
    k = split[i][j]
    return MatMul(_build_chain(ops, split, i, k), _build_chain(ops, split, k + 1, j))


@rule("ChainOrder")
def chain_order(e, ctx):
    if not isinstance(e, MatMul) or isinstance(ctx.parent, MatMul):
        return None
    ops = _flatten_chain(e)
    if len(ops) < 3:
        return None
    _, split = chain_cost_table([o.meta for o in ops])
    best = _build_chain(ops, split, 0, len(ops) - 1)
    return None if best == e else best


# -- driver -------------------------------------------------------------------------

RULES_BY_NAME = {r.name: r for r in RULES}


@dataclass
class RewriteTrace:
    steps: list = field(default_factory=list)

    def __iter__(self):
        return iter(self.steps)

    def __len__(self):
        return len(self.steps)

    def to_json(self):
        return [{"rule": name, "path": list(path)} for name, path in self.steps]


def _catalog_of(e: Expr) -> dict:
    cat = {}
    for _, n in walk(e):
        if isinstance(n, Leaf):
            if n.meta is None:
                raise ValueError(f"leaf {n.name} has no metadata; run infer_meta first")
            cat[n.name] = n.meta
    return cat


def _rules_for(enable: Optional[Iterable[str]]):
    fams = FAMILIES if enable is None else tuple(enable)
    unknown = set(fams) - set(FAMILIES)
    if unknown:
        raise ValueError(f"unknown rule families: {', '.join(sorted(unknown))}")
    return [r for f in FAMILIES if f in fams for r in RULES if r.family == f]


def _first_match(e, rules, ctx):
    for path, node in walk(e):
        ctx.parent = get_at(e, path[:-1]) if path else None
        for r in rules:
            new = r.fn(node, ctx)
            if new is not None:
                return r.name, path, new
    return None


def optimize(e: Expr, enable: Optional[Iterable[str]] = None, catalog=None,
             assume_no_cancellation: bool = True, budget: Optional[int] = None):
    """Rewrite ``e`` to a fixed point; returns (plan, RewriteTrace)."""
    catalog = _catalog_of(e) if catalog is None else catalog
    e = infer_meta(e, catalog)
    rules = _rules_for(enable)
    ctx = RuleContext(assume_no_cancellation)
    limit = budget if budget is not None else 10 * node_count(e)
    trace = RewriteTrace()
    while True:
        hit = _first_match(e, rules, ctx)
        if hit is None:
            return e, trace
        if len(trace) >= limit:
            raise RewriteBudgetExceeded(
                f"more than {limit} rule applications; last was {hit[0]} at {hit[1]}")
        name, path, new = hit
        trace.steps.append((name, path))
        e = infer_meta(replace_at(e, path, new), catalog)


def replay(e: Expr, trace, catalog=None, assume_no_cancellation: bool = True) -> Expr:
    """Apply recorded (rule, path) steps to ``e`` in order."""
    catalog = _catalog_of(e) if catalog is None else catalog
    e = infer_meta(e, catalog)
    ctx = RuleContext(assume_no_cancellation)
    for name, path in trace:
        node = get_at(e, path)
        ctx.parent = get_at(e, path[:-1]) if path else None
        new = RULES_BY_NAME[name].fn(node, ctx)
        if new is None:
            raise ValueError(f"rule {name} does not apply at {path}")
        e = infer_meta(replace_at(e, path, new), catalog)
    return e


def format_trace(trace) -> str:
    if not len(trace):
        return "(no rewrites)"
    return "\n".join(f"{i + 1:3d}. {name} at /{'/'.join(map(str, path))}"
                     for i, (name, path) in enumerate(trace))
