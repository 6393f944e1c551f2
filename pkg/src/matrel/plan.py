"""Logical plans: expression nodes, join predicates and metadata inference."""
from __future__ import annotations

import dataclasses
import math
import re
from dataclasses import dataclass, field
from typing import Mapping, Optional, Union

from .block import estimate_fill
from .errors import (DimMismatch, EmptyProjection, IllegalJoin, NonSquareDiagonal,
                     ParseError, UnknownMatrix)
from .merge import MergeFn
from .predicate import Predicate, analyze_select

AGG_FNS = ("sum", "nnz", "avg", "max", "min")
AGG_DIMS = ("r", "c", "d", "a")
TENSOR_AGG_FNS = ("sum", "nnz", "max", "min")
# entries/(rows*cols) above which a result is treated as dense
DENSE_THRESHOLD = 0.5


@dataclass(frozen=True)
class Meta:
    """Inferred output description of a node.

    ``shape`` has 2 entries for matrices and 3 or 4 for join tensors.
    ``dynamic`` marks shapes that are only upper bounds until execution
    (ROWS != 0 / COLS != 0 selections).
    """
    shape: tuple
    nnz: float
    dynamic: bool = False
    value_only: bool = False

    @property
    def order(self) -> int:
        return len(self.shape)

    @property
    def rows(self) -> int:
        return self.shape[0]

    @property
    def cols(self) -> int:
        return self.shape[1]

    @property
    def size(self) -> int:
        return math.prod(self.shape)

    @property
    def density(self) -> float:
        return self.nnz / self.size if self.size else 0.0

    @property
    def sparse(self) -> bool:
        return self.density <= DENSE_THRESHOLD


def _meta():
    return field(default=None, compare=False, repr=False, kw_only=True)


@dataclass(frozen=True)
class Leaf:
    name: str
    meta: Optional[Meta] = _meta()


@dataclass(frozen=True)
class Const:
    """rows x cols matrix with every entry equal to ``value``."""
    rows: int
    cols: int
    value: float
    meta: Optional[Meta] = _meta()


@dataclass(frozen=True)
class Transpose:
    child: "Expr"
    meta: Optional[Meta] = _meta()


@dataclass(frozen=True)
class ScalarOp:
    op: str  # '+' | '*'
    child: "Expr"
    beta: float
    meta: Optional[Meta] = _meta()


@dataclass(frozen=True)
class EWise:
    op: str  # '+' | '*' | '/'
    left: "Expr"
    right: "Expr"
    meta: Optional[Meta] = _meta()


@dataclass(frozen=True)
class MatMul:
    left: "Expr"
    right: "Expr"
    meta: Optional[Meta] = _meta()


@dataclass(frozen=True)
class Unary:
    fn: str  # 'log'
    child: "Expr"
    meta: Optional[Meta] = _meta()


@dataclass(frozen=True)
class Replicate:
    """Stack a 1 x n child ``count`` times (axis 'rows') or an m x 1 child
    ``count`` times side by side (axis 'cols')."""
    child: "Expr"
    count: int
    axis: str
    meta: Optional[Meta] = _meta()


@dataclass(frozen=True)
class Select:
    pred: Predicate
    child: "Expr"
    meta: Optional[Meta] = _meta()


@dataclass(frozen=True)
class Project:
    attrs: tuple
    child: "Expr"
    meta: Optional[Meta] = _meta()


@dataclass(frozen=True)
class Aggregate:
    fn: str
    dim: str
    child: "Expr"
    meta: Optional[Meta] = _meta()


@dataclass(frozen=True)
class Join:
    gamma: "JoinGamma"
    merge: MergeFn
    left: "Expr"
    right: "Expr"
    meta: Optional[Meta] = _meta()


@dataclass(frozen=True)
class Cross:
    merge: MergeFn
    left: "Expr"
    right: "Expr"
    meta: Optional[Meta] = _meta()


@dataclass(frozen=True)
class TensorAggregate:
    """Aggregate one dimension (1-based) of a join tensor away."""
    fn: str
    dim: int
    child: "Expr"
    meta: Optional[Meta] = _meta()


Expr = Union[Leaf, Const, Transpose, ScalarOp, EWise, MatMul, Unary, Replicate,
             Select, Project, Aggregate, Join, Cross, TensorAggregate]

_CHILD_FIELDS = {
    Leaf: (), Const: (), Transpose: ("child",), ScalarOp: ("child",),
    EWise: ("left", "right"), MatMul: ("left", "right"), Unary: ("child",),
    Replicate: ("child",), Select: ("child",), Project: ("child",),
    Aggregate: ("child",), Join: ("left", "right"), Cross: ("left", "right"),
    TensorAggregate: ("child",),
}


def children(e: Expr) -> tuple:
    return tuple(getattr(e, f) for f in _CHILD_FIELDS[type(e)])


def with_children(e: Expr, kids) -> Expr:
    names = _CHILD_FIELDS[type(e)]
    kids = tuple(kids)
    if all(getattr(e, n) is k for n, k in zip(names, kids)):
        return e
    return dataclasses.replace(e, **dict(zip(names, kids)), meta=None)


def strip_meta(e: Expr) -> Expr:
    kids = [strip_meta(k) for k in children(e)]
    names = _CHILD_FIELDS[type(e)]
    return dataclasses.replace(e, **dict(zip(names, kids)), meta=None)


def node_count(e: Expr) -> int:
    return 1 + sum(node_count(k) for k in children(e))


def get_at(e: Expr, path) -> Expr:
    for i in path:
        e = children(e)[i]
    return e


def replace_at(e: Expr, path, new: Expr) -> Expr:
    if not path:
        return new
    kids = list(children(e))
    kids[path[0]] = replace_at(kids[path[0]], path[1:], new)
    return with_children(e, kids)


def walk(e: Expr, path=()):
    """Pre-order (path, node) pairs."""
    yield path, e
    for i, k in enumerate(children(e)):
        yield from walk(k, path + (i,))


def leaves(e: Expr) -> set[str]:
    return {n.name for _, n in walk(e) if isinstance(n, Leaf)}


# -- join predicates ---------------------------------------------------------

DIM_ATTRS = ("RID", "CID")


@dataclass(frozen=True)
class JoinGamma:
    """Equality atoms (attr of A, attr of B); attrs are RID, CID or VAL."""
    atoms: tuple = ()

    @property
    def delta(self) -> int:
        return sum(1 for a, b in self.atoms if a in DIM_ATTRS and b in DIM_ATTRS)

    @property
    def order(self) -> int:
        return 4 - self.delta

    @property
    def kind(self) -> str:
        """cross | v2v | d2v | d2d | overlay_direct | overlay_transpose."""
        if not self.atoms:
            return "cross"
        if len(self.atoms) == 2:
            s = set(self.atoms)
            if s == {("RID", "RID"), ("CID", "CID")}:
                return "overlay_direct"
            if s == {("RID", "CID"), ("CID", "RID")}:
                return "overlay_transpose"
            raise IllegalJoin(f"unsupported two-atom join predicate {self}")
        (a, b), = self.atoms
        if a == "VAL" and b == "VAL":
            return "v2v"
        if a == "VAL" or b == "VAL":
            return "d2v"
        return "d2d"

    def __str__(self):
        if not self.atoms:
            return "true"
        return " and ".join(f"{a.lower()}_a={b.lower()}_b" for a, b in self.atoms)


_ATOM_RE = re.compile(r"^\s*(rid|cid|val)_(a|b)\s*=\s*(rid|cid|val)_(a|b)\s*$", re.I)


def parse_gamma(text: str) -> JoinGamma:
    text = text.strip()
    if not text or text.lower() in ("true", "cross"):
        return JoinGamma(())
    atoms = []
    pos = 0
    for part in re.split(r"(?i)\s+and\s+|&&", text):
        m = _ATOM_RE.match(part)
        if not m:
            raise ParseError(f"bad join atom {part.strip()!r}", offset=text.find(part.strip(), pos))
        pos = text.find(part, pos) + len(part)
        x, sx, y, sy = m.group(1).upper(), m.group(2).lower(), m.group(3).upper(), m.group(4).lower()
        if sx == sy:
            raise ParseError(f"join atom {part.strip()!r} must compare A with B")
        atoms.append((x, y) if sx == "a" else (y, x))
    if len(atoms) > 2 or len(set(atoms)) != len(atoms):
        raise IllegalJoin(f"unsupported join predicate {text!r}")
    g = JoinGamma(tuple(atoms))
    g.kind  # validates two-atom forms
    return g


def join_shape(gamma: JoinGamma, sa: tuple, sb: tuple) -> tuple:
    """Logical output shape of A join B.

    Order 4: (A rows, A cols, B rows, B cols).  Order 3: (matched extent,
    A's other extent, B's other extent).  Overlays: A's shape.
    """
    (m, n), (p, q) = sa, sb
    kind = gamma.kind
    if kind in ("cross", "v2v", "d2v"):
        return (m, n, p, q)
    if kind == "overlay_direct":
        if (m, n) != (p, q):
            raise DimMismatch(f"direct overlay needs equal shapes, got {sa} and {sb}")
        return (m, n)
    if kind == "overlay_transpose":
        if (m, n) != (q, p):
            raise DimMismatch(f"transpose overlay needs shape(A) = shape(B^T), got {sa} and {sb}")
        return (m, n)
    (a, b), = gamma.atoms
    ia, ib = DIM_ATTRS.index(a), DIM_ATTRS.index(b)
    if sa[ia] != sb[ib]:
        raise DimMismatch(f"join on {gamma}: matched extents {sa[ia]} and {sb[ib]} differ")
    return (sa[ia], sa[1 - ia], sb[1 - ib])


# -- metadata inference --------------------------------------------------------

def _catalog_entry(catalog, name):
    try:
        entry = catalog[name]
    except KeyError:
        raise UnknownMatrix(name) from None
    if isinstance(entry, Meta):
        return entry
    if hasattr(entry, "meta_info"):
        return entry.meta_info()
    rows, cols, nnz = entry[:3]
    return Meta((int(rows), int(cols)), float(nnz))


def _matrix(meta: Meta, what: str):
    if meta.order != 2:
        raise DimMismatch(f"{what} needs a matrix, got an order-{meta.order} tensor")


def infer_meta(e: Expr, catalog: Mapping) -> Expr:
    """Annotate every node with its output shape and estimated nnz."""
    kids = tuple(infer_meta(k, catalog) for k in children(e))
    names = _CHILD_FIELDS[type(e)]
    node = dataclasses.replace(e, **dict(zip(names, kids)), meta=None)
    return dataclasses.replace(node, meta=_infer_node(node, catalog))


def _infer_node(e: Expr, catalog) -> Meta:
    if isinstance(e, Leaf):
        return _catalog_entry(catalog, e.name)
    if isinstance(e, Const):
        if e.rows < 1 or e.cols < 1:
            raise DimMismatch("constant matrices need positive dimensions")
        return Meta((e.rows, e.cols), 0.0 if e.value == 0 else float(e.rows * e.cols))
    if isinstance(e, Transpose):
        c = e.child.meta
        _matrix(c, "transpose")
        return Meta((c.cols, c.rows), c.nnz, c.dynamic)
    if isinstance(e, ScalarOp):
        c = e.child.meta
        _matrix(c, "scalar op")
        if e.op == "*":
            return Meta(c.shape, 0.0 if e.beta == 0 else c.nnz, c.dynamic)
        return Meta(c.shape, c.nnz if e.beta == 0 else float(c.size), c.dynamic)
    if isinstance(e, EWise):
        a, b = e.left.meta, e.right.meta
        _matrix(a, "element-wise op")
        _matrix(b, "element-wise op")
        if a.shape != b.shape:
            raise DimMismatch(f"element-wise {e.op} on {a.shape} and {b.shape}")
        size = a.size
        if e.op == "+":
            nnz = min(size, a.nnz + b.nnz)
        elif e.op == "*":
            nnz = a.nnz * b.nnz / size if size else 0.0
        else:
            nnz = a.nnz
        return Meta(a.shape, float(nnz), a.dynamic or b.dynamic)
    if isinstance(e, MatMul):
        a, b = e.left.meta, e.right.meta
        _matrix(a, "matrix multiply")
        _matrix(b, "matrix multiply")
        if a.cols != b.rows:
            raise DimMismatch(f"cannot multiply {a.shape} by {b.shape}")
        fill = estimate_fill(a.nnz, b.nnz, a.rows, a.cols, b.cols)
        return Meta((a.rows, b.cols), fill * a.rows * b.cols, a.dynamic or b.dynamic)
    if isinstance(e, Unary):
        c = e.child.meta
        _matrix(c, e.fn)
        return Meta(c.shape, float(c.size), c.dynamic)
    if isinstance(e, Replicate):
        c = e.child.meta
        _matrix(c, "replicate")
        if e.axis == "rows":
            if c.rows != 1:
                raise DimMismatch("row replication needs a 1 x n input")
            return Meta((e.count, c.cols), c.nnz * e.count, c.dynamic)
        if c.cols != 1:
            raise DimMismatch("column replication needs an m x 1 input")
        return Meta((c.rows, e.count), c.nnz * e.count, c.dynamic)
    if isinstance(e, Select):
        c = e.child.meta
        _matrix(c, "select")
        sel = analyze_select(e.pred, c.shape)
        shape = sel.shape
        frac = (shape[0] * shape[1]) / c.size if c.size else 0.0
        return Meta(shape, c.nnz * frac, c.dynamic or sel.dynamic)
    if isinstance(e, Project):
        c = e.child.meta
        if not e.attrs:
            raise EmptyProjection("projection needs at least one attribute")
        return dataclasses.replace(c, value_only="VAL" in e.attrs and len(e.attrs) == 1)
    if isinstance(e, Aggregate):
        c = e.child.meta
        _matrix(c, "aggregate")
        if e.fn not in AGG_FNS or e.dim not in AGG_DIMS:
            raise ParseError(f"unknown aggregate {e.fn}/{e.dim}")
        m, n = c.shape
        if e.dim == "d" and m != n:
            raise NonSquareDiagonal(f"diagonal aggregate on a {m}x{n} matrix")
        shape = {"r": (m, 1), "c": (1, n), "d": (1, 1), "a": (1, 1)}[e.dim]
        size = shape[0] * shape[1]
        return Meta(shape, float(min(size, max(c.nnz, 1.0 if e.fn in ("max", "min") else 0))),
                    c.dynamic)
    if isinstance(e, (Join, Cross)):
        a, b = e.left.meta, e.right.meta
        _matrix(a, "join")
        _matrix(b, "join")
        gamma = e.gamma if isinstance(e, Join) else JoinGamma(())
        shape = join_shape(gamma, a.shape, b.shape)
        if len(shape) == 2:
            nnz = min(math.prod(shape), a.nnz + b.nnz)
        elif len(shape) == 3:
            nnz = min(math.prod(shape), a.nnz * b.nnz / max(shape[0], 1))
        else:
            nnz = a.nnz * b.nnz
        return Meta(shape, float(nnz), a.dynamic or b.dynamic)
    if isinstance(e, TensorAggregate):
        c = e.child.meta
        if c.order < 3:
            raise DimMismatch("tensor aggregate needs an order-3 or order-4 input")
        if e.fn not in TENSOR_AGG_FNS:
            raise ParseError(f"unknown tensor aggregate {e.fn!r}")
        if not 1 <= e.dim <= c.order:
            raise DimMismatch(f"tensor has no dimension d{e.dim}")
        shape = tuple(s for i, s in enumerate(c.shape) if i != e.dim - 1)
        return Meta(shape, float(min(math.prod(shape), c.nnz)), c.dynamic)
    raise TypeError(f"not a plan node: {e!r}")


def project(e: Expr, attrs) -> Project:
    attrs = tuple(dict.fromkeys(a.upper() for a in attrs))
    if not attrs:
        raise EmptyProjection("projection needs at least one attribute")
    bad = [a for a in attrs if a not in ("RID", "CID", "VAL")]
    if bad:
        raise ParseError(f"unknown attribute(s) {', '.join(bad)}")
    return Project(attrs, e, meta=None)


def needs_execution(e: Project) -> bool:
    """Dimension-only projections are answered from metadata unless the
    child's shape depends on data (ROWS != 0 / COLS != 0)."""
    if "VAL" in e.attrs:
        return True
    return e.child.meta is None or e.child.meta.dynamic


# -- display -------------------------------------------------------------------

def _num(v: float) -> str:
    return str(int(v)) if float(v).is_integer() else repr(float(v))


def show(e: Expr) -> str:
    """Compact one-line rendering in the script syntax."""
    if isinstance(e, Leaf):
        return e.name
    if isinstance(e, Const):
        return f"ones({e.rows}, {e.cols})" if e.value == 1 else \
            f"(ones({e.rows}, {e.cols}) .* {_num(e.value)})"
    if isinstance(e, Transpose):
        return f"t({show(e.child)})"
    if isinstance(e, ScalarOp):
        return f"({show(e.child)} {'+' if e.op == '+' else '.*'} {_num(e.beta)})"
    if isinstance(e, EWise):
        op = {"+": "+", "*": ".*", "/": "./"}[e.op]
        return f"({show(e.left)} {op} {show(e.right)})"
    if isinstance(e, MatMul):
        return f"({show(e.left)} %*% {show(e.right)})"
    if isinstance(e, Unary):
        return f"{e.fn}({show(e.child)})"
    if isinstance(e, Replicate):
        return f"rep({show(e.child)}, {e.count}, {e.axis})"
    if isinstance(e, Select):
        return f"select({show(e.child)}, \"{e.pred}\")"
    if isinstance(e, Project):
        return f"project({show(e.child)}, {' '.join(e.attrs)})"
    if isinstance(e, Aggregate):
        return f"agg({e.fn}, {e.dim}, {show(e.child)})"
    if isinstance(e, Join):
        return f"join({show(e.left)}, {show(e.right)}, \"{e.gamma}\", \"{e.merge}\")"
    if isinstance(e, Cross):
        return f"cross({show(e.left)}, {show(e.right)}, \"{e.merge}\")"
    if isinstance(e, TensorAggregate):
        return f"tagg({e.fn}, d{e.dim}, {show(e.child)})"
    return repr(e)
