"""Selection predicates over the (RID, CID, VAL) schema of a matrix.

Grammar (keywords are case-insensitive; NOT binds tighter than AND, AND
tighter than OR)::

    pred  := conj (OR conj)*
    conj  := neg (AND neg)*
    neg   := NOT neg | atom
    atom  := '(' pred ')' | ROWS '!=' 0 | COLS '!=' 0 | term cmp term
    term  := RID | CID | VAL | number
    cmp   := '<' | '<=' | '=' | '!=' | '>=' | '>'
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from ._lexer import TokenStream, tokenize
from .errors import IndexOutOfRange, ParseError

ATTRS = ("RID", "CID", "VAL")
_FLIP = {"<": ">", "<=": ">=", ">": "<", ">=": "<=", "=": "=", "!=": "!="}


@dataclass(frozen=True)
class Attr:
    name: str

    def __str__(self):
        return self.name


@dataclass(frozen=True)
class Num:
    value: float

    def __str__(self):
        v = self.value
        return str(int(v)) if float(v).is_integer() else repr(v)


Term = Union[Attr, Num]


@dataclass(frozen=True)
class Cmp:
    left: Term
    op: str
    right: Term

    def __str__(self):
        return f"{self.left} {self.op} {self.right}"


@dataclass(frozen=True)
class And:
    parts: tuple

    def __str__(self):
        return " AND ".join(_wrap(p, Or) for p in self.parts)


@dataclass(frozen=True)
class Or:
    parts: tuple

    def __str__(self):
        return " OR ".join(str(p) for p in self.parts)


@dataclass(frozen=True)
class Not:
    inner: "Predicate"

    def __str__(self):
        return f"NOT {_wrap(self.inner, (And, Or))}"


@dataclass(frozen=True)
class NonEmpty:
    """ROWS != 0 (drop all-zero rows) or COLS != 0 (drop all-zero columns)."""
    axis: str  # "rows" | "cols"

    def __str__(self):
        return f"{self.axis.upper()} != 0"


Predicate = Union[Cmp, And, Or, Not, NonEmpty]


def _wrap(p, kinds):
    return f"({p})" if isinstance(p, kinds) else str(p)


def conjoin(*preds: Predicate) -> Predicate:
    parts = []
    for p in preds:
        parts.extend(p.parts if isinstance(p, And) else (p,))
    return parts[0] if len(parts) == 1 else And(tuple(parts))


# -- parsing ---------------------------------------------------------------

def parse_predicate(text: str) -> Predicate:
    if not text or not text.strip():
        raise ParseError("empty predicate", offset=0)
    ts = TokenStream(tokenize(text))
    pred = _parse_or(ts)
    tok = ts.peek()
    if tok.kind != "eof":
        raise ParseError(f"unexpected {tok.text!r}", offset=tok.offset)
    return pred


def _parse_or(ts):
    parts = [_parse_and(ts)]
    while ts.accept("OR", "||"):
        parts.append(_parse_and(ts))
    return parts[0] if len(parts) == 1 else Or(tuple(parts))


def _parse_and(ts):
    parts = [_parse_not(ts)]
    while ts.accept("AND", "&&"):
        parts.append(_parse_not(ts))
    return conjoin(*parts)


def _parse_not(ts):
    if ts.accept("NOT", "!"):
        return Not(_parse_not(ts))
    return _parse_atom(ts)


def _parse_atom(ts):
    if ts.accept("("):
        inner = _parse_or(ts)
        ts.expect(")")
        return inner
    if ts.at("ROWS", "COLS"):
        axis = ts.next().upper.lower()
        ts.expect("!=", "<>")
        tok = ts.next()
        if not (tok.kind == "number" and float(tok.text) == 0) and tok.upper != "NULL":
            raise ParseError(f"{axis.upper()} can only be compared with 0", offset=tok.offset)
        return NonEmpty(axis)
    start = ts.peek().offset
    left = _parse_term(ts)
    tok = ts.peek()
    if not ts.at("<", "<=", "=", "==", "!=", "<>", ">=", ">"):
        raise ParseError(f"expected a comparison, found {tok.text or 'end of input'!r}",
                         offset=tok.offset)
    op = {"==": "=", "<>": "!="}.get(tok.text, tok.text)
    ts.next()
    right = _parse_term(ts)
    if isinstance(left, Num) and isinstance(right, Num):
        raise ParseError("comparison between two constants", offset=start)
    return Cmp(left, op, right)


def _parse_term(ts):
    tok = ts.peek()
    if tok.kind == "ident" and tok.upper in ATTRS:
        ts.next()
        return Attr(tok.upper)
    sign = 1.0
    if ts.accept("-"):
        sign = -1.0
    elif ts.accept("+"):
        pass
    tok = ts.peek()
    if tok.kind == "number":
        ts.next()
        return Num(sign * float(tok.text))
    raise ParseError(f"expected RID, CID, VAL or a number, found {tok.text or 'end of input'!r}",
                     offset=tok.offset)


# -- evaluation and analysis -------------------------------------------------

_CMP = {
    "<": np.less, "<=": np.less_equal, "=": np.equal,
    "!=": np.not_equal, ">=": np.greater_equal, ">": np.greater,
}


def evaluate(pred: Predicate, rid, cid, val) -> np.ndarray:
    """Vectorised truth value of an entry predicate at the given entries."""
    cols = {"RID": np.asarray(rid), "CID": np.asarray(cid), "VAL": np.asarray(val)}

    def term(t):
        return cols[t.name] if isinstance(t, Attr) else t.value

    def ev(p):
        if isinstance(p, Cmp):
            return np.broadcast_to(_CMP[p.op](term(p.left), term(p.right)), cols["VAL"].shape)
        if isinstance(p, And):
            out = np.ones(cols["VAL"].shape, bool)
            for q in p.parts:
                out = out & ev(q)
            return out
        if isinstance(p, Or):
            out = np.zeros(cols["VAL"].shape, bool)
            for q in p.parts:
                out = out | ev(q)
            return out
        if isinstance(p, Not):
            return ~ev(p.inner)
        raise TypeError(f"{p} is not an entry predicate")

    return ev(pred)


def attrs_used(pred: Predicate) -> set[str]:
    if isinstance(pred, Cmp):
        return {t.name for t in (pred.left, pred.right) if isinstance(t, Attr)}
    if isinstance(pred, (And, Or)):
        return set().union(*(attrs_used(p) for p in pred.parts))
    if isinstance(pred, Not):
        return attrs_used(pred.inner)
    return {"ROWS" if pred.axis == "rows" else "COLS"}


def is_entry_only(pred: Predicate) -> bool:
    """True when the predicate only looks at entry values."""
    return attrs_used(pred) == {"VAL"}


def has_nonempty(pred: Predicate) -> bool:
    return bool(attrs_used(pred) & {"ROWS", "COLS"})


def _dim_const(p) -> Optional[tuple[str, int]]:
    if not isinstance(p, Cmp) or p.op != "=":
        return None
    a, b = p.left, p.right
    if isinstance(b, Attr):
        a, b = b, a
    if isinstance(a, Attr) and a.name in ("RID", "CID") and isinstance(b, Num) \
            and float(b.value).is_integer():
        return a.name, int(b.value)
    return None


def dim_equality(pred: Predicate) -> Optional[dict[str, int]]:
    """{'RID': i}, {'CID': j} or both when the predicate is exactly RID=i,
    CID=j or RID=i AND CID=j; None otherwise."""
    parts = pred.parts if isinstance(pred, And) else (pred,)
    if len(parts) > 2:
        return None
    out = {}
    for p in parts:
        hit = _dim_const(p)
        if hit is None or hit[0] in out:
            return None
        out[hit[0]] = hit[1]
    return out


def make_dim_equality(rid: Optional[int] = None, cid: Optional[int] = None) -> Predicate:
    atoms = []
    if rid is not None:
        atoms.append(Cmp(Attr("RID"), "=", Num(float(rid))))
    if cid is not None:
        atoms.append(Cmp(Attr("CID"), "=", Num(float(cid))))
    return conjoin(*atoms)


@dataclass(frozen=True)
class SelectPlan:
    """How a predicate reshapes an m x n matrix.

    Rows ``row_lo..row_hi`` and columns ``col_lo..col_hi`` (inclusive) are
    kept; ``diagonal`` keeps only RID == CID as an n x 1 column; ``residual``
    is evaluated per entry on original coordinates and failing entries become
    0; ``drop_empty_rows``/``drop_empty_cols`` compact the result afterwards.
    """
    row_lo: int
    row_hi: int
    col_lo: int
    col_hi: int
    diagonal: bool
    residual: Optional[Predicate]
    drop_empty_rows: bool
    drop_empty_cols: bool

    @property
    def shape(self):
        if self.diagonal:
            return (self.row_hi - self.row_lo + 1, 1)
        return (self.row_hi - self.row_lo + 1, self.col_hi - self.col_lo + 1)

    @property
    def dynamic(self) -> bool:
        return self.drop_empty_rows or self.drop_empty_cols


def _bound(op: str, c: float) -> tuple[float, float]:
    if op == "=":
        if not float(c).is_integer():
            return (1, 0)
        return (c, c)
    if op == "<":
        return (-math.inf, math.ceil(c) - 1)
    if op == "<=":
        return (-math.inf, math.floor(c))
    if op == ">":
        return (math.floor(c) + 1, math.inf)
    return (math.ceil(c), math.inf)


def analyze_select(pred: Predicate, shape: tuple[int, int]) -> SelectPlan:
    m, n = shape
    lo = {"RID": 0, "CID": 0}
    hi = {"RID": m - 1, "CID": n - 1}
    diagonal = False
    residual = []
    drop_rows = drop_cols = False
    bounds = []
    parts = pred.parts if isinstance(pred, And) else (pred,)
    for p in parts:
        if isinstance(p, NonEmpty):
            if p.axis == "rows":
                drop_rows = True
            else:
                drop_cols = True
            continue
        if has_nonempty(p):
            raise ParseError(f"ROWS/COLS != 0 may only appear as a top-level conjunct: {p}")
        if isinstance(p, Cmp) and p.op != "!=":
            a, op, b = p.left, p.op, p.right
            if isinstance(b, Attr) and isinstance(a, Num):
                a, b, op = b, a, _FLIP[op]
            if isinstance(a, Attr) and isinstance(b, Attr) and op == "=" \
                    and {a.name, b.name} == {"RID", "CID"}:
                diagonal = True
                continue
            if isinstance(a, Attr) and a.name in ("RID", "CID") and isinstance(b, Num):
                bounds.append((p, a.name, op, b.value))
                continue
        residual.append(p)
    if diagonal:
        if m != n:
            from .errors import NonSquareDiagonal
            raise NonSquareDiagonal(f"RID = CID needs a square matrix, got {m}x{n}")
        residual.extend(b[0] for b in bounds)
    else:
        for _, name, op, c in bounds:
            b_lo, b_hi = _bound(op, c)
            lo[name] = max(lo[name], b_lo)
            hi[name] = min(hi[name], b_hi)
        for name in ("RID", "CID"):
            if lo[name] > hi[name]:
                raise IndexOutOfRange(f"selection {pred} leaves no {name} in range of {m}x{n}")
    return SelectPlan(int(lo["RID"]), int(hi["RID"]), int(lo["CID"]), int(hi["CID"]),
                      diagonal, conjoin(*residual) if residual else None, drop_rows, drop_cols)
