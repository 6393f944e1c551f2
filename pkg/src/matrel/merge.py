"""Join merge functions f(x, y) and sparsity-inducing detection.

``x`` is the value from the left input, ``y`` the value from the right.
Grammar::

    expr   := term (('+' | '-') term)*
    term   := unary (('*' | '/') unary)*
    unary  := '-' unary | atom
    atom   := number | x | y | log '(' expr ')' | '(' expr ')'
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Union

import numpy as np

from ._lexer import TokenStream, tokenize
from .errors import DivisionByZero, ParseError

DEFAULT_SEED = 20240917


class Tri(enum.Enum):
    YES = "yes"
    NO = "no"
    UNKNOWN = "unknown"

    def __bool__(self):
        # only a confirmed YES lets a join skip zeros
        return self is Tri.YES


@dataclass(frozen=True)
class Var:
    name: str  # "x" | "y"

    def __str__(self):
        return self.name


@dataclass(frozen=True)
class Const:
    value: float

    def __str__(self):
        v = self.value
        return str(int(v)) if float(v).is_integer() and abs(v) < 1e15 else repr(v)


@dataclass(frozen=True)
class Bin:
    op: str
    left: "Expr"
    right: "Expr"

    def __str__(self):
        return f"({self.left} {self.op} {self.right})"


@dataclass(frozen=True)
class Neg:
    inner: "Expr"

    def __str__(self):
        return f"-{self.inner}"


@dataclass(frozen=True)
class Call:
    fn: str
    arg: "Expr"

    def __str__(self):
        return f"{self.fn}({self.arg})"


Expr = Union[Var, Const, Bin, Neg, Call]


@dataclass(frozen=True)
class MergeFn:
    """A parsed merge function plus its sparsity-inducing flags."""
    expr: Expr
    text: str
    inducing_x: Tri = Tri.UNKNOWN
    inducing_y: Tri = Tri.UNKNOWN
    seed: int = field(default=DEFAULT_SEED, compare=False)

    def __call__(self, x, y):
        return evaluate(self.expr, x, y)

    def __str__(self):
        return self.text

    def forced(self, x: Tri, y: Tri) -> "MergeFn":
        return MergeFn(self.expr, self.text, x, y, self.seed)

    def at_zero(self) -> float:
        """f(0, 0), or NaN when undefined there."""
        try:
            return float(evaluate(self.expr, np.zeros(1), np.zeros(1))[0])
        except DivisionByZero:
            return float("nan")


# -- parsing ---------------------------------------------------------------

def parse_expr(text: str) -> Expr:
    if not text or not text.strip():
        raise ParseError("empty merge function", offset=0)
    ts = TokenStream(tokenize(text))
    e = _parse_sum(ts)
    tok = ts.peek()
    if tok.kind != "eof":
        raise ParseError(f"unexpected {tok.text!r}", offset=tok.offset)
    return e


def parse_merge(text: str, seed: int = DEFAULT_SEED, trials: int = 2) -> MergeFn:
    expr = parse_expr(text)
    fx, fy = detect_sparsity_inducing(expr, trials=trials, seed=seed)
    return MergeFn(expr, text.strip(), fx, fy, seed)


def _parse_sum(ts):
    e = _parse_prod(ts)
    while ts.at("+", "-"):
        op = ts.next().text
        e = Bin(op, e, _parse_prod(ts))
    return e


def _parse_prod(ts):
    e = _parse_unary(ts)
    while ts.at("*", "/", ".*", "./"):
        op = ts.next().text.lstrip(".")
        e = Bin(op, e, _parse_unary(ts))
    return e


def _parse_unary(ts):
    if ts.accept("-"):
        return Neg(_parse_unary(ts))
    if ts.accept("+"):
        return _parse_unary(ts)
    return _parse_atom(ts)


def _parse_atom(ts):
    tok = ts.peek()
    if tok.kind == "number":
        ts.next()
        return Const(float(tok.text))
    if tok.kind == "ident":
        name = tok.text.lower()
        if name in ("x", "y"):
            ts.next()
            return Var(name)
        if name == "log":
            ts.next()
            ts.expect("(")
            arg = _parse_sum(ts)
            ts.expect(")")
            return Call("log", arg)
        raise ParseError(f"unknown name {tok.text!r} (only x, y and log are allowed)",
                         offset=tok.offset)
    if ts.accept("("):
        e = _parse_sum(ts)
        ts.expect(")")
        return e
    raise ParseError(f"expected a value, found {tok.text or 'end of input'!r}",
                     offset=tok.offset)


# -- evaluation --------------------------------------------------------------

def evaluate(expr: Expr, x, y) -> np.ndarray:
    """Vectorised f(x, y).  Division by zero or log of a non-positive value
    raises DivisionByZero."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    shape = np.broadcast_shapes(x.shape, y.shape)

    def ev(e):
        if isinstance(e, Var):
            return x if e.name == "x" else y
        if isinstance(e, Const):
            return np.float64(e.value)
        if isinstance(e, Neg):
            return -ev(e.inner)
        if isinstance(e, Call):
            a = ev(e.arg)
            if np.any(np.asarray(a) <= 0):
                raise DivisionByZero("log of a non-positive value in merge function")
            return np.log(a)
        a, b = ev(e.left), ev(e.right)
        if e.op == "+":
            return a + b
        if e.op == "-":
            return a - b
        if e.op == "*":
            return a * b
        if np.any(np.asarray(b) == 0):
            raise DivisionByZero("division by zero in merge function")
        return a / b

    with np.errstate(all="ignore"):
        out = np.broadcast_to(ev(expr), shape).astype(np.float64)
    out[out == 0] = 0.0
    return out


def variables(expr: Expr) -> set[str]:
    if isinstance(expr, Var):
        return {expr.name}
    if isinstance(expr, Const):
        return set()
    if isinstance(expr, (Neg,)):
        return variables(expr.inner)
    if isinstance(expr, Call):
        return variables(expr.arg)
    return variables(expr.left) | variables(expr.right)


def detect_sparsity_inducing(f, trials: int = 2, seed: int = DEFAULT_SEED) -> tuple[Tri, Tri]:
    """Sample whether f(0, .) = 0 (x side) and f(., 0) = 0 (y side).

    Each side is YES when every sampled value is exactly 0, NO when one is
    not, and UNKNOWN when an evaluation divides by zero.
    """
    if trials < 2:
        raise ValueError("trials must be at least 2")
    expr = f.expr if isinstance(f, MergeFn) else f
    rng = np.random.default_rng(seed)
    s = rng.uniform(1.0, 2.0, trials) * rng.choice([-1.0, 1.0], trials)
    zero = np.zeros(trials)

    def side(x, y):
        try:
            t = evaluate(expr, x, y)
        except DivisionByZero:
            return Tri.UNKNOWN
        return Tri.YES if np.all(t == 0) else Tri.NO

    return side(zero, s), side(s, zero)
