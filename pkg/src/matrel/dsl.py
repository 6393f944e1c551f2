"""Parser for query scripts.

A script is a sequence of statements separated by newlines or ``;``::

    A = load_sparse("a.mtx")
    G = t(A) %*% A
    s = agg(sum, diag, G)
    save(s, "trace.txt")
    explain(s)

Names must be defined before use and are assigned once.  A name used in a
later expression stands for its whole defining expression, so the optimizer
always sees complete plans.

Precedence, loosest first: ``+ -``, then ``.* ./``, then ``%*%``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

from ._lexer import TokenStream, tokenize
from .errors import ParseError
from .merge import parse_merge
from .plan import (Aggregate, Const, Cross, EWise, Expr, Join, Leaf, MatMul, ScalarOp,
                   Select, TensorAggregate, Transpose, Unary, parse_gamma, project)
from .predicate import parse_predicate

_DIM_NAMES = {"r": "r", "row": "r", "rows": "r", "c": "c", "col": "c", "cols": "c",
              "d": "d", "diag": "d", "a": "a", "all": "a"}


@dataclass(frozen=True)
class Assign:
    name: str
    expr: Expr
    line: int


@dataclass(frozen=True)
class Save:
    name: str
    path: str
    line: int


@dataclass(frozen=True)
class Explain:
    name: str
    line: int


@dataclass
class Script:
    statements: list = field(default_factory=list)
    loads: dict = field(default_factory=dict)     # leaf name -> (path, "mm" | "csv")
    defs: dict = field(default_factory=dict)      # assigned name -> expanded expr

    def targets(self) -> list:
        return [s for s in self.statements if isinstance(s, (Save, Explain))]


def _line_of(text: str, offset: int) -> int:
    return text.count("\n", 0, offset) + 1


class _Parser:
    def __init__(self, text: str, seed: int):
        self.text = text
        self.ts = TokenStream(tokenize(text, keep_newlines=True))
        self.seed = seed
        self.script = Script()
        self._anon = 0

    def fail(self, msg, tok=None):
        tok = tok or self.ts.peek()
        raise ParseError(msg, offset=tok.offset, line=_line_of(self.text, tok.offset))

    def parse(self) -> Script:
        ts = self.ts
        while True:
            while ts.peek().kind == "newline" or ts.at(";"):
                ts.next()
            if ts.peek().kind == "eof":
                return self.script
            self.statement()
            if not (ts.peek().kind in ("newline", "eof") or ts.at(";")):
                self.fail(f"unexpected {ts.peek().text!r} after statement")

    def statement(self):
        ts = self.ts
        tok = ts.peek()
        line = _line_of(self.text, tok.offset)
        if tok.kind == "ident" and tok.text.lower() in ("save", "explain") and ts.peek(1).text == "(":
            ts.next()
            ts.expect("(")
            name = self.defined_name()
            if tok.text.lower() == "save":
                ts.expect(",")
                path = self.string()
                ts.expect(")")
                self.script.statements.append(Save(name, path, line))
            else:
                ts.expect(")")
                self.script.statements.append(Explain(name, line))
            return
        if tok.kind != "ident" or ts.peek(1).text != "=":
            self.fail("expected 'name = expression', save(...) or explain(...)")
        name = ts.next().text
        ts.expect("=")
        if name in self.script.defs:
            self.fail(f"{name} is already defined", tok)
        self._target = name
        expr = self.add()
        self.script.defs[name] = expr
        self.script.statements.append(Assign(name, expr, line))

    def defined_name(self) -> str:
        tok = self.ts.expect_kind("ident")
        if tok.text not in self.script.defs:
            self.fail(f"{tok.text} is not defined", tok)
        return tok.text

    def string(self) -> str:
        return self.ts.expect_kind("string").text[1:-1]

    # -- expressions -------------------------------------------------------
    def add(self):
        left = self.mul()
        while self.ts.at("+", "-"):
            op = self.ts.next()
            right = self.mul()
            left = self._combine("+" if op.text == "+" else "-", left, right, op)
        return self._matrix(left)

    def mul(self):
        left = self.mm()
        while self.ts.at(".*", "./"):
            op = self.ts.next()
            right = self.mm()
            left = self._combine("*" if op.text == ".*" else "/", left, right, op)
        return left

    def mm(self):
        left = self.unary()
        while self.ts.at("%*%"):
            op = self.ts.next()
            right = self.unary()
            if isinstance(left, float) or isinstance(right, float):
                self.fail("%*% needs matrix operands", op)
            left = MatMul(left, right)
        return left

    def unary(self):
        if self.ts.accept("-"):
            v = self.unary()
            return -v if isinstance(v, float) else ScalarOp("*", v, -1.0)
        return self.primary()

    def _combine(self, op, left, right, tok):
        ln, rn = isinstance(left, float), isinstance(right, float)
        if ln and rn:
            return {"+": left + right, "-": left - right, "*": left * right,
                    "/": left / right if right else self.fail("division by zero", tok)}[op]
        if op == "-":
            if rn:
                return ScalarOp("+", left, -right)
            right = ScalarOp("*", right, -1.0) if not rn else right
            op = "+"
            if ln:
                return ScalarOp("+", right, left)
        if ln or rn:
            scalar, mat = (left, right) if ln else (right, left)
            if op == "/":
                if ln:
                    self.fail("a number divided by a matrix is not supported", tok)
                if scalar == 0:
                    self.fail("division by zero", tok)
                return ScalarOp("*", mat, 1.0 / scalar)
            return ScalarOp(op, mat, scalar)
        return EWise(op, left, right)

    def _matrix(self, e):
        if isinstance(e, float):
            self.fail("expected a matrix expression, found a number")
        return e

    def primary(self):
        ts = self.ts
        tok = ts.peek()
        if tok.kind == "number":
            ts.next()
            return float(tok.text)
        if ts.accept("("):
            e = self.add_or_number()
            ts.expect(")")
            return e
        if tok.kind != "ident":
            self.fail(f"unexpected {tok.text or 'end of input'!r}")
        name = tok.text
        if ts.peek(1).text == "(":
            ts.next()
            ts.next()
            e = self.call(name.lower(), tok)
            ts.expect(")")
            return e
        ts.next()
        if name not in self.script.defs:
            self.fail(f"{name} is not defined", tok)
        return self.script.defs[name]

    def add_or_number(self):
        left = self.mul()
        while self.ts.at("+", "-"):
            op = self.ts.next()
            left = self._combine("+" if op.text == "+" else "-", left, self.mul(), op)
        return left

    def arg(self):
        self.ts.expect(",")

    def call(self, fn, tok):
        ts = self.ts
        if fn in ("load_sparse", "load_dense"):
            path = self.string()
            name = self._target
            if name in self.script.loads:
                self._anon += 1
                name = f"_m{self._anon}"
            self.script.loads[name] = (path, "mm" if fn == "load_sparse" else "csv")
            return Leaf(name)
        if fn == "t":
            return Transpose(self.add())
        if fn == "log":
            return Unary("log", self.add())
        if fn == "ones":
            m = self.integer()
            self.arg()
            n = self.integer()
            return Const(m, n, 1.0)
        if fn == "select":
            e = self.add()
            self.arg()
            s = ts.expect_kind("string")
            try:
                pred = parse_predicate(s.text[1:-1])
            except ParseError as err:
                self.fail(f"in predicate: {err.msg}", s)
            return Select(pred, e)
        if fn == "project":
            e = self.add()
            attrs = []
            while ts.accept(","):
                t = ts.next()
                if t.kind == "string":
                    attrs.extend(a.strip() for a in t.text[1:-1].replace(",", " ").split())
                elif t.kind == "ident":
                    attrs.append(t.text)
                else:
                    self.fail("expected an attribute name", t)
            return project(e, attrs)
        if fn == "agg":
            f = ts.expect_kind("ident").text.lower()
            self.arg()
            d = ts.expect_kind("ident")
            if d.text.lower() not in _DIM_NAMES:
                self.fail(f"unknown aggregation dimension {d.text!r}", d)
            self.arg()
            return Aggregate(f, _DIM_NAMES[d.text.lower()], self.add())
        if fn == "tagg":
            f = ts.expect_kind("ident").text.lower()
            self.arg()
            d = ts.next()
            text = d.text.lower().lstrip("d")
            if not text.isdigit():
                self.fail(f"expected a tensor dimension like d1, found {d.text!r}", d)
            self.arg()
            return TensorAggregate(f, int(text), self.add())
        if fn == "join":
            a = self.add()
            self.arg()
            b = self.add()
            self.arg()
            g = ts.expect_kind("string")
            self.arg()
            m = ts.expect_kind("string")
            try:
                gamma = parse_gamma(g.text[1:-1])
            except ParseError as err:
                self.fail(f"in join predicate: {err.msg}", g)
            return Join(gamma, self.merge(m), a, b)
        if fn == "cross":
            a = self.add()
            self.arg()
            b = self.add()
            self.arg()
            return Cross(self.merge(ts.expect_kind("string")), a, b)
        self.fail(f"unknown function {fn!r}", tok)

    def merge(self, tok):
        try:
            return parse_merge(tok.text[1:-1], seed=self.seed)
        except ParseError as err:
            self.fail(f"in merge function: {err.msg}", tok)

    def integer(self) -> int:
        tok = self.ts.expect_kind("number")
        v = float(tok.text)
        if not v.is_integer() or v < 1:
            self.fail("expected a positive integer", tok)
        return int(v)


def parse_script(text: str, seed: int = 20240917) -> Script:
    return _Parser(text, seed).parse()
