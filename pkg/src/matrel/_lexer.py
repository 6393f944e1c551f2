"""Tokenizer shared by the predicate, merge-function and script parsers."""
from __future__ import annotations

import re
from typing import NamedTuple

from .errors import ParseError

_TOKEN_RE = re.compile(r"""
    (?P<ws>[ \t\r]+|\#[^\n]*)
  | (?P<newline>\n)
  | (?P<number>(?:\d+\.\d*|\.\d+|\d+)(?:[eE][+-]?\d+)?)
  | (?P<string>"[^"\n]*"|'[^'\n]*')
  | (?P<ident>[A-Za-z_][A-Za-z_0-9]*)
  | (?P<op>%\*%|\.\*|\./|<=|>=|!=|<>|==|&&|\|\||[-+*/<>=(),;!])
""", re.VERBOSE)


class Token(NamedTuple):
    kind: str      # number | string | ident | op | newline | eof
    text: str
    offset: int

    @property
    def upper(self) -> str:
        return self.text.upper()


def tokenize(text: str, keep_newlines: bool = False) -> list[Token]:
    out = []
    pos = 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            raise ParseError(f"unexpected character {text[pos]!r}", offset=pos)
        kind = m.lastgroup
        if kind == "newline":
            if keep_newlines:
                out.append(Token("newline", "\n", pos))
        elif kind != "ws":
            out.append(Token(kind, m.group(), pos))
        pos = m.end()
    out.append(Token("eof", "", len(text)))
    return out


class TokenStream:
    def __init__(self, tokens: list[Token]):
        self.tokens = tokens
        self.i = 0

    def peek(self, k: int = 0) -> Token:
        return self.tokens[min(self.i + k, len(self.tokens) - 1)]

    def next(self) -> Token:
        tok = self.peek()
        self.i += 1
        return tok

    def at(self, *texts: str) -> bool:
        tok = self.peek()
        return tok.kind in ("op", "ident") and tok.upper in {t.upper() for t in texts}

    def accept(self, *texts: str) -> Token | None:
        if self.at(*texts):
            return self.next()
        return None

    def expect(self, *texts: str) -> Token:
        tok = self.peek()
        if not self.at(*texts):
            want = " or ".join(repr(t) for t in texts)
            raise ParseError(f"expected {want}, found {tok.text or 'end of input'!r}",
                             offset=tok.offset)
        return self.next()

    def expect_kind(self, kind: str) -> Token:
        tok = self.peek()
        if tok.kind != kind:
            raise ParseError(f"expected {kind}, found {tok.text or 'end of input'!r}",
                             offset=tok.offset)
        return self.next()
