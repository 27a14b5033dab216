"""Recursive-descent parser for polynomial expressions.

Grammar::

    expr   := term (('+' | '-') term)*
    term   := factor ('*' factor)*
    factor := number | var ['^' int] | '(' expr ')' ['^' int] | '-' factor

Whitespace is ignored. Numbers accept decimal and exponent notation.
"""
from __future__ import annotations

import re
from typing import Sequence

from .polynomial import Polynomial

_TOKEN = re.compile(
    r"\s*(?:(?P<num>\d+\.?\d*(?:[eE][+-]?\d+)?|\.\d+(?:[eE][+-]?\d+)?)"
    r"|(?P<name>[A-Za-z_][A-Za-z_0-9]*)"
    r"|(?P<op>[-+*^()]))"
)


class PolySyntaxError(ValueError):
    def __init__(self, msg: str, text: str, pos: int):
        self.pos = pos
        self.text = text
        super().__init__(f"{msg} at position {pos}: {text!r}")


def _tokenize(text: str):
    pos = 0
    out = []
    while pos < len(text):
        if text[pos:].strip() == "":
            break
        m = _TOKEN.match(text, pos)
        if not m or m.end() == pos:
            raise PolySyntaxError("unexpected character", text, pos)
        start = m.start(m.lastgroup)
        out.append((m.lastgroup, m.group(m.lastgroup), start))
        pos = m.end()
    out.append(("end", "", len(text)))
    return out


class _Parser:
    def __init__(self, text: str, variables: Sequence[str]):
        self.text = text
        self.names = {name: i for i, name in enumerate(variables)}
        self.nvars = len(variables)
        self.toks = _tokenize(text)
        self.i = 0

    def peek(self):
        return self.toks[self.i]

    def take(self):
        tok = self.toks[self.i]
        self.i += 1
        return tok

    def fail(self, msg):
        raise PolySyntaxError(msg, self.text, self.peek()[2])

    def parse(self) -> Polynomial:
        p = self.expr()
        if self.peek()[0] != "end":
            self.fail(f"unexpected token {self.peek()[1]!r}")
        return p

    def expr(self) -> Polynomial:
        p = self.term()
        while self.peek()[:2] in (("op", "+"), ("op", "-")):
            op = self.take()[1]
            q = self.term()
            p = p + q if op == "+" else p - q
        return p

    def term(self) -> Polynomial:
        p = self.factor()
        while self.peek()[:2] == ("op", "*"):
            self.take()
            p = p * self.factor()
        return p

    def exponent(self) -> int:
        kind, val, _ = self.peek()
        if kind != "num" or not val.isdigit():
            self.fail("expected a non-negative integer exponent")
        self.take()
        return int(val)

    def factor(self) -> Polynomial:
        kind, val, _ = self.peek()
        if kind == "num":
            self.take()
            return Polynomial.constant(self.nvars, float(val))
        if kind == "name":
            if val not in self.names:
                self.fail(f"unknown identifier {val!r}")
            self.take()
            p = Polynomial.variable(self.nvars, self.names[val])
            if self.peek()[:2] == ("op", "^"):
                self.take()
                p = p ** self.exponent()
            return p
        if (kind, val) == ("op", "("):
            self.take()
            p = self.expr()
            if self.peek()[:2] != ("op", ")"):
                self.fail("expected ')'")
            self.take()
            if self.peek()[:2] == ("op", "^"):
                self.take()
                p = p ** self.exponent()
            return p
        if (kind, val) == ("op", "-"):
            self.take()
            return -self.factor()
        if kind == "end":
            self.fail("unexpected end of input")
        self.fail(f"unexpected token {val!r}")


def parse_poly(text: str, variables: Sequence[str]) -> Polynomial:
    """Parse ``text`` into a :class:`Polynomial` over the named ``variables``.

    >>> parse_poly("x1^2 + 2*x1*x2", ["x1", "x2"]).eval([1.0, 1.0])
    3.0
    """
    if not variables:
        raise ValueError("at least one variable name is required")
    if len(set(variables)) != len(variables):
        raise ValueError("duplicate variable names")
    return _Parser(text, list(variables)).parse()
