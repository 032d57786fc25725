"""Small infix expression language for scenario files.

Supports ``+ - * /``, unary minus, parentheses, scalar literals (with an
optional ``deg`` suffix converting to radians), bracketed column vectors
``[a, b, c]``, integer indexing ``v[i]``, identifiers bound to variables,
and registered functions (``sin``, ``cos``, ``tan``, ``sqrt``, ``norm_f``,
``dot`` plus robot-bound ones like ``fk_pos``).

Error positions are 1-based character offsets.
"""
from __future__ import annotations

import math

from . import exprgraph as eg
from .exprgraph import Expr, ShapeError

__all__ = ["DslError", "parse_expression", "default_functions"]


class DslError(ValueError):
    def __init__(self, message: str, position: int):
        super().__init__(f"{message} (at offset {position})")
        self.position = position


_DEFAULT_FNS = {
    "sin": lambda a: eg.sin(a),
    "cos": lambda a: eg.cos(a),
    "tan": lambda a: eg.tan(a),
    "sqrt": lambda a: eg.sqrt(a),
    "norm_f": lambda a: eg.norm_fro(a),
    "dot": lambda a, b: eg.dot(a, b),
}


def default_functions() -> dict:
    return dict(_DEFAULT_FNS)


class _Lexer:
    def __init__(self, text: str):
        self.text = text
        self.pos = 0
        self.tokens: list[tuple[str, object, int]] = []
        self._run()

    def _run(self):
        text = self.text
        n = len(text)
        i = 0
        while i < n:
            ch = text[i]
            if ch.isspace():
                i += 1
                continue
            start = i
            if ch.isdigit() or (ch == "." and i + 1 < n and text[i + 1].isdigit()):
                j = i
                seen_e = False
                while j < n and (text[j].isdigit() or text[j] == "."
                                 or text[j] in "eE"
                                 or (text[j] in "+-" and j > i and text[j - 1] in "eE")):
                    if text[j] in "eE":
                        seen_e = True
                    j += 1
                try:
                    val = float(text[i:j])
                except ValueError:
                    raise DslError(f"bad number literal {text[i:j]!r}", start + 1)
                # optional 'deg' suffix converts to radians
                k = j
                while k < n and text[k].isspace():
                    k += 1
                if text[k:k + 3] == "deg" and (k + 3 >= n or not (text[k + 3].isalnum() or text[k + 3] == "_")):
                    val *= math.pi / 180.0
                    j = k + 3
                self.tokens.append(("num", val, start + 1))
                i = j
                continue
            if ch.isalpha() or ch == "_":
                j = i
                while j < n and (text[j].isalnum() or text[j] == "_"):
                    j += 1
                self.tokens.append(("ident", text[i:j], start + 1))
                i = j
                continue
            if ch in "+-*/(),[]":
                self.tokens.append((ch, ch, start + 1))
                i += 1
                continue
            raise DslError(f"unexpected character {ch!r}", start + 1)
        self.tokens.append(("end", None, n + 1))


class _Parser:
    def __init__(self, text: str, names: dict[str, Expr], functions: dict):
        self.text = text
        self.toks = _Lexer(text).tokens
        self.k = 0
        self.names = names
        self.functions = functions

    def peek(self):
        return self.toks[self.k]

    def next(self):
        tok = self.toks[self.k]
        self.k += 1
        return tok

    def expect(self, kind: str):
        tok = self.next()
        if tok[0] != kind:
            raise DslError(f"expected {kind!r}, found {tok[1]!r}" if tok[0] != "end"
                           else f"expected {kind!r}, found end of input", tok[2])
        return tok

    def parse(self) -> Expr:
        e = self.expr()
        tok = self.peek()
        if tok[0] != "end":
            raise DslError(f"unexpected trailing input {tok[1]!r}", tok[2])
        return e

    def expr(self) -> Expr:
        e = self.term()
        while self.peek()[0] in ("+", "-"):
            op, _, pos = self.next()
            rhs = self.term()
            try:
                e = e + rhs if op == "+" else e - rhs
            except ShapeError as exc:
                raise DslError(str(exc), pos) from exc
        return e

    def term(self) -> Expr:
        e = self.unary()
        while self.peek()[0] in ("*", "/"):
            op, _, pos = self.next()
            rhs = self.unary()
            try:
                if op == "*":
                    e = (e @ rhs if e.cols > 1 and e.cols == rhs.rows and not rhs.is_scalar
                         else e * rhs)
                else:
                    e = e / rhs
            except ShapeError as exc:
                raise DslError(str(exc), pos) from exc
        return e

    def unary(self) -> Expr:
        if self.peek()[0] == "-":
            self.next()
            return -self.unary()
        return self.postfix()

    def postfix(self) -> Expr:
        e = self.primary()
        while self.peek()[0] == "[":
            _, _, pos = self.next()
            idx = self.expect("num")
            if idx[1] != int(idx[1]):
                raise DslError("index must be an integer", idx[2])
            self.expect("]")
            try:
                e = e[int(idx[1])]
            except IndexError as exc:
                raise DslError(str(exc), pos) from exc
        return e

    def primary(self) -> Expr:
        tok = self.next()
        kind, val, pos = tok
        if kind == "num":
            return eg.constant(val)
        if kind == "(":
            e = self.expr()
            self.expect(")")
            return e
        if kind == "[":
            parts = [self.expr()]
            while self.peek()[0] == ",":
                self.next()
                parts.append(self.expr())
            self.expect("]")
            for p in parts:
                if not p.is_scalar and p.cols != 1:
                    raise DslError("vector literals take scalars or column vectors", pos)
            return eg.vertcat(*parts)
        if kind == "ident":
            if self.peek()[0] == "(":
                self.next()
                args = []
                if self.peek()[0] != ")":
                    args.append(self.expr())
                    while self.peek()[0] == ",":
                        self.next()
                        args.append(self.expr())
                self.expect(")")
                fn = self.functions.get(val)
                if fn is None:
                    raise DslError(f"unknown function {val!r}", pos)
                try:
                    return fn(*args)
                except (ShapeError, TypeError, ValueError) as exc:
                    raise DslError(f"{val}: {exc}", pos) from exc
            if val in self.names:
                return self.names[val]
            raise DslError(f"unknown identifier {val!r}", pos)
        if kind == "end":
            raise DslError("unexpected end of input", pos)
        raise DslError(f"unexpected token {val!r}", pos)


def parse_expression(text: str, variables, functions: dict | None = None) -> Expr:
    """Parse DSL text into a shape-checked expression.

    ``variables`` is either a mapping name -> Expr or a
    :class:`~iksim.tasks.VariableSet` (whose symbols become identifiers
    under their own names).
    """
    if hasattr(variables, "all_symbols"):
        names = {}
        for sym in variables.all_symbols():
            names[sym.name] = Expr._variable(sym)
    else:
        names = {k: (v if isinstance(v, Expr) else eg.constant(v))
                 for k, v in dict(variables).items()}
    fns = dict(_DEFAULT_FNS)
    if functions:
        fns.update(functions)
    return _Parser(text, names, fns).parse()
