"""Recursive-descent parser for EQL.

Expression precedence, loosest first: OR, AND, NOT, comparison, additive,
multiplicative, unary minus, primary. Comparisons do not chain.
"""
from __future__ import annotations

from typing import Optional, Union

from estemd.engine.operators import WindowSpec
from estemd.eql import ast
from estemd.eql.lexer import EOF, FLOAT, IDENT, INTEGER, KEYWORD, OPERATOR, PUNCT, STRING, Token, tokenize
from estemd.errors import EqlSyntaxError, SchemaError
from estemd.expr import Binary, Call, Column, Literal, Unary
from estemd.model import INT64_MAX, ScalarType

UNIT_MS = {"SECONDS": 1000, "MINUTES": 60_000, "HOURS": 3_600_000}
MAX_DEPTH = 64

_COMPARE_OPS = ("=", "!=", "<", "<=", ">", ">=")


def _describe(tok: Token) -> str:
    if tok.kind == EOF:
        return "end of input"
    if tok.kind == STRING:
        return f"'{tok.text}'"
    return tok.text


class Parser:
    def __init__(self, tokens: list[Token]):
        end = tokens[-1].end if tokens else 0
        self.tokens = list(tokens) + [Token(EOF, "", end, end)]
        self.pos = 0
        self.depth = 0

    # -- helpers ----------------------------------------------------------

    def peek(self, ahead: int = 0) -> Token:
        return self.tokens[min(self.pos + ahead, len(self.tokens) - 1)]

    def advance(self) -> Token:
        tok = self.tokens[self.pos]
        if tok.kind != EOF:
            self.pos += 1
        return tok

    def at_kw(self, *words: str) -> bool:
        tok = self.peek()
        return tok.kind == KEYWORD and tok.text in words

    def at_punct(self, p: str) -> bool:
        tok = self.peek()
        return tok.kind == PUNCT and tok.text == p

    def at_op(self, *ops: str) -> bool:
        tok = self.peek()
        return tok.kind == OPERATOR and tok.text in ops

    def fail(self, expected: Union[str, tuple]) -> EqlSyntaxError:
        if isinstance(expected, str):
            expected = (expected,)
        tok = self.peek()
        return EqlSyntaxError(
            f"expected {' or '.join(expected)}, found {_describe(tok)}", tok.start, expected
        )

    def expect_kw(self, word: str) -> Token:
        if not self.at_kw(word):
            raise self.fail(word)
        return self.advance()

    def expect_punct(self, p: str) -> Token:
        if not self.at_punct(p):
            raise self.fail(f"'{p}'")
        return self.advance()

    def expect_ident(self, what: str = "identifier") -> str:
        tok = self.peek()
        if tok.kind != IDENT:
            raise self.fail(what)
        self.advance()
        return tok.text

    def expect_int(self) -> int:
        tok = self.peek()
        if tok.kind != INTEGER:
            raise self.fail("integer")
        self.advance()
        v = int(tok.text)
        if v > INT64_MAX:
            raise EqlSyntaxError("integer literal out of range", tok.start)
        return v

    # -- statements -------------------------------------------------------

    def parse_statement(self) -> ast.Statement:
        if self.at_kw("SELECT"):
            stmt = self.parse_select()
        elif self.at_kw("CREATE"):
            stmt = self.parse_create()
        elif self.at_kw("SHOW"):
            stmt = self.parse_show()
        elif self.at_kw("TERMINATE"):
            self.advance()
            stmt = ast.Terminate(self.expect_ident("query id"))
        else:
            raise self.fail(("SELECT", "CREATE", "SHOW", "TERMINATE"))
        self.expect_punct(";")
        if self.peek().kind != EOF:
            raise self.fail("end of input")
        return stmt

    def parse_show(self) -> ast.Statement:
        self.expect_kw("SHOW")
        tok = self.peek()
        if tok.kind == IDENT and tok.text in ("TOPICS", "STREAMS", "QUERIES"):
            self.advance()
            return {"TOPICS": ast.ShowTopics, "STREAMS": ast.ShowStreams, "QUERIES": ast.ShowQueries}[tok.text]()
        raise self.fail(("TOPICS", "STREAMS", "QUERIES"))

    def parse_create(self) -> ast.CreateStream:
        self.expect_kw("CREATE")
        self.expect_kw("STREAM")
        name = self.expect_ident("stream name")
        if self.at_kw("AS"):
            self.advance()
            return ast.CreateStream(name, query=self.parse_select())
        if not self.at_punct("("):
            raise self.fail(("'('", "AS"))
        self.advance()
        cols = [self.parse_column()]
        while self.at_punct(","):
            self.advance()
            cols.append(self.parse_column())
        self.expect_punct(")")
        self.expect_kw("WITH")
        self.expect_punct("(")
        props = [self.parse_prop()]
        while self.at_punct(","):
            self.advance()
            props.append(self.parse_prop())
        self.expect_punct(")")
        return ast.CreateStream(name, tuple(cols), tuple(props))

    def parse_column(self) -> ast.ColumnDef:
        name = self.expect_ident("column name")
        tok = self.peek()
        if tok.kind not in (IDENT, KEYWORD):
            raise self.fail("type name")
        try:
            ctype = ScalarType.parse(tok.text)
        except SchemaError:
            raise EqlSyntaxError(f"unknown type {tok.text}", tok.start, ("type name",)) from None
        self.advance()
        not_null = False
        if self.at_kw("NOT"):
            self.advance()
            self.expect_kw("NULL")
            not_null = True
        return ast.ColumnDef(name, ctype, not_null)

    def parse_prop(self):
        name = self.expect_ident("property name")
        if not self.at_op("="):
            raise self.fail("'='")
        self.advance()
        tok = self.peek()
        if tok.kind == STRING:
            value = tok.text
        elif tok.kind == INTEGER:
            value = int(tok.text)
        elif tok.kind == FLOAT:
            value = float(tok.text)
        elif tok.kind == KEYWORD and tok.text in ("TRUE", "FALSE"):
            value = tok.text == "TRUE"
        else:
            raise self.fail("literal")
        self.advance()
        return (name, value)

    def parse_select(self) -> ast.Select:
        self.expect_kw("SELECT")
        items = [self.parse_item()]
        while self.at_punct(","):
            self.advance()
            items.append(self.parse_item())
        self.expect_kw("FROM")
        source = self.expect_ident("stream name")
        where = window = emit = limit = None
        group_by: list[str] = []
        if self.at_kw("WHERE"):
            self.advance()
            where = self.parse_expr()
        if self.at_kw("WINDOW"):
            window = self.parse_window()
        if self.at_kw("GROUP"):
            self.advance()
            self.expect_kw("BY")
            group_by.append(self.expect_ident("column name"))
            while self.at_punct(","):
                self.advance()
                group_by.append(self.expect_ident("column name"))
        if self.at_kw("EMIT"):
            self.advance()
            if not self.at_kw("CHANGES", "ABSENCE"):
                raise self.fail(("CHANGES", "ABSENCE"))
            emit = self.advance().text
        if self.at_kw("LIMIT"):
            self.advance()
            tok = self.peek()
            limit = self.expect_int()
            if limit < 1:
                raise EqlSyntaxError("LIMIT must be positive", tok.start, ("positive integer",))
        return ast.Select(tuple(items), source, where, window, tuple(group_by), emit, limit)

    def parse_item(self) -> ast.SelectItem:
        if self.at_op("*"):
            self.advance()
            return ast.SelectItem(ast.Star())
        expr = self.parse_expr()
        alias = None
        if self.at_kw("AS"):
            self.advance()
            alias = self.expect_ident("alias")
        return ast.SelectItem(expr, alias)

    def parse_duration(self) -> int:
        n = self.expect_int()
        if not self.at_kw(*UNIT_MS):
            raise self.fail(tuple(UNIT_MS))
        ms = n * UNIT_MS[self.advance().text]
        if ms <= 0 or ms > INT64_MAX:
            raise EqlSyntaxError("window duration out of range", self.peek().start)
        return ms

    def parse_window(self) -> WindowSpec:
        self.expect_kw("WINDOW")
        if not self.at_kw("TUMBLING", "HOPPING"):
            raise self.fail(("TUMBLING", "HOPPING"))
        kind = self.advance().text
        self.expect_punct("(")
        self.expect_kw("SIZE")
        size = self.parse_duration()
        advance = None
        if kind == "HOPPING":
            self.expect_punct(",")
            self.expect_kw("ADVANCE")
            self.expect_kw("BY")
            tok = self.peek()
            advance = self.parse_duration()
            if advance > size:
                raise EqlSyntaxError("ADVANCE must not exceed SIZE", tok.start)
        self.expect_punct(")")
        if kind == "TUMBLING":
            return WindowSpec.tumbling(size)
        return WindowSpec.hopping(size, advance)

    # -- expressions ------------------------------------------------------

    def parse_expr(self):
        self.depth += 1
        if self.depth > MAX_DEPTH:
            raise EqlSyntaxError("expression nested too deeply", self.peek().start)
        try:
            return self.parse_or()
        finally:
            self.depth -= 1

    def parse_or(self):
        left = self.parse_and()
        while self.at_kw("OR"):
            self.advance()
            left = Binary("OR", left, self.parse_and())
        return left

    def parse_and(self):
        left = self.parse_not()
        while self.at_kw("AND"):
            self.advance()
            left = Binary("AND", left, self.parse_not())
        return left

    def parse_not(self):
        if self.at_kw("NOT"):
            self.advance()
            self.depth += 1
            if self.depth > MAX_DEPTH:
                raise EqlSyntaxError("expression nested too deeply", self.peek().start)
            try:
                return Unary("NOT", self.parse_not())
            finally:
                self.depth -= 1
        return self.parse_comparison()

    def parse_comparison(self):
        left = self.parse_additive()
        if self.at_op(*_COMPARE_OPS):
            op = self.advance().text
            left = Binary(op, left, self.parse_additive())
        return left

    def parse_additive(self):
        left = self.parse_multiplicative()
        while self.at_op("+", "-"):
            op = self.advance().text
            left = Binary(op, left, self.parse_multiplicative())
        return left

    def parse_multiplicative(self):
        left = self.parse_unary()
        while self.at_op("*", "/"):
            op = self.advance().text
            left = Binary(op, left, self.parse_unary())
        return left

    def parse_unary(self):
        if self.at_op("-"):
            self.advance()
            self.depth += 1
            if self.depth > MAX_DEPTH:
                raise EqlSyntaxError("expression nested too deeply", self.peek().start)
            try:
                return Unary("-", self.parse_unary())
            finally:
                self.depth -= 1
        return self.parse_primary()

    def parse_primary(self):
        tok = self.peek()
        if tok.kind == INTEGER:
            self.advance()
            v = int(tok.text)
            if v > INT64_MAX:
                raise EqlSyntaxError("integer literal out of range", tok.start)
            return Literal(v, ScalarType.INT)
        if tok.kind == FLOAT:
            self.advance()
            v = float(tok.text)
            if v != v or v in (float("inf"), float("-inf")):
                raise EqlSyntaxError("float literal out of range", tok.start)
            return Literal(v, ScalarType.FLOAT)
        if tok.kind == STRING:
            self.advance()
            return Literal(tok.text, ScalarType.TEXT)
        if tok.kind == KEYWORD and tok.text in ("TRUE", "FALSE"):
            self.advance()
            return Literal(tok.text == "TRUE", ScalarType.BOOL)
        if tok.kind == KEYWORD and tok.text == "NULL":
            self.advance()
            return Literal(None, None)
        if tok.kind == IDENT:
            self.advance()
            if self.at_punct("("):
                return self.parse_call(tok.text)
            return Column(tok.text)
        if self.at_punct("("):
            self.advance()
            inner = self.parse_expr()
            self.expect_punct(")")
            return inner
        raise self.fail("expression")

    def parse_call(self, name: str) -> Call:
        self.expect_punct("(")
        if self.at_op("*"):
            self.advance()
            self.expect_punct(")")
            return Call(name, (), star=True)
        args = []
        if not self.at_punct(")"):
            args.append(self.parse_expr())
            while self.at_punct(","):
                self.advance()
                args.append(self.parse_expr())
        self.expect_punct(")")
        return Call(name, tuple(args))


def parse(source: Union[str, list[Token]]) -> ast.Statement:
    """Parse exactly one ``;``-terminated statement."""
    tokens = tokenize(source) if isinstance(source, str) else source
    try:
        return Parser(tokens).parse_statement()
    except RecursionError:
        raise EqlSyntaxError("statement nested too deeply", 0) from None


def split_statements(text: str) -> list[str]:
    """Split a script into statement texts at top-level ``;`` tokens."""
    tokens = tokenize(text)
    raw = text.encode("utf-8", "surrogatepass")
    out = []
    start: Optional[int] = None
    for tok in tokens:
        if start is None:
            start = tok.start
        if tok.kind == PUNCT and tok.text == ";":
            out.append(raw[start : tok.end].decode("utf-8", "surrogatepass"))
            start = None
    if start is not None:
        raise EqlSyntaxError("expected ';', found end of input", len(raw), ("';'",))
    return out


def parse_script(text: str) -> list[ast.Statement]:
    return [parse(s) for s in split_statements(text)]
