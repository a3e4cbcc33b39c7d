"""Render statements back to EQL text. Binary and unary expressions are fully parenthesised."""
from __future__ import annotations

from estemd.engine.operators import WindowSpec
from estemd.eql import ast
from estemd.expr import Binary, Call, Column, Literal, Unary


def format_literal(value) -> str:
    if value is None:
        return "NULL"
    if value is True:
        return "TRUE"
    if value is False:
        return "FALSE"
    if isinstance(value, str):
        return "'" + value.replace("'", "''") + "'"
    if isinstance(value, float):
        text = repr(value)
        return text if any(c in text for c in ".eE") else text + ".0"
    return str(int(value))


def format_expr(expr) -> str:
    if isinstance(expr, Literal):
        return format_literal(expr.value)
    if isinstance(expr, Column):
        return expr.name
    if isinstance(expr, Unary):
        sep = " " if expr.op == "NOT" else ""
        return f"({expr.op}{sep}{format_expr(expr.operand)})"
    if isinstance(expr, Binary):
        return f"({format_expr(expr.left)} {expr.op} {format_expr(expr.right)})"
    if isinstance(expr, Call):
        if expr.star:
            return f"{expr.name}(*)"
        return f"{expr.name}({', '.join(format_expr(a) for a in expr.args)})"
    raise TypeError(f"not an expression: {expr!r}")


def format_duration(ms: int) -> str:
    for unit, size in (("HOURS", 3_600_000), ("MINUTES", 60_000), ("SECONDS", 1000)):
        if ms % size == 0:
            return f"{ms // size} {unit}"
    raise ValueError(f"window duration {ms} ms is not a whole number of seconds")


def format_window(w: WindowSpec) -> str:
    if w.kind == "tumbling":
        return f"WINDOW TUMBLING (SIZE {format_duration(w.size_ms)})"
    return f"WINDOW HOPPING (SIZE {format_duration(w.size_ms)}, ADVANCE BY {format_duration(w.advance_ms)})"


def format_select(s: ast.Select) -> str:
    items = []
    for item in s.items:
        if isinstance(item.expr, ast.Star):
            items.append("*")
        else:
            text = format_expr(item.expr)
            items.append(f"{text} AS {item.alias}" if item.alias else text)
    parts = [f"SELECT {', '.join(items)} FROM {s.source}"]
    if s.where is not None:
        parts.append(f"WHERE {format_expr(s.where)}")
    if s.window is not None:
        parts.append(format_window(s.window))
    if s.group_by:
        parts.append(f"GROUP BY {', '.join(s.group_by)}")
    if s.emit:
        parts.append(f"EMIT {s.emit}")
    if s.limit is not None:
        parts.append(f"LIMIT {s.limit}")
    return " ".join(parts)


def format_statement(stmt: ast.Statement) -> str:
    if isinstance(stmt, ast.Select):
        return format_select(stmt) + ";"
    if isinstance(stmt, ast.CreateStream):
        if stmt.query is not None:
            return f"CREATE STREAM {stmt.name} AS {format_select(stmt.query)};"
        cols = ", ".join(
            f"{c.name} {c.type.value}{' NOT NULL' if c.not_null else ''}" for c in stmt.columns
        )
        props = ", ".join(f"{k} = {format_literal(v)}" for k, v in stmt.properties)
        return f"CREATE STREAM {stmt.name} ({cols}) WITH ({props});"
    if isinstance(stmt, ast.ShowTopics):
        return "SHOW TOPICS;"
    if isinstance(stmt, ast.ShowStreams):
        return "SHOW STREAMS;"
    if isinstance(stmt, ast.ShowQueries):
        return "SHOW QUERIES;"
    if isinstance(stmt, ast.Terminate):
        return f"TERMINATE {stmt.query_id};"
    raise TypeError(f"not a statement: {stmt!r}")
