"""Name resolution, type checking and output-schema inference."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Optional

from estemd.engine.operators import ABSENT, WINDOW_END, WINDOW_START, Aggregation, AggSpec, output_schema
from estemd.eql import ast
from estemd.errors import SchemaError, SemanticError
from estemd.expr import AGGREGATES, Call, Column, contains_aggregate, infer_type, output_type
from estemd.model import Field, ScalarType, Schema, canon, check_identifier

STREAM_FORMATS = ("json", "csv")
STREAM_PROPERTIES = ("TOPIC", "FORMAT", "TIMESTAMP")


@dataclass(frozen=True)
class StreamInfo:
    name: str
    topic: str
    schema: Schema
    format: str = "json"
    derived: bool = False

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "topic": self.topic,
            "format": self.format,
            "derived": self.derived,
            "schema": self.schema.to_json(),
        }


@dataclass(frozen=True)
class AnalyzedSelect:
    select: ast.Select
    source: StreamInfo
    kind: str  # "stateless" | "aggregate" | "absence"
    columns: tuple  # (name, expr) per output column; expr is None for window fields
    aggregates: tuple  # AggSpec, aggregate selects only
    output: Schema
    persistent: bool


@dataclass(frozen=True)
class AnalyzedCreate:
    statement: ast.CreateStream
    stream: StreamInfo
    query: Optional[AnalyzedSelect] = None


def _lookup(catalog: Mapping[str, StreamInfo], name: str) -> StreamInfo:
    try:
        return catalog[canon(name)]
    except KeyError:
        raise SemanticError(f"unknown stream {name}") from None


def _check_bool(expr, schema: Schema, what: str) -> None:
    if contains_aggregate(expr):
        raise SemanticError(f"aggregates are not allowed in {what}")
    t = infer_type(expr, schema)
    if t not in (None, ScalarType.BOOL):
        raise SemanticError(f"{what} must be BOOLEAN, got {t.value}")


def _unique(names: list[str]) -> None:
    seen = set()
    for n in names:
        if n in seen:
            raise SemanticError(f"duplicate output column {n}")
        seen.add(n)


def analyze_select(select: ast.Select, catalog: Mapping[str, StreamInfo], persistent: bool = False) -> AnalyzedSelect:
    source = _lookup(catalog, select.source)
    schema = source.schema
    if persistent and select.limit is not None:
        raise SemanticError("LIMIT is only valid on interactive queries")
    has_agg = any(not isinstance(i.expr, ast.Star) and contains_aggregate(i.expr) for i in select.items)

    if select.emit == "ABSENCE":
        if select.window is None or select.where is None:
            raise SemanticError("EMIT ABSENCE requires a WINDOW and a WHERE clause")
        if has_agg or select.group_by:
            raise SemanticError("EMIT ABSENCE cannot be combined with aggregates or GROUP BY")
        _check_bool(select.where, schema, "WHERE")
        neg_schema = Schema(
            (
                Field(WINDOW_START, ScalarType.TIMESTAMP, False),
                Field(WINDOW_END, ScalarType.TIMESTAMP, False),
                Field(ABSENT, ScalarType.BOOL, False),
            )
        )
        names = []
        for item in select.items:
            if isinstance(item.expr, ast.Star):
                names.extend(neg_schema.names)
            elif isinstance(item.expr, Column) and item.expr.name in neg_schema and item.alias in (None, item.expr.name):
                names.append(item.expr.name)
            else:
                raise SemanticError("EMIT ABSENCE selects may only name WINDOW_START, WINDOW_END, ABSENT or *")
        _unique(names)
        output = Schema(tuple(neg_schema.field(n) for n in names))
        return AnalyzedSelect(select, source, "absence", tuple((n, None) for n in names), (), output, persistent)

    if select.where is not None:
        _check_bool(select.where, schema, "WHERE")

    if has_agg:
        if select.window is None:
            raise SemanticError("aggregate functions require a WINDOW clause")
        for g in select.group_by:
            if g not in schema:
                raise SemanticError(f"unknown column {g}")
        group = set(select.group_by)
        fields = [
            Field(WINDOW_START, ScalarType.TIMESTAMP, False),
            Field(WINDOW_END, ScalarType.TIMESTAMP, False),
        ]
        columns: list = [(WINDOW_START, None), (WINDOW_END, None)]
        aggs = []
        for item in select.items:
            e = item.expr
            if isinstance(e, ast.Star):
                raise SemanticError("* cannot be combined with aggregate functions")
            if isinstance(e, Column):
                if e.name not in schema:
                    raise SemanticError(f"unknown column {e.name}")
                if e.name not in group:
                    raise SemanticError(f"column {e.name} must appear in GROUP BY or inside an aggregate")
                name = item.alias or e.name
                fields.append(Field(name, schema.field(e.name).type))
                columns.append((name, e))
                continue
            if not (isinstance(e, Call) and e.name in AGGREGATES):
                raise SemanticError("aggregate selects may only contain aggregate calls and GROUP BY columns")
            if e.star:
                if e.name != "COUNT":
                    raise SemanticError(f"{e.name}(*) is not valid")
                arg = None
            else:
                if len(e.args) != 1 or not isinstance(e.args[0], Column):
                    raise SemanticError(f"{e.name} takes exactly one column argument")
                arg = e.args[0].name
                if arg not in schema:
                    raise SemanticError(f"unknown column {arg}")
            alias = item.alias or (e.name if arg is None else f"{e.name}_{arg}")
            spec = AggSpec(e.name, arg, alias)
            aggs.append(spec)
            columns.append((spec.alias, e))
        agg_schema = output_schema(Aggregation(tuple(aggs), select.window, select.group_by), schema)
        for name, e in columns[2:]:
            if isinstance(e, Call):
                fields.append(agg_schema.field(name))
        by_name = {f.name: f for f in fields}
        names = [n for n, _ in columns]
        _unique(names)
        output = Schema(tuple(by_name[n] for n in names))
        return AnalyzedSelect(select, source, "aggregate", tuple(columns), tuple(aggs), output, persistent)

    if select.window is not None:
        raise SemanticError("WINDOW requires aggregate functions or EMIT ABSENCE")
    if select.group_by:
        raise SemanticError("GROUP BY requires aggregate functions")
    columns = []
    fields = []
    for i, item in enumerate(select.items):
        if isinstance(item.expr, ast.Star):
            for f in schema.fields:
                columns.append((f.name, Column(f.name)))
                fields.append(f)
            continue
        e = item.expr
        if isinstance(e, Column) and item.alias is None:
            name = e.name
        else:
            name = item.alias or f"COL_{i}"
        t = output_type(e, schema)
        if isinstance(e, Column):
            fields.append(Field(name, t, schema.field(e.name).nullable))
        else:
            fields.append(Field(name, t))
        columns.append((name, e))
    _unique([n for n, _ in columns])
    return AnalyzedSelect(select, source, "stateless", tuple(columns), (), Schema(tuple(fields)), persistent)


def analyze_create(stmt: ast.CreateStream, catalog: Mapping[str, StreamInfo]) -> AnalyzedCreate:
    name = canon(stmt.name)
    if name in catalog:
        raise SemanticError(f"stream {name} already exists")
    if stmt.query is not None:
        query = analyze_select(stmt.query, catalog, persistent=True)
        return AnalyzedCreate(stmt, StreamInfo(name, stmt.name, query.output, "json", True), query)
    for key, _ in stmt.properties:
        if key not in STREAM_PROPERTIES:
            raise SemanticError(f"unknown stream property {key}")
    topic = stmt.prop("TOPIC", stmt.name)
    fmt = stmt.prop("FORMAT", "json")
    ts = stmt.prop("TIMESTAMP")
    if not isinstance(topic, str):
        raise SemanticError("TOPIC must be a text literal")
    try:
        check_identifier(topic, "topic name")
    except Exception as exc:
        raise SemanticError(str(exc)) from None
    if not isinstance(fmt, str) or fmt.lower() not in STREAM_FORMATS:
        raise SemanticError(f"FORMAT must be one of {', '.join(STREAM_FORMATS)}")
    if ts is not None and not isinstance(ts, str):
        raise SemanticError("TIMESTAMP must name a column")
    try:
        schema = Schema(tuple(Field(c.name, c.type, not c.not_null) for c in stmt.columns), ts)
    except SchemaError as exc:
        raise SemanticError(exc.message) from None
    return AnalyzedCreate(stmt, StreamInfo(name, topic, schema, fmt.lower(), False))


def analyze(stmt: ast.Statement, catalog: Mapping[str, StreamInfo]):
    """Check a parsed statement against the catalog.

    Returns an :class:`AnalyzedSelect`, an :class:`AnalyzedCreate`, or the
    statement itself for SHOW/TERMINATE (nothing to resolve).
    """
    if isinstance(stmt, ast.Select):
        return analyze_select(stmt, catalog)
    if isinstance(stmt, ast.CreateStream):
        return analyze_create(stmt, catalog)
    return stmt
