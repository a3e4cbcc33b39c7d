"""Operator nodes and the stateless operators' semantics."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Callable, Mapping, Optional

from estemd.errors import SemanticError
from estemd.expr import Expr, compile_expr, eval_expr, infer_type, output_type
from estemd.model import Field, Record, ScalarType, Schema, canon

WINDOW_START = "WINDOW_START"
WINDOW_END = "WINDOW_END"
ABSENT = "ABSENT"

AGG_FUNCTIONS = ("AVG", "SUM", "COUNT", "MIN", "MAX")


@dataclass(frozen=True)
class WindowSpec:
    """Event-time windows aligned to epoch 0; ``[start, start + size)``."""

    kind: str  # "tumbling" | "hopping"
    size_ms: int
    advance_ms: Optional[int] = None
    grace_ms: int = 0

    def __post_init__(self):
        if self.kind not in ("tumbling", "hopping"):
            raise ValueError(f"unknown window kind {self.kind!r}")
        if self.size_ms <= 0:
            raise ValueError("window size must be positive")
        if self.kind == "tumbling":
            if self.advance_ms not in (None, self.size_ms):
                raise ValueError("tumbling windows do not take an advance")
            object.__setattr__(self, "advance_ms", self.size_ms)
        elif self.advance_ms is None or not 0 < self.advance_ms <= self.size_ms:
            raise ValueError("hopping windows need 0 < advance <= size")
        if self.grace_ms < 0:
            raise ValueError("grace must be >= 0")

    @classmethod
    def tumbling(cls, size_ms: int, grace_ms: int = 0) -> "WindowSpec":
        return cls("tumbling", size_ms, None, grace_ms)

    @classmethod
    def hopping(cls, size_ms: int, advance_ms: int, grace_ms: int = 0) -> "WindowSpec":
        return cls("hopping", size_ms, advance_ms, grace_ms)

    def starts_for(self, t: int) -> range:
        """Starts of every window containing event time ``t``, ascending."""
        adv = self.advance_ms
        hi = t // adv
        lo = max(0, (t - self.size_ms) // adv + 1)
        return range(lo * adv, hi * adv + 1, adv)

    def closes_at(self, start: int) -> int:
        """Watermark at which the window starting at ``start`` closes."""
        return start + self.size_ms + self.grace_ms


@dataclass(frozen=True)
class AggSpec:
    function: str
    field: Optional[str]  # None means COUNT(*)
    alias: str

    def __post_init__(self):
        fn = self.function.upper()
        if fn not in AGG_FUNCTIONS:
            raise ValueError(f"unknown aggregate {self.function!r}")
        if self.field is None and fn != "COUNT":
            raise ValueError(f"{fn} needs a field")
        object.__setattr__(self, "function", fn)
        object.__setattr__(self, "alias", canon(self.alias))
        if self.field is not None:
            object.__setattr__(self, "field", canon(self.field))


@dataclass(frozen=True)
class Filter:
    predicate: Expr


@dataclass(frozen=True)
class Map:
    assignments: tuple  # of (name, expr)

    def __post_init__(self):
        object.__setattr__(self, "assignments", tuple((canon(n), e) for n, e in self.assignments))


@dataclass(frozen=True)
class FlatMap:
    """Emit one record per expression, each with ``field`` set to that value.

    The expression list plays the role of a list-valued expression; there is
    no list scalar type.
    """

    field: str
    exprs: tuple

    def __post_init__(self):
        object.__setattr__(self, "field", canon(self.field))
        object.__setattr__(self, "exprs", tuple(self.exprs))


@dataclass(frozen=True)
class Projection:
    fields: tuple

    def __post_init__(self):
        object.__setattr__(self, "fields", tuple(canon(f) for f in self.fields))


@dataclass(frozen=True)
class Aggregation:
    functions: tuple
    window: WindowSpec
    group_by: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "functions", tuple(self.functions))
        object.__setattr__(self, "group_by", tuple(canon(g) for g in self.group_by))


@dataclass(frozen=True)
class Negation:
    predicate: Expr
    window: WindowSpec


STATELESS = (Filter, Map, FlatMap, Projection)
WINDOWED = (Aggregation, Negation)


def is_stateless(node) -> bool:
    return isinstance(node, STATELESS)


# -- schemas --------------------------------------------------------------


def _with_field(fields: list[Field], name: str, ftype: ScalarType) -> list[Field]:
    out = [f for f in fields if f.name != name]
    if len(out) == len(fields):
        return fields + [Field(name, ftype)]
    return [Field(name, ftype) if f.name == name else f for f in fields]


def output_schema(node, schema: Schema) -> Schema:
    """Schema produced by ``node`` given its input schema; raises on type errors."""
    if isinstance(node, Filter):
        t = infer_type(node.predicate, schema)
        if t not in (None, ScalarType.BOOL):
            raise SemanticError(f"filter predicate must be BOOLEAN, got {t.value}")
        return schema
    if isinstance(node, Map):
        fields = list(schema.fields)
        for name, e in node.assignments:
            fields = _with_field(fields, name, output_type(e, schema))
        return Schema(tuple(fields))
    if isinstance(node, FlatMap):
        types = {output_type(e, schema) for e in node.exprs}
        if len(types) > 1:
            if types <= {ScalarType.INT, ScalarType.FLOAT}:
                types = {ScalarType.FLOAT}
            else:
                raise SemanticError("flat-map expressions must share one type")
        ftype = types.pop() if types else ScalarType.TEXT
        return Schema(tuple(_with_field(list(schema.fields), node.field, ftype)))
    if isinstance(node, Projection):
        fields = []
        for name in node.fields:
            if name not in schema:
                raise SemanticError(f"unknown column {name}")
            fields.append(schema.field(name))
        return Schema(tuple(fields))
    if isinstance(node, Aggregation):
        fields = [Field(WINDOW_START, ScalarType.TIMESTAMP, False), Field(WINDOW_END, ScalarType.TIMESTAMP, False)]
        for g in node.group_by:
            if g not in schema:
                raise SemanticError(f"unknown column {g}")
            fields.append(schema.field(g))
        for a in node.functions:
            if a.field is None:
                fields.append(Field(a.alias, ScalarType.INT, False))
                continue
            if a.field not in schema:
                raise SemanticError(f"unknown column {a.field}")
            ftype = schema.field(a.field).type
            if a.function in ("AVG", "SUM") and ftype not in (ScalarType.INT, ScalarType.FLOAT):
                raise SemanticError(f"{a.function} needs a numeric column, {a.field} is {ftype.value}")
            if a.function == "AVG":
                ftype = ScalarType.FLOAT
            elif a.function == "COUNT":
                ftype = ScalarType.INT
            fields.append(Field(a.alias, ftype, a.function == "COUNT"))
        return Schema(tuple(fields))
    if isinstance(node, Negation):
        t = infer_type(node.predicate, schema)
        if t not in (None, ScalarType.BOOL):
            raise SemanticError(f"negation predicate must be BOOLEAN, got {t.value}")
        return Schema(
            (
                Field(WINDOW_START, ScalarType.TIMESTAMP, False),
                Field(WINDOW_END, ScalarType.TIMESTAMP, False),
                Field(ABSENT, ScalarType.BOOL, False),
            )
        )
    raise TypeError(f"unknown operator node {node!r}")


# -- stateless semantics --------------------------------------------------


def apply_values(node, value: Mapping[str, Any]) -> list[dict]:
    """Reference semantics of a stateless node on one field map."""
    if isinstance(node, Filter):
        return [dict(value)] if eval_expr(node.predicate, value) is True else []
    if isinstance(node, Map):
        out = dict(value)
        for name, e in node.assignments:
            out[name] = eval_expr(e, value)
        return [out]
    if isinstance(node, FlatMap):
        return [{**value, node.field: eval_expr(e, value)} for e in node.exprs]
    if isinstance(node, Projection):
        return [{name: value.get(name) for name in node.fields}]
    raise TypeError(f"{type(node).__name__} is not a stateless operator")


def apply_stateless(node, record: Record) -> list[Record]:
    """Apply a stateless node to a record: zero, one or many outputs."""
    return [record.with_value(v) for v in apply_values(node, record.value)]


def compile_stateless(node) -> Callable[[Mapping[str, Any]], list[dict]]:
    """Fast closure equivalent of :func:`apply_values`."""
    if isinstance(node, Filter):
        pred = compile_expr(node.predicate)
        return lambda value: [value] if pred(value) is True else []
    if isinstance(node, Map):
        compiled = [(name, compile_expr(e)) for name, e in node.assignments]

        def map_(value):
            out = dict(value)
            for name, fn in compiled:
                out[name] = fn(value)
            return [out]
        return map_
    if isinstance(node, FlatMap):
        fns = [compile_expr(e) for e in node.exprs]
        name = node.field
        return lambda value: [{**value, name: fn(value)} for fn in fns]
    if isinstance(node, Projection):
        names = node.fields
        return lambda value: [{n: value.get(n) for n in names}]
    raise TypeError(f"{type(node).__name__} is not a stateless operator")
