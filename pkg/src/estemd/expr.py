"""Scalar expressions: AST, type inference, evaluation.

Two evaluators exist on purpose. :func:`eval_expr` walks the tree and is the
reference; :func:`compile_expr` builds closures for the engine's hot path.
Both follow the same rules:

* NULL propagates through arithmetic and comparisons;
* AND/OR use three-valued logic;
* division by zero, 64-bit integer overflow and NaN results yield NULL;
* ``INT / INT`` truncates toward zero, any FLOAT operand gives FLOAT.
"""
from __future__ import annotations

import math
import operator
from dataclasses import dataclass
from typing import Any, Callable, Mapping, Optional, Union

from estemd.errors import SemanticError
from estemd.model import INT64_MAX, INT64_MIN, ScalarType, Schema, Timestamp, canon

AGGREGATES = frozenset({"AVG", "SUM", "COUNT", "MIN", "MAX"})
SCALAR_FUNCTIONS = frozenset({"ABS", "GREATEST", "LEAST"})

ARITH = ("+", "-", "*", "/")
COMPARE = ("=", "!=", "<", "<=", ">", ">=")


@dataclass(frozen=True)
class Literal:
    value: Any
    type: Optional[ScalarType]  # None for the NULL literal


@dataclass(frozen=True)
class Column:
    name: str

    def __post_init__(self):
        object.__setattr__(self, "name", canon(self.name))


@dataclass(frozen=True)
class Unary:
    op: str  # "-" or "NOT"
    operand: "Expr"


@dataclass(frozen=True)
class Binary:
    op: str
    left: "Expr"
    right: "Expr"


@dataclass(frozen=True)
class Call:
    name: str
    args: tuple = ()
    star: bool = False

    def __post_init__(self):
        object.__setattr__(self, "name", canon(self.name))
        object.__setattr__(self, "args", tuple(self.args))


Expr = Union[Literal, Column, Unary, Binary, Call]


def lit(value: Any) -> Literal:
    """Literal with its type inferred from the Python value."""
    from estemd.model import type_of_value

    return Literal(value, type_of_value(value))


def col(name: str) -> Column:
    return Column(name)


def walk(expr: Expr):
    yield expr
    if isinstance(expr, Unary):
        yield from walk(expr.operand)
    elif isinstance(expr, Binary):
        yield from walk(expr.left)
        yield from walk(expr.right)
    elif isinstance(expr, Call):
        for a in expr.args:
            yield from walk(a)


def contains_aggregate(expr: Expr) -> bool:
    return any(isinstance(e, Call) and e.name in AGGREGATES for e in walk(expr))


def columns_of(expr: Expr) -> set[str]:
    return {e.name for e in walk(expr) if isinstance(e, Column)}


# -- typing ---------------------------------------------------------------

_NUM = (ScalarType.INT, ScalarType.FLOAT, ScalarType.TIMESTAMP)


def _arith_type(op: str, lt, rt) -> Optional[ScalarType]:
    for t in (lt, rt):
        if t is not None and t not in _NUM:
            raise SemanticError(f"operator {op} needs numeric operands, got {t.value}")
    if lt is None and rt is None:
        return None
    if ScalarType.FLOAT in (lt, rt):
        return ScalarType.FLOAT
    return ScalarType.INT


def _comparable(lt, rt) -> bool:
    if lt is None or rt is None:
        return True
    if lt in _NUM and rt in _NUM:
        return True
    return lt is rt


def infer_type(expr: Expr, schema: Schema) -> Optional[ScalarType]:
    """Static type of ``expr`` over ``schema``; ``None`` means "always NULL"."""
    if isinstance(expr, Literal):
        return expr.type
    if isinstance(expr, Column):
        if expr.name not in schema:
            raise SemanticError(f"unknown column {expr.name}")
        return schema.field(expr.name).type
    if isinstance(expr, Unary):
        t = infer_type(expr.operand, schema)
        if expr.op == "NOT":
            if t not in (None, ScalarType.BOOL):
                raise SemanticError(f"NOT needs a BOOLEAN operand, got {t.value}")
            return ScalarType.BOOL
        if t not in (None, ScalarType.INT, ScalarType.FLOAT, ScalarType.TIMESTAMP):
            raise SemanticError(f"unary minus needs a numeric operand, got {t.value}")
        return None if t is None else (ScalarType.FLOAT if t is ScalarType.FLOAT else ScalarType.INT)
    if isinstance(expr, Binary):
        lt = infer_type(expr.left, schema)
        rt = infer_type(expr.right, schema)
        if expr.op in ARITH:
            return _arith_type(expr.op, lt, rt)
        if expr.op in COMPARE:
            if not _comparable(lt, rt):
                raise SemanticError(f"cannot compare {lt.value} with {rt.value}")
            if ScalarType.BOOL in (lt, rt) and expr.op not in ("=", "!="):
                raise SemanticError(f"operator {expr.op} is not defined for BOOLEAN")
            return ScalarType.BOOL
        if expr.op in ("AND", "OR"):
            for t in (lt, rt):
                if t not in (None, ScalarType.BOOL):
                    raise SemanticError(f"{expr.op} needs BOOLEAN operands, got {t.value}")
            return ScalarType.BOOL
        raise SemanticError(f"unknown operator {expr.op}")
    if isinstance(expr, Call):
        if expr.name in AGGREGATES:
            raise SemanticError(f"aggregate {expr.name} is not allowed here")
        if expr.name not in SCALAR_FUNCTIONS:
            raise SemanticError(f"unknown function {expr.name}")
        if expr.star:
            raise SemanticError(f"{expr.name}(*) is not valid")
        types = [infer_type(a, schema) for a in expr.args]
        if expr.name == "ABS":
            if len(types) != 1:
                raise SemanticError("ABS takes exactly one argument")
            return _arith_type("ABS", types[0], types[0])
        if len(types) < 1:
            raise SemanticError(f"{expr.name} needs at least one argument")
        result = None
        for t in types:
            if t is None:
                continue
            if result is None:
                result = t
            elif not _comparable(result, t):
                raise SemanticError(f"{expr.name} arguments have incompatible types")
            elif ScalarType.FLOAT in (result, t):
                result = ScalarType.FLOAT
        if result is ScalarType.BOOL:
            raise SemanticError(f"{expr.name} is not defined for BOOLEAN")
        return result
    raise TypeError(f"not an expression: {expr!r}")


def output_type(expr: Expr, schema: Schema) -> ScalarType:
    """Like :func:`infer_type`, but a bare NULL is typed as VARCHAR for schemas."""
    t = infer_type(expr, schema)
    return ScalarType.TEXT if t is None else t


# -- evaluation -----------------------------------------------------------


def _fix(v):
    """Normalise an arithmetic result: overflow and NaN become NULL."""
    if isinstance(v, float):
        return None if math.isnan(v) else v
    if not INT64_MIN <= v <= INT64_MAX:
        return None
    return v


def _num(v):
    # timestamps participate in arithmetic as plain integers
    return int(v) if isinstance(v, Timestamp) else v


def _arith(op: str, a, b):
    if a is None or b is None:
        return None
    a, b = _num(a), _num(b)
    if op == "+":
        return _fix(a + b)
    if op == "-":
        return _fix(a - b)
    if op == "*":
        return _fix(a * b)
    if b == 0:
        return None
    if isinstance(a, int) and isinstance(b, int):
        q = abs(a) // abs(b)
        return _fix(q if (a >= 0) == (b >= 0) else -q)
    return _fix(a / b)


_CMP = {
    "=": operator.eq,
    "!=": operator.ne,
    "<": operator.lt,
    "<=": operator.le,
    ">": operator.gt,
    ">=": operator.ge,
}


def _compare(op: str, a, b):
    if a is None or b is None:
        return None
    return _CMP[op](a, b)


def _and(a, b):
    if a is False or b is False:
        return False
    if a is None or b is None:
        return None
    return True


def _or(a, b):
    if a is True or b is True:
        return True
    if a is None or b is None:
        return None
    return False


def _call(name: str, args: list):
    if name == "ABS":
        v = args[0]
        return None if v is None else _fix(abs(_num(v)))
    present = [_num(a) for a in args if a is not None]
    if len(present) != len(args):
        return None
    if any(isinstance(a, float) for a in present):
        present = [float(a) for a in present]
    return max(present) if name == "GREATEST" else min(present)


def eval_expr(expr: Expr, values: Mapping[str, Any]) -> Any:
    """Evaluate ``expr`` against a field map by walking the tree."""
    if isinstance(expr, Literal):
        return expr.value
    if isinstance(expr, Column):
        return values.get(expr.name)
    if isinstance(expr, Unary):
        v = eval_expr(expr.operand, values)
        if expr.op == "NOT":
            return None if v is None else not v
        return None if v is None else _fix(-_num(v))
    if isinstance(expr, Binary):
        op = expr.op
        if op == "AND":
            return _and(eval_expr(expr.left, values), eval_expr(expr.right, values))
        if op == "OR":
            return _or(eval_expr(expr.left, values), eval_expr(expr.right, values))
        a = eval_expr(expr.left, values)
        b = eval_expr(expr.right, values)
        if op in _CMP:
            return _compare(op, a, b)
        return _arith(op, a, b)
    if isinstance(expr, Call):
        return _call(expr.name, [eval_expr(a, values) for a in expr.args])
    raise TypeError(f"not an expression: {expr!r}")


def compile_expr(expr: Expr) -> Callable[[Mapping[str, Any]], Any]:
    """Turn ``expr`` into a closure over a field map."""
    if isinstance(expr, Literal):
        v = expr.value
        return lambda values: v
    if isinstance(expr, Column):
        name = expr.name
        return lambda values: values.get(name)
    if isinstance(expr, Unary):
        inner = compile_expr(expr.operand)
        if expr.op == "NOT":
            def not_(values):
                v = inner(values)
                return None if v is None else not v
            return not_

        def neg(values):
            v = inner(values)
            return None if v is None else _fix(-_num(v))
        return neg
    if isinstance(expr, Binary):
        left = compile_expr(expr.left)
        right = compile_expr(expr.right)
        op = expr.op
        if op == "AND":
            return lambda values: _and(left(values), right(values))
        if op == "OR":
            return lambda values: _or(left(values), right(values))
        if op in _CMP:
            fn = _CMP[op]

            def cmp(values):
                a = left(values)
                if a is None:
                    return None
                b = right(values)
                return None if b is None else fn(a, b)
            return cmp
        if op in ("+", "-", "*"):
            fn = {"+": operator.add, "-": operator.sub, "*": operator.mul}[op]

            def arith(values):
                a = left(values)
                b = right(values)
                if a is None or b is None:
                    return None
                r = fn(a, b)
                if r.__class__ is float:
                    return None if r != r else r
                return _fix(int(r))
            return arith
        return lambda values: _arith("/", left(values), right(values))
    if isinstance(expr, Call):
        parts = [compile_expr(a) for a in expr.args]
        name = expr.name
        return lambda values: _call(name, [p(values) for p in parts])
    raise TypeError(f"not an expression: {expr!r}")
