"""Line parsers that turn CSV and JSONL text into typed field maps."""
from __future__ import annotations

import csv
import json
import math
from typing import Any, Sequence

from estemd.errors import RecordParseError, ValidationError
from estemd.model import ScalarType, Schema, Timestamp, Violation, canon, coerce_record, parse_timestamp

_TRUE = {"true", "t", "1", "yes"}
_FALSE = {"false", "f", "0", "no"}


def coerce_cell(text: str, ftype: ScalarType, field: str) -> Any:
    """Convert one CSV cell to ``ftype``. Raises RecordParseError naming the field."""
    try:
        if ftype is ScalarType.TEXT:
            return text
        s = text.strip()
        if ftype is ScalarType.INT:
            return int(s)
        if ftype is ScalarType.FLOAT:
            v = float(s)
            if math.isnan(v):
                raise ValueError("NaN is not allowed")
            return v
        if ftype is ScalarType.BOOL:
            low = s.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError("not a boolean")
        return parse_timestamp(s)
    except ValueError as exc:
        raise RecordParseError(f"cannot read {text!r} as {ftype.value} for field {canon(field)}: {exc}", field=canon(field)) from None


def parse_header(line: str, schema: Schema) -> list[str]:
    """Read a CSV header line and check it names exactly the schema's fields."""
    cells = next(csv.reader([line.rstrip("\r\n")]), [])
    names = [canon(c.strip()) for c in cells]
    if sorted(names) != sorted(schema.names):
        raise RecordParseError(
            f"CSV header {cells} does not match schema fields {schema.names}"
        )
    return names


def parse_csv_line(header: Sequence[str], line: str, schema: Schema) -> dict:
    """Parse one CSV data line against ``schema``.

    ``header`` gives the column order; names match the schema case-insensitively.
    An empty cell is NULL for nullable non-text fields.
    """
    names = [canon(h) for h in header]
    if sorted(names) != sorted(schema.names):
        raise RecordParseError(f"CSV header {list(header)} does not match schema fields {schema.names}")
    try:
        cells = next(csv.reader([line.rstrip("\r\n")], strict=True), [])
    except csv.Error as exc:
        raise RecordParseError(f"malformed CSV line: {exc}") from None
    if len(cells) != len(names):
        raise RecordParseError(f"expected {len(names)} cells, found {len(cells)}")
    value = {}
    for name, cell in zip(names, cells):
        f = schema.field(name)
        if cell == "" and f.type is not ScalarType.TEXT:
            if not f.nullable:
                raise RecordParseError(f"empty cell for non-nullable field {name}", field=name)
            value[name] = None
            continue
        value[name] = coerce_cell(cell, f.type, name)
    return coerce_record(schema, value)


def parse_jsonl_line(line: str, schema: Schema) -> dict:
    """Parse one JSON object line strictly against ``schema``.

    Timestamp fields accept ISO-8601 text or integer milliseconds; ints widen to
    floats. Unknown members are violations.
    """
    try:
        doc = json.loads(line)
    except json.JSONDecodeError as exc:
        pos = len(line[: exc.pos].encode("utf-8"))
        raise RecordParseError(f"invalid JSON: {exc.msg} at byte {pos}", position=pos) from None
    if not isinstance(doc, dict):
        raise RecordParseError("expected a JSON object", position=0)
    value = {}
    for name, v in doc.items():
        key = canon(name)
        if key in value:
            raise ValidationError([Violation(key, "duplicate field")])
        if key in schema and schema.field(key).type is ScalarType.TIMESTAMP:
            if isinstance(v, str):
                try:
                    v = parse_timestamp(v)
                except ValueError as exc:
                    raise RecordParseError(f"field {key}: {exc}", field=key) from None
            elif isinstance(v, int) and not isinstance(v, bool) and v >= 0:
                v = Timestamp(v)
        value[key] = v
    return coerce_record(schema, value)
