"""Records, scalar values, schemas and partition routing shared by every layer.

Field values are plain Python objects: ``None``, ``bool``, ``int``, ``float``,
``str`` and :class:`Timestamp` (an ``int`` subclass holding UTC epoch
milliseconds). Identifiers are case-insensitive and canonicalised to upper
case; topic names keep their display spelling but are looked up folded.
"""
from __future__ import annotations

import math
import re
import time
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from enum import Enum
from typing import Any, Iterable, Mapping, Optional

from estemd.errors import InvalidNameError, SchemaError, ValidationError

IDENT_RE = re.compile(r"[A-Za-z_][A-Za-z0-9_]*\Z")

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
MASK64 = (1 << 64) - 1
INT64_MIN = -(1 << 63)
INT64_MAX = (1 << 63) - 1


class ScalarType(str, Enum):
    BOOL = "BOOLEAN"
    INT = "BIGINT"
    FLOAT = "DOUBLE"
    TEXT = "VARCHAR"
    TIMESTAMP = "TIMESTAMP"

    @classmethod
    def parse(cls, name: str) -> "ScalarType":
        try:
            return _TYPE_ALIASES[name.upper()]
        except KeyError:
            raise SchemaError(f"unknown type {name!r}") from None

    @property
    def numeric(self) -> bool:
        return self in (ScalarType.INT, ScalarType.FLOAT, ScalarType.TIMESTAMP)


_TYPE_ALIASES = {
    "BOOLEAN": ScalarType.BOOL,
    "BOOL": ScalarType.BOOL,
    "BIGINT": ScalarType.INT,
    "INT": ScalarType.INT,
    "INTEGER": ScalarType.INT,
    "DOUBLE": ScalarType.FLOAT,
    "FLOAT": ScalarType.FLOAT,
    "REAL": ScalarType.FLOAT,
    "VARCHAR": ScalarType.TEXT,
    "STRING": ScalarType.TEXT,
    "TEXT": ScalarType.TEXT,
    "TIMESTAMP": ScalarType.TIMESTAMP,
}


class Timestamp(int):
    """Milliseconds since the Unix epoch, UTC. Never negative."""

    __slots__ = ()

    def __new__(cls, ms: int):
        if isinstance(ms, bool) or ms < 0:
            raise ValueError(f"timestamp must be a non-negative integer, got {ms!r}")
        return super().__new__(cls, ms)

    def __repr__(self) -> str:
        return f"Timestamp({int(self)})"

    def isoformat(self) -> str:
        return format_iso(int(self))


def now_ms() -> int:
    return time.time_ns() // 1_000_000


def canon(name: str) -> str:
    return name.upper()


def check_identifier(name: str, what: str = "identifier") -> str:
    if not isinstance(name, str) or not IDENT_RE.match(name):
        raise InvalidNameError(f"invalid {what} {name!r}: must match [A-Za-z_][A-Za-z0-9_]*")
    return name


def format_iso(ms: int) -> str:
    dt = datetime.fromtimestamp(ms // 1000, tz=timezone.utc)
    text = dt.strftime("%Y-%m-%dT%H:%M:%S")
    if ms % 1000:
        text += f".{ms % 1000:03d}"
    return text + "Z"


def parse_timestamp(text: str) -> Timestamp:
    """Accept integer milliseconds or an ISO-8601 instant (``Z``/offset/naive=UTC)."""
    s = text.strip()
    if s.isdigit():
        return Timestamp(int(s))
    if s.endswith(("Z", "z")):
        s = s[:-1] + "+00:00"
    try:
        dt = datetime.fromisoformat(s)
    except ValueError:
        raise ValueError(f"not an ISO-8601 timestamp or integer milliseconds: {text!r}") from None
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    delta = dt - datetime(1970, 1, 1, tzinfo=timezone.utc)
    ms = (delta.days * 86_400 + delta.seconds) * 1000 + delta.microseconds // 1000
    return Timestamp(ms)


def type_of_value(value: Any) -> Optional[ScalarType]:
    if value is None:
        return None
    if isinstance(value, bool):
        return ScalarType.BOOL
    if isinstance(value, Timestamp):
        return ScalarType.TIMESTAMP
    if isinstance(value, int):
        return ScalarType.INT
    if isinstance(value, float):
        return ScalarType.FLOAT
    if isinstance(value, str):
        return ScalarType.TEXT
    raise TypeError(f"unsupported value type {type(value).__name__}")


@dataclass(frozen=True)
class Field:
    name: str
    type: ScalarType
    nullable: bool = True

    def __post_init__(self):
        check_identifier(self.name, "field name")
        object.__setattr__(self, "name", canon(self.name))
        if not isinstance(self.type, ScalarType):
            object.__setattr__(self, "type", ScalarType.parse(str(self.type)))


@dataclass(frozen=True)
class Schema:
    fields: tuple[Field, ...]
    event_time_field: Optional[str] = None

    def __post_init__(self):
        fields = tuple(self.fields)
        object.__setattr__(self, "fields", fields)
        seen = set()
        for f in fields:
            if f.name in seen:
                raise SchemaError(f"duplicate field {f.name} (names are case-insensitive)")
            seen.add(f.name)
        if self.event_time_field is not None:
            etf = canon(self.event_time_field)
            object.__setattr__(self, "event_time_field", etf)
            if etf not in seen:
                raise SchemaError(f"event-time field {etf} is not in the schema")
            if self.field(etf).type is not ScalarType.TIMESTAMP:
                raise SchemaError(f"event-time field {etf} must be of type TIMESTAMP")

    @classmethod
    def of(cls, *specs, event_time_field: Optional[str] = None) -> "Schema":
        """Build from ``(name, type)`` or ``(name, type, nullable)`` tuples."""
        return cls(tuple(Field(*s) for s in specs), event_time_field)

    @property
    def names(self) -> list[str]:
        return [f.name for f in self.fields]

    def __contains__(self, name: str) -> bool:
        return any(f.name == canon(name) for f in self.fields)

    def field(self, name: str) -> Field:
        key = canon(name)
        for f in self.fields:
            if f.name == key:
                return f
        raise KeyError(name)

    def to_json(self) -> dict:
        return {
            "fields": [{"name": f.name, "type": f.type.value, "nullable": f.nullable} for f in self.fields],
            "event_time_field": self.event_time_field,
        }

    @classmethod
    def from_json(cls, doc: Mapping) -> "Schema":
        return cls(
            tuple(Field(d["name"], ScalarType.parse(d["type"]), d.get("nullable", True)) for d in doc["fields"]),
            doc.get("event_time_field"),
        )


@dataclass(frozen=True)
class Violation:
    field: str
    reason: str

    def __str__(self) -> str:
        return f"{self.reason} {self.field}" if self.reason in ("missing field", "unknown field") else f"{self.field}: {self.reason}"


def _accepts(ftype: ScalarType, value: Any) -> bool:
    vt = type_of_value(value)
    if vt is ftype:
        return not (vt is ScalarType.FLOAT and math.isnan(value))
    if ftype is ScalarType.FLOAT and vt is ScalarType.INT:
        return True
    if ftype is ScalarType.TIMESTAMP and vt is ScalarType.INT:
        return value >= 0
    if ftype is ScalarType.INT and vt is ScalarType.TIMESTAMP:
        return True
    return False


def validate_record(schema: Schema, value: Mapping[str, Any]) -> list[Violation]:
    """Check a field map against a strict schema. An empty list means valid."""
    violations = []
    present = {}
    for name, v in value.items():
        key = canon(name)
        if key in present:
            violations.append(Violation(key, "duplicate field"))
        present[key] = v
    for f in schema.fields:
        if f.name not in present or present[f.name] is None:
            if not f.nullable:
                violations.append(Violation(f.name, "missing field" if f.name not in present else "null in non-nullable field"))
            continue
        v = present[f.name]
        try:
            ok = _accepts(f.type, v)
        except TypeError:
            ok = False
        if not ok:
            violations.append(Violation(f.name, f"expected {f.type.value}, got {v!r}"))
    known = set(schema.names)
    for key in present:
        if key not in known:
            violations.append(Violation(key, "unknown field"))
    return violations


def coerce_record(schema: Schema, value: Mapping[str, Any]) -> dict:
    """Validate and normalise to schema order and declared types; raise on violations."""
    violations = validate_record(schema, value)
    if violations:
        raise ValidationError(violations)
    present = {canon(k): v for k, v in value.items()}
    out = {}
    for f in schema.fields:
        v = present.get(f.name)
        if v is not None:
            if f.type is ScalarType.FLOAT and not isinstance(v, float):
                v = float(v)
            elif f.type is ScalarType.TIMESTAMP and not isinstance(v, Timestamp):
                v = Timestamp(v)
            elif f.type is ScalarType.INT and isinstance(v, Timestamp):
                v = int(v)
        out[f.name] = v
    return out


def canon_value_map(value: Mapping[str, Any]) -> dict:
    """Upper-case names, reject NaN and unsupported types, refuse case-folded duplicates."""
    out = {}
    for name, v in value.items():
        key = canon(name)
        if key in out:
            raise ValidationError([Violation(key, "duplicate field")])
        if isinstance(v, float) and math.isnan(v):
            raise ValidationError([Violation(key, "NaN is not a storable value")])
        if type_of_value(v) is ScalarType.INT and not INT64_MIN <= v <= INT64_MAX:
            raise ValidationError([Violation(key, "integer outside 64-bit range")])
        out[key] = v
    return out


@dataclass(frozen=True)
class TopicSpec:
    name: str
    partitions: int = 1
    replication_display: int = 1

    def __post_init__(self):
        check_identifier(self.name, "topic name")
        if not isinstance(self.partitions, int) or self.partitions < 1:
            raise InvalidNameError(f"partitions must be >= 1, got {self.partitions!r}")
        if self.replication_display < 1:
            raise InvalidNameError("replication factor must be >= 1")


@dataclass(frozen=True)
class ProducerRecord:
    """A record on its way into the broker: no topic/partition/offset yet."""

    value: Mapping[str, Any]
    key: Optional[str] = None
    event_time: Optional[int] = None
    headers: tuple[tuple[str, str], ...] = ()


@dataclass(frozen=True)
class Record:
    topic: str
    partition: int
    offset: Optional[int]
    event_time: int
    key: Optional[str]
    value: Mapping[str, Any]
    headers: tuple[tuple[str, str], ...] = field(default=())

    def with_value(self, value: Mapping[str, Any]) -> "Record":
        return replace(self, value=value)

    def to_json(self) -> dict:
        return {
            "topic": self.topic,
            "partition": self.partition,
            "offset": self.offset,
            "event_time": int(self.event_time),
            "key": self.key,
            "value": dict(self.value),
            "headers": [list(h) for h in self.headers],
        }


def as_producer_records(items: Iterable) -> list[ProducerRecord]:
    out = []
    for item in items:
        if isinstance(item, ProducerRecord):
            out.append(item)
        elif isinstance(item, Record):
            out.append(ProducerRecord(item.value, item.key, item.event_time, item.headers))
        elif isinstance(item, Mapping) and "value" in item and isinstance(item["value"], Mapping):
            out.append(
                ProducerRecord(
                    item["value"],
                    item.get("key"),
                    item.get("event_time"),
                    tuple(tuple(h) for h in item.get("headers") or ()),
                )
            )
        elif isinstance(item, Mapping):
            out.append(ProducerRecord(item))
        else:
            raise TypeError(f"cannot produce {type(item).__name__}")
    return out


def fnv1a_64(data: bytes) -> int:
    h = FNV_OFFSET
    for b in data:
        h ^= b
        h = (h * FNV_PRIME) & MASK64
    return h


def partition_for(key: Optional[str], partitions: int, round_robin_counter: int = 0) -> int:
    if partitions < 1:
        raise ValueError("partitions must be >= 1")
    if key is None:
        return round_robin_counter % partitions
    return fnv1a_64(key.encode("utf-8")) % partitions
