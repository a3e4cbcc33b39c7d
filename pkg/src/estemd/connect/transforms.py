"""Single-message transforms applied inside connectors, strictly in list order."""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Any, Iterable, Mapping, Optional

from estemd.errors import TransformError
from estemd.model import ProducerRecord, ScalarType, Timestamp, canon, format_iso, now_ms, parse_timestamp

KINDS = ("rename", "cast", "set_key", "drop", "insert_wallclock")


@dataclass(frozen=True)
class TransformSpec:
    kind: str
    field: str
    to: Optional[str] = None  # rename target
    to_type: Optional[ScalarType] = None  # cast target

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown transform {self.kind!r}; expected one of {', '.join(KINDS)}")
        object.__setattr__(self, "field", canon(self.field))
        if self.kind == "rename":
            if not self.to:
                raise ValueError("rename needs a 'to' name")
            object.__setattr__(self, "to", canon(self.to))
        if self.kind == "cast":
            if self.to_type is None:
                raise ValueError("cast needs a 'to_type'")
            if not isinstance(self.to_type, ScalarType):
                object.__setattr__(self, "to_type", ScalarType.parse(str(self.to_type)))

    @classmethod
    def rename(cls, src: str, dst: str) -> "TransformSpec":
        return cls("rename", src, to=dst)

    @classmethod
    def cast(cls, field: str, to_type) -> "TransformSpec":
        return cls("cast", field, to_type=to_type)

    @classmethod
    def from_json(cls, doc: Mapping) -> "TransformSpec":
        kind = doc.get("type") or doc.get("kind")
        if kind == "rename":
            return cls(kind, doc["from"], to=doc["to"])
        if kind == "cast":
            return cls(kind, doc["field"], to_type=doc["to_type"])
        return cls(kind, doc["field"])

    def to_json(self) -> dict:
        if self.kind == "rename":
            return {"type": "rename", "from": self.field, "to": self.to}
        if self.kind == "cast":
            return {"type": "cast", "field": self.field, "to_type": self.to_type.value}
        return {"type": self.kind, "field": self.field}


def cast_value(value: Any, to: ScalarType) -> Any:
    """Convert ``value`` to ``to``. Lossy conversions raise ValueError."""
    if value is None:
        return None
    if to is ScalarType.TEXT:
        if isinstance(value, bool):
            return "true" if value else "false"
        if isinstance(value, Timestamp):
            return format_iso(value)
        return str(value)
    if to is ScalarType.FLOAT:
        if isinstance(value, bool):
            raise ValueError("cannot cast BOOLEAN to DOUBLE")
        v = float(value)
        if math.isnan(v):
            raise ValueError("NaN is not allowed")
        if isinstance(value, int) and int(v) != value:
            raise ValueError(f"{value} is not exactly representable as DOUBLE")
        return v
    if to is ScalarType.INT:
        if isinstance(value, bool):
            raise ValueError("cannot cast BOOLEAN to BIGINT")
        if isinstance(value, float):
            if not math.isfinite(value) or value != int(value):
                raise ValueError(f"lossy cast of {value!r} to BIGINT")
            return int(value)
        if isinstance(value, str):
            return int(value.strip())
        return int(value)
    if to is ScalarType.BOOL:
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.strip().lower() in ("true", "false"):
            return value.strip().lower() == "true"
        if isinstance(value, int) and value in (0, 1):
            return bool(value)
        raise ValueError(f"cannot cast {value!r} to BOOLEAN")
    if isinstance(value, str):
        return parse_timestamp(value)
    if isinstance(value, float):
        if not math.isfinite(value) or value != int(value):
            raise ValueError(f"lossy cast of {value!r} to TIMESTAMP")
        return Timestamp(int(value))
    if isinstance(value, bool):
        raise ValueError("cannot cast BOOLEAN to TIMESTAMP")
    return Timestamp(value)


def _apply_one(t: TransformSpec, rec: ProducerRecord) -> ProducerRecord:
    value = dict(rec.value)
    if t.kind == "insert_wallclock":
        value[t.field] = Timestamp(now_ms())
        return replace(rec, value=value)
    if t.field not in value:
        raise KeyError(t.field)
    if t.kind == "rename":
        if t.to != t.field and t.to in value:
            raise ValueError(f"rename target {t.to} already exists")
        value = {(t.to if k == t.field else k): v for k, v in value.items()}
    elif t.kind == "drop":
        del value[t.field]
    elif t.kind == "cast":
        value[t.field] = cast_value(value[t.field], t.to_type)
    elif t.kind == "set_key":
        v = value[t.field]
        key = None if v is None else cast_value(v, ScalarType.TEXT)
        return replace(rec, key=key)
    return replace(rec, value=value)


def apply_transforms(transforms: Iterable[TransformSpec], record: ProducerRecord) -> ProducerRecord:
    """Apply each transform in order. Field names in the record must already be canonical."""
    out = record
    for i, t in enumerate(transforms):
        try:
            out = _apply_one(t, out)
        except KeyError as exc:
            raise TransformError(i, f"{t.kind}: missing field {exc.args[0]}") from None
        except (ValueError, TypeError, OverflowError) as exc:
            raise TransformError(i, f"{t.kind}: {exc}") from None
    return out
