"""Connector configuration and the JSON config-file loader."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Union

from estemd.connect.generator import RAIN_SCHEMA, RainParams
from estemd.connect.transforms import TransformSpec
from estemd.model import ScalarType, Schema, canon, check_identifier

SOURCE_KINDS = ("csv_file", "jsonl_file", "generator")
SINK_KINDS = ("jsonl_file", "csv_file")


@dataclass(frozen=True)
class SourceConfig:
    name: str
    kind: str
    target_topic: str
    schema: Optional[Schema] = None
    path: Optional[str] = None
    generator: Optional[RainParams] = None
    event_time_field: Optional[str] = None
    poll_interval: float = 0.5
    transforms: tuple = ()
    checkpoint_path: Optional[str] = None
    batch_lines: int = 5000

    def __post_init__(self):
        check_identifier(self.name.replace("-", "_"), "connector name")
        if self.kind not in SOURCE_KINDS:
            raise ValueError(f"unknown source kind {self.kind!r}")
        if self.kind == "generator":
            if self.generator is None:
                raise ValueError("generator sources need generator parameters")
            if self.schema is None:
                object.__setattr__(self, "schema", RAIN_SCHEMA)
            if self.event_time_field is None:
                object.__setattr__(self, "event_time_field", "TIMESTAMP")
        else:
            if not self.path:
                raise ValueError(f"{self.kind} sources need a path")
            if self.schema is None:
                raise ValueError(f"{self.kind} sources need a schema")
        etf = self.event_time_field or self.schema.event_time_field
        if etf is not None:
            etf = canon(etf)
            if etf not in self.schema or self.schema.field(etf).type is not ScalarType.TIMESTAMP:
                raise ValueError(f"event_time_field {etf} must be a TIMESTAMP field of the schema")
        object.__setattr__(self, "event_time_field", etf)
        object.__setattr__(self, "transforms", tuple(self.transforms))
        if self.poll_interval <= 0:
            raise ValueError("poll_interval must be > 0")

    @property
    def checkpoint(self) -> Optional[Path]:
        if self.checkpoint_path:
            return Path(self.checkpoint_path)
        if self.path:
            return Path(f"{self.path}.{self.name}.offset")
        return None

    @classmethod
    def from_json(cls, doc: Mapping, base: Optional[Path] = None) -> "SourceConfig":
        schema = doc.get("schema")
        path = doc.get("path")
        if path and base is not None and not Path(path).is_absolute():
            path = str(base / path)
        gen = doc.get("generator")
        return cls(
            name=doc["name"],
            kind=doc["kind"],
            target_topic=doc["target_topic"],
            schema=Schema.from_json(schema) if schema else None,
            path=path,
            generator=RainParams.from_json(gen) if gen else None,
            event_time_field=doc.get("event_time_field"),
            poll_interval=float(doc.get("poll_interval", 0.5)),
            transforms=tuple(TransformSpec.from_json(t) for t in doc.get("transforms", ())),
            checkpoint_path=doc.get("checkpoint_path"),
        )


@dataclass(frozen=True)
class SinkConfig:
    name: str
    kind: str
    source_topic: str
    path: str
    transforms: tuple = ()
    from_position: str = "earliest"
    poll_interval: float = 0.2
    fsync: bool = True

    def __post_init__(self):
        check_identifier(self.name.replace("-", "_"), "connector name")
        if self.kind not in SINK_KINDS:
            raise ValueError(f"unknown sink kind {self.kind!r}")
        if not self.source_topic:
            raise ValueError("sinks need a source_topic")
        if self.from_position not in ("earliest", "latest"):
            raise ValueError("from_position must be earliest or latest")
        object.__setattr__(self, "transforms", tuple(self.transforms))

    @property
    def group(self) -> str:
        return f"sink-{self.name}"

    @classmethod
    def from_json(cls, doc: Mapping, base: Optional[Path] = None) -> "SinkConfig":
        path = doc["path"]
        if base is not None and not Path(path).is_absolute():
            path = str(base / path)
        return cls(
            name=doc["name"],
            kind=doc["kind"],
            source_topic=doc["source_topic"],
            path=path,
            transforms=tuple(TransformSpec.from_json(t) for t in doc.get("transforms", ())),
            from_position=doc.get("from_position", "earliest"),
            poll_interval=float(doc.get("poll_interval", 0.2)),
        )


@dataclass
class ConnectConfig:
    sources: list = field(default_factory=list)
    sinks: list = field(default_factory=list)


def load_config(source: Union[str, Path, Mapping]) -> ConnectConfig:
    """Read ``{"sources": [...], "sinks": [...]}``. Relative paths resolve against the file's directory."""
    base = None
    if isinstance(source, Mapping):
        doc = source
    else:
        p = Path(source)
        doc = json.loads(p.read_text(encoding="utf-8"))
        base = p.resolve().parent
    unknown = set(doc) - {"sources", "sinks"}
    if unknown:
        raise ValueError(f"unknown config sections: {', '.join(sorted(unknown))}")
    return ConnectConfig(
        [SourceConfig.from_json(d, base) for d in doc.get("sources", ())],
        [SinkConfig.from_json(d, base) for d in doc.get("sinks", ())],
    )
