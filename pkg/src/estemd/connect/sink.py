"""Sink connectors: append topic records to a JSONL or CSV file, committing after fsync."""
from __future__ import annotations

import csv
import io
import json
import logging
import os
from pathlib import Path
from typing import Any, Mapping, Optional

from estemd.connect.config import SinkConfig
from estemd.connect.source import ConnectorTask, FaultHook, dlq_topic
from estemd.connect.transforms import apply_transforms
from estemd.errors import TransformError
from estemd.model import ProducerRecord, Record, ScalarType, Timestamp, format_iso

logger = logging.getLogger(__name__)


def _plain(value: Any, ftype: Optional[ScalarType]) -> Any:
    if isinstance(value, Timestamp) or (ftype is ScalarType.TIMESTAMP and isinstance(value, int) and not isinstance(value, bool)):
        return format_iso(int(value))
    return value


def jsonl_line(value: Mapping[str, Any], schema=None) -> str:
    """Canonical JSON: sorted member names, no whitespace, timestamps as ISO-8601."""
    types = {f.name: f.type for f in schema.fields} if schema is not None else {}
    doc = {k: _plain(v, types.get(k)) for k, v in value.items()}
    return json.dumps(doc, sort_keys=True, separators=(",", ":")) + "\n"


def _csv_cell(value: Any, ftype: Optional[ScalarType]) -> str:
    value = _plain(value, ftype)
    if value is None:
        return ""
    if value is True:
        return "true"
    if value is False:
        return "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def csv_line(columns: list[str], value: Mapping[str, Any], schema=None) -> str:
    types = {f.name: f.type for f in schema.fields} if schema is not None else {}
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerow([_csv_cell(value.get(c), types.get(c)) for c in columns])
    return buf.getvalue()


def truncate_torn_tail(path: Path) -> int:
    """Cut a trailing partial line left by a crash mid-write. Returns bytes removed."""
    if not path.exists():
        return 0
    size = path.stat().st_size
    if size == 0:
        return 0
    with open(path, "rb+") as fh:
        fh.seek(size - 1)
        if fh.read(1) == b"\n":
            return 0
        keep = 0
        block = 1 << 16
        pos = size
        while pos > 0:
            start = max(0, pos - block)
            fh.seek(start)
            data = fh.read(pos - start)
            i = data.rfind(b"\n")
            if i >= 0:
                keep = start + i + 1
                break
            pos = start
        fh.truncate(keep)
        fh.flush()
        os.fsync(fh.fileno())
    return size - keep


class SinkConnector(ConnectorTask):
    """Consumes as group ``sink-<name>``; a crash after the write but before the
    commit repeats lines on restart, never loses them."""

    def __init__(self, config: SinkConfig, broker, *, fault_hook: Optional[FaultHook] = None):
        super().__init__(config.poll_interval)
        self.config = config
        self.name = config.name
        self.broker = broker
        self.fault_hook = fault_hook
        self.written = 0
        self.dead_lettered = 0
        self.path = Path(config.path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        truncate_torn_tail(self.path)
        self.schema = broker.schema_of(config.source_topic)
        self.columns: Optional[list[str]] = self._existing_header() if config.kind == "csv_file" else None
        self.consumer = broker.subscribe(config.group, config.source_topic, config.from_position)
        self._closed = False

    def _existing_header(self) -> Optional[list[str]]:
        if not self.path.exists() or self.path.stat().st_size == 0:
            return None
        with open(self.path, encoding="utf-8", newline="") as fh:
            return next(csv.reader([fh.readline()]), None)

    def _transform(self, rec: Record) -> Optional[ProducerRecord]:
        pr = ProducerRecord(rec.value, rec.key, rec.event_time, rec.headers)
        if not self.config.transforms:
            return pr
        try:
            return apply_transforms(self.config.transforms, pr)
        except TransformError as exc:
            self.dead_lettered += 1
            dlq = dlq_topic(self.config.source_topic)
            self.broker.ensure_topic(dlq)
            self.broker.produce(
                dlq,
                [
                    ProducerRecord(
                        {"SOURCE": self.name, "LINE": jsonl_line(rec.value, self.schema).rstrip("\n"), "ERROR": exc.message},
                        rec.key,
                        rec.event_time,
                        (("error", exc.message), ("error_code", exc.code), ("connector", self.name)),
                    )
                ],
            )
            return None

    def step(self, max_wait: Optional[float] = None) -> int:
        wait = self.poll_interval if max_wait is None else max_wait
        records = self.consumer.poll(500, wait)
        if not records:
            return 0
        out = []
        schema = None if self.config.transforms else self.schema
        for rec in records:
            pr = self._transform(rec)
            if pr is None:
                continue
            if self.config.kind == "jsonl_file":
                out.append(jsonl_line(pr.value, schema))
            else:
                if self.columns is None:
                    self.columns = list(schema.names) if schema is not None else list(pr.value)
                    out.append(csv_line(self.columns, {c: c for c in self.columns}))
                out.append(csv_line(self.columns, pr.value, schema))
        with open(self.path, "a", encoding="utf-8", newline="") as fh:
            fh.write("".join(out))
            fh.flush()
            if self.config.fsync:
                os.fsync(fh.fileno())
        if self.fault_hook:
            self.fault_hook("sink.after_write")
        self.consumer.commit()
        self.written += len(records)
        return len(records)

    def drain(self) -> int:
        total = 0
        while True:
            n = self.step(max_wait=0.0)
            if n == 0:
                return total
            total += n

    def close(self) -> None:
        if not self._closed:
            self._closed = True
            self.consumer.close()

    def status(self) -> dict:
        return {
            "name": self.name,
            "kind": self.config.kind,
            "state": self.state,
            "written": self.written,
            "dead_lettered": self.dead_lettered,
            "error": self.last_error,
        }


def run_sink(config: SinkConfig, broker, **kwargs) -> SinkConnector:
    """Start a sink connector in its own thread."""
    return SinkConnector(config, broker, **kwargs).start()
