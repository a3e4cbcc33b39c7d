"""Topic registry and publish/subscribe hub.

Topic lookups are case-insensitive, but each topic keeps the spelling it was
created with (that spelling is also its directory name). Consumer-group
offsets live in the internal ``__offsets`` topic and are replayed on start.
"""
from __future__ import annotations

import itertools
import json
import logging
import os
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Union

from estemd.commitlog import SEGMENT_BYTES, PartitionLog, RetentionPolicy
from estemd.errors import (
    DuplicateTopicError,
    EstemdError,
    OffsetBeyondEndError,
    UnknownPartitionError,
    UnknownTopicError,
    ValidationError,
)
from estemd.model import (
    ProducerRecord,
    Record,
    Schema,
    TopicSpec,
    as_producer_records,
    canon,
    canon_value_map,
    coerce_record,
    now_ms,
    partition_for,
)

logger = logging.getLogger(__name__)

OFFSETS_TOPIC = "__offsets"
META_FILE = "topic.json"


@dataclass
class TopicDescription:
    name: str
    partitions: int
    replication_display: int
    percent_in_sync: float
    end_offsets: list[int]
    start_offsets: list[int]
    internal: bool = False
    schema: Optional[Schema] = None

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "partitions": self.partitions,
            "replication_display": self.replication_display,
            "percent_in_sync": self.percent_in_sync,
            "end_offsets": self.end_offsets,
            "start_offsets": self.start_offsets,
            "internal": self.internal,
            "schema": self.schema.to_json() if self.schema else None,
        }


class _Topic:
    def __init__(self, spec: TopicSpec, logs: list[PartitionLog], schema: Optional[Schema], meta_path: Optional[Path]):
        self.spec = spec
        self.logs = logs
        self.schema = schema
        self.meta_path = meta_path
        self.write_locks = [threading.Lock() for _ in logs]
        self.data_ready = threading.Condition()
        self.rr = itertools.count()

    @property
    def name(self) -> str:
        return self.spec.name

    def save_meta(self) -> None:
        if self.meta_path is None:
            return
        doc = {
            "name": self.spec.name,
            "partitions": self.spec.partitions,
            "replication_display": self.spec.replication_display,
            "schema": self.schema.to_json() if self.schema else None,
        }
        tmp = self.meta_path.with_suffix(".tmp")
        tmp.write_text(json.dumps(doc, indent=2))
        os.replace(tmp, self.meta_path)


class Broker:
    """In-process broker. Thread-safe.

    ``data_dir=None`` runs fully in memory; otherwise topics, logs and group
    offsets are recovered from ``data_dir`` on construction.
    """

    def __init__(
        self,
        data_dir: Optional[Union[str, os.PathLike]] = None,
        *,
        fsync: bool = True,
        segment_bytes: int = SEGMENT_BYTES,
    ):
        self.data_dir = Path(data_dir) if data_dir is not None else None
        self.fsync = fsync
        self.segment_bytes = segment_bytes
        self._topics: dict[str, _Topic] = {}
        self._registry_lock = threading.RLock()
        self._offsets_lock = threading.Lock()
        self._committed: dict[tuple[str, str, int], int] = {}
        self._commit_meta: dict[tuple[str, str, int], Optional[str]] = {}
        self._members: dict[tuple[str, str], dict[int, int]] = {}
        self._member_ids = itertools.count(1)
        self._closed = False
        if self.data_dir is not None:
            self.data_dir.mkdir(parents=True, exist_ok=True)
            self._load_topics()
        if canon(OFFSETS_TOPIC) not in self._topics:
            self.create_topic(TopicSpec(OFFSETS_TOPIC))
        self._replay_offsets()

    @property
    def in_memory(self) -> bool:
        return self.data_dir is None

    # -- topics -----------------------------------------------------------

    def _load_topics(self) -> None:
        for meta in sorted(self.data_dir.glob(f"*/{META_FILE}")):
            doc = json.loads(meta.read_text())
            spec = TopicSpec(doc["name"], doc["partitions"], doc.get("replication_display", 1))
            schema = Schema.from_json(doc["schema"]) if doc.get("schema") else None
            logs = [self._open_log(spec.name, p) for p in range(spec.partitions)]
            self._topics[canon(spec.name)] = _Topic(spec, logs, schema, meta)
            logger.info("recovered topic %s (%d partitions)", spec.name, spec.partitions)

    def _open_log(self, topic: str, partition: int) -> PartitionLog:
        directory = None if self.data_dir is None else self.data_dir / topic / str(partition)
        return PartitionLog(topic, partition, directory, fsync=self.fsync, segment_bytes=self.segment_bytes)

    def create_topic(self, spec: Union[TopicSpec, str], schema: Optional[Schema] = None) -> TopicDescription:
        if isinstance(spec, str):
            spec = TopicSpec(spec)
        with self._registry_lock:
            key = canon(spec.name)
            if key in self._topics:
                raise DuplicateTopicError(f"topic {self._topics[key].name} already exists")
            meta_path = None
            if self.data_dir is not None:
                (self.data_dir / spec.name).mkdir(parents=True, exist_ok=True)
                meta_path = self.data_dir / spec.name / META_FILE
            logs = [self._open_log(spec.name, p) for p in range(spec.partitions)]
            topic = _Topic(spec, logs, schema, meta_path)
            topic.save_meta()
            self._topics[key] = topic
            return self.describe_topic(spec.name)

    def ensure_topic(self, name: str, partitions: int = 1, schema: Optional[Schema] = None) -> bool:
        """Create ``name`` unless it exists. Returns True when it was created."""
        with self._registry_lock:
            if self.has_topic(name):
                return False
            self.create_topic(TopicSpec(name, partitions), schema)
            return True

    def attach_schema(self, name: str, schema: Optional[Schema]) -> None:
        with self._registry_lock:
            topic = self._topic(name)
            topic.schema = schema
            topic.save_meta()

    def schema_of(self, name: str) -> Optional[Schema]:
        return self._topic(name).schema

    def has_topic(self, name: str) -> bool:
        return canon(name) in self._topics

    def topic_name(self, name: str) -> str:
        """Display spelling of a topic."""
        return self._topic(name).name

    def _topic(self, name: str) -> _Topic:
        try:
            return self._topics[canon(name)]
        except (KeyError, AttributeError):
            raise UnknownTopicError(f"unknown topic {name!r}") from None

    def _log(self, name: str, partition: int) -> tuple[_Topic, PartitionLog]:
        topic = self._topic(name)
        if not isinstance(partition, int) or not 0 <= partition < len(topic.logs):
            raise UnknownPartitionError(f"topic {topic.name} has no partition {partition!r}")
        return topic, topic.logs[partition]

    def list_topics(self, include_internal: bool = False) -> list[str]:
        names = [t.name for t in self._topics.values()]
        if not include_internal:
            names = [n for n in names if not n.startswith("__")]
        return sorted(names)

    def describe_topic(self, name: str) -> TopicDescription:
        topic = self._topic(name)
        return TopicDescription(
            name=topic.name,
            partitions=topic.spec.partitions,
            replication_display=topic.spec.replication_display,
            percent_in_sync=100.0,
            end_offsets=[log.end_offset for log in topic.logs],
            start_offsets=[log.start_offset for log in topic.logs],
            internal=topic.name.startswith("__"),
            schema=topic.schema,
        )

    def end_offset(self, name: str, partition: int) -> int:
        return self._log(name, partition)[1].end_offset

    def start_offset(self, name: str, partition: int) -> int:
        return self._log(name, partition)[1].start_offset

    def partition_log(self, name: str, partition: int) -> PartitionLog:
        return self._log(name, partition)[1]

    # -- produce / fetch --------------------------------------------------

    def produce(self, topic_name: str, records: Iterable) -> list[tuple[int, int]]:
        """Route, validate and append. The whole batch is rejected on any invalid record."""
        topic = self._topic(topic_name)
        items = as_producer_records(records)
        if not items:
            return []
        default_time = now_ms()
        prepared: list[tuple[int, ProducerRecord]] = []
        for i, item in enumerate(items):
            try:
                value = canon_value_map(item.value)
                if topic.schema is not None:
                    value = coerce_record(topic.schema, value)
            except ValidationError as exc:
                raise ValidationError(exc.violations, f"record {i}: {exc.message}") from None
            event_time = default_time if item.event_time is None else int(item.event_time)
            if event_time < 0:
                raise ValidationError([], f"record {i}: event_time must be non-negative")
            part = partition_for(item.key, topic.spec.partitions, next(topic.rr))
            prepared.append((part, ProducerRecord(value, item.key, event_time, tuple(item.headers))))

        by_part: dict[int, list[int]] = {}
        for idx, (part, _) in enumerate(prepared):
            by_part.setdefault(part, []).append(idx)
        assignments: list[Optional[tuple[int, int]]] = [None] * len(prepared)
        for part, idxs in sorted(by_part.items()):
            with topic.write_locks[part]:
                base = topic.logs[part].append([prepared[i][1] for i in idxs])
            for n, i in enumerate(idxs):
                assignments[i] = (part, base + n)
        with topic.data_ready:
            topic.data_ready.notify_all()
        return assignments  # type: ignore[return-value]

    def fetch(
        self,
        topic_name: str,
        partition: int,
        from_offset: int,
        max_records: int = 500,
        max_wait: float = 0.0,
    ) -> list[Record]:
        """Read from one partition, long-polling up to ``max_wait`` seconds when empty."""
        topic, log = self._log(topic_name, partition)
        records = log.read(from_offset, max_records)
        if records or max_wait <= 0:
            return records
        deadline = time.monotonic() + max_wait
        with topic.data_ready:
            while log.end_offset <= from_offset and not self._closed:
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    break
                topic.data_ready.wait(remaining)
        return log.read(from_offset, max_records)

    def wait_for_data(self, topic_name: str, positions: dict[int, int], max_wait: float) -> bool:
        """Block until any partition in ``positions`` has data past its position."""
        topic = self._topic(topic_name)
        deadline = time.monotonic() + max_wait

        def ready():
            return any(topic.logs[p].end_offset > off for p, off in positions.items())

        with topic.data_ready:
            while not ready() and not self._closed:
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    return False
                topic.data_ready.wait(remaining)
        return ready()

    # -- consumer groups --------------------------------------------------

    def _replay_offsets(self) -> None:
        log = self._topic(OFFSETS_TOPIC).logs[0]
        pos = log.start_offset
        while True:
            batch = log.read(pos, 1000)
            if not batch:
                break
            for r in batch:
                v = r.value
                k = (v["GROUP"], canon(v["TOPIC"]), v["PARTITION"])
                if v["OFFSET"] >= self._committed.get(k, -1):
                    self._committed[k] = v["OFFSET"]
                    self._commit_meta[k] = v.get("METADATA")
            pos = batch[-1].offset + 1

    def commit_offset(
        self,
        group: str,
        topic_name: str,
        partition: int,
        next_offset: int,
        metadata: Optional[str] = None,
    ) -> int:
        """Record ``next_offset`` as the group's position. Commits never move backwards."""
        _, log = self._log(topic_name, partition)
        end = log.end_offset
        if next_offset < 0 or next_offset > end:
            raise OffsetBeyondEndError(
                f"cannot commit offset {next_offset} for {topic_name}[{partition}]: end offset is {end}"
            )
        key = (group, canon(topic_name), partition)
        with self._offsets_lock:
            prev = self._committed.get(key, -1)
            if next_offset < prev or (next_offset == prev and metadata == self._commit_meta.get(key)):
                return prev
            self.produce(
                OFFSETS_TOPIC,
                [
                    {
                        "GROUP": group,
                        "TOPIC": self.topic_name(topic_name),
                        "PARTITION": partition,
                        "OFFSET": next_offset,
                        "METADATA": metadata,
                    }
                ],
            )
            self._committed[key] = next_offset
            self._commit_meta[key] = metadata
            return next_offset

    def committed(self, group: str, topic_name: str, partition: int) -> Optional[int]:
        return self._committed.get((group, canon(topic_name), partition))

    def committed_metadata(self, group: str, topic_name: str, partition: int) -> Optional[str]:
        return self._commit_meta.get((group, canon(topic_name), partition))

    def subscribe(self, group: str, topic_name: str, position: Union[str, int] = "earliest") -> "Consumer":
        """Join ``group`` on a topic, claiming every partition no other member holds."""
        topic = self._topic(topic_name)
        with self._registry_lock:
            member = next(self._member_ids)
            owners = self._members.setdefault((group, canon(topic.name)), {})
            mine = [p for p in range(topic.spec.partitions) if p not in owners]
            for p in mine:
                owners[p] = member
        positions = {}
        for p in mine:
            log = topic.logs[p]
            committed = self.committed(group, topic.name, p)
            if isinstance(position, int) and not isinstance(position, bool):
                positions[p] = position
            elif committed is not None:
                positions[p] = committed
            elif position == "latest":
                positions[p] = log.end_offset
            elif position == "earliest":
                positions[p] = log.start_offset
            else:
                raise ValueError(f"invalid subscription position {position!r}")
            positions[p] = max(positions[p], log.start_offset)
        return Consumer(self, group, topic.name, member, positions)

    def _release(self, group: str, topic_name: str, member: int) -> None:
        with self._registry_lock:
            owners = self._members.get((group, canon(topic_name)), {})
            for p in [p for p, m in owners.items() if m == member]:
                del owners[p]

    def close(self) -> None:
        self._closed = True
        for topic in list(self._topics.values()):
            with topic.data_ready:
                topic.data_ready.notify_all()
            for log in topic.logs:
                log.close()

    def enforce_retention(self, policy: RetentionPolicy, now: Optional[int] = None) -> int:
        deleted = 0
        for topic in list(self._topics.values()):
            if topic.name == OFFSETS_TOPIC:
                continue
            for lock, log in zip(topic.write_locks, topic.logs):
                with lock:
                    deleted += log.enforce_retention(policy, now)
        return deleted


class Consumer:
    """A group member holding a fixed set of partitions."""

    def __init__(self, broker: Broker, group: str, topic: str, member: int, positions: dict[int, int]):
        self.broker = broker
        self.group = group
        self.topic = topic
        self.member = member
        self.positions = dict(positions)
        self._closed = False

    @property
    def assignment(self) -> list[int]:
        return sorted(self.positions)

    def poll(self, max_records: int = 500, max_wait: float = 0.0) -> list[Record]:
        if self._closed:
            raise EstemdError("consumer is closed")
        out = self._drain(max_records)
        if out or max_wait <= 0 or not self.positions:
            return out
        if self.broker.wait_for_data(self.topic, self.positions, max_wait):
            out = self._drain(max_records)
        return out

    def _drain(self, max_records: int) -> list[Record]:
        out: list[Record] = []
        for p in sorted(self.positions):
            if len(out) >= max_records:
                break
            batch = self.broker.fetch(self.topic, p, self.positions[p], max_records - len(out))
            if batch:
                self.positions[p] = batch[-1].offset + 1
                out.extend(batch)
        return out

    def seek(self, partition: int, offset: int) -> None:
        self.positions[partition] = offset

    def commit(self) -> dict[int, int]:
        return {
            p: self.broker.commit_offset(self.group, self.topic, p, off)
            for p, off in self.positions.items()
        }

    def close(self) -> None:
        if not self._closed:
            self._closed = True
            self.broker._release(self.group, self.topic, self.member)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
