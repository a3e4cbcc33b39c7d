"""Running topologies against the broker.

A topology is a linear chain of operator nodes from one source topic to one
output topic, with at most one windowed node. Each source partition gets its
own task and its own window state.

Offsets are committed only after the outputs of a batch are produced, so a
crash replays (and may duplicate) but never skips. Windowed tasks commit the
oldest offset still contributing to an open window, together with the
watermark; a restart replays from there and rebuilds exactly the open
windows.
"""
from __future__ import annotations

import json
import logging
import threading
from dataclasses import dataclass, field
from typing import Callable, Optional

from estemd.engine.operators import (
    WINDOW_END,
    Aggregation,
    Negation,
    compile_stateless,
    is_stateless,
    output_schema,
)
from estemd.engine.windows import (
    NegationState,
    WindowState,
    advance_negation,
    advance_window,
)
from estemd.errors import SemanticError
from estemd.expr import compile_expr
from estemd.model import ProducerRecord, Record, Schema

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Topology:
    name: str
    source: str
    nodes: tuple
    output: str

    def __post_init__(self):
        object.__setattr__(self, "nodes", tuple(self.nodes))
        windowed = [i for i, n in enumerate(self.nodes) if not is_stateless(n)]
        if len(windowed) > 1:
            raise SemanticError("a topology holds at most one windowed operator")

    @property
    def windowed(self) -> bool:
        return any(not is_stateless(n) for n in self.nodes)

    def schemas(self, source_schema: Schema) -> list[Schema]:
        """Input schema followed by each node's output schema."""
        out = [source_schema]
        for node in self.nodes:
            out.append(output_schema(node, out[-1]))
        return out

    def output_schema(self, source_schema: Schema) -> Schema:
        return self.schemas(source_schema)[-1]


class Chain:
    """Compiled node chain for one partition, owning its window state."""

    def __init__(self, topology: Topology):
        self.topology = topology
        nodes = topology.nodes
        idx = next((i for i, n in enumerate(nodes) if not is_stateless(n)), None)
        if idx is None:
            self.prefix = [compile_stateless(n) for n in nodes]
            self.window_node = None
            self.suffix = []
        else:
            self.prefix = [compile_stateless(n) for n in nodes[:idx]]
            self.window_node = nodes[idx]
            self.suffix = [compile_stateless(n) for n in nodes[idx + 1 :]]
        self.state = None
        if isinstance(self.window_node, Aggregation):
            self.state = WindowState()
        elif isinstance(self.window_node, Negation):
            self.state = NegationState()
            self._predicate = compile_expr(self.window_node.predicate)

    @staticmethod
    def _run(fns, values: list) -> list:
        for fn in fns:
            nxt = []
            for v in values:
                nxt.extend(fn(v))
            values = nxt
            if not values:
                break
        return values

    def process(self, record: Record) -> list[ProducerRecord]:
        values = self._run(self.prefix, [record.value])
        node = self.window_node
        if node is None:
            return [ProducerRecord(v, record.key, record.event_time) for v in values]
        if isinstance(node, Aggregation):
            rows = []
            for v in values:
                rows.extend(
                    advance_window(self.state, record.with_value(v), node.window, node.functions, node.group_by)
                )
            if not values:
                rows.extend(
                    advance_window(self.state, record, node.window, node.functions, node.group_by, include=False)
                )
        else:
            rows = advance_negation(self.state, record, node.window, self._predicate)
        out = []
        group_by = node.group_by if isinstance(node, Aggregation) else ()
        for row in rows:
            key = "|".join(str(row[g]) for g in group_by) if group_by else None
            end = row[WINDOW_END]
            for v in self._run(self.suffix, [row]):
                out.append(ProducerRecord(v, key, end))
        return out

    def commit_position(self, next_offset: int) -> int:
        if self.state is None:
            return next_offset
        oldest = self.state.min_open_offset()
        return next_offset if oldest is None else min(oldest, next_offset)

    def snapshot(self) -> Optional[str]:
        if isinstance(self.state, WindowState):
            return json.dumps({"watermark": self.state.watermark})
        if isinstance(self.state, NegationState):
            return json.dumps({"watermark": self.state.watermark, "next_start": self.state.next_start})
        return None

    def restore(self, metadata: Optional[str]) -> None:
        if not metadata or self.state is None:
            return
        doc = json.loads(metadata)
        self.state.watermark = doc.get("watermark", -1)
        if isinstance(self.state, NegationState):
            self.state.next_start = doc.get("next_start")


class TopologyTask:
    """Processes one source partition. Drive it with :meth:`step` or run it in a thread."""

    def __init__(
        self,
        topology: Topology,
        broker,
        partition: int = 0,
        *,
        group: Optional[str] = None,
        fault_hook: Optional[Callable[[str], None]] = None,
    ):
        self.topology = topology
        self.broker = broker
        self.partition = partition
        self.group = group if group is not None else f"query-{topology.name}"
        self.fault_hook = fault_hook
        self.chain = Chain(topology)
        self.processed = 0
        committed = broker.committed(self.group, topology.source, partition)
        start = broker.start_offset(topology.source, partition)
        self.position = start if committed is None else max(committed, start)
        self.chain.restore(broker.committed_metadata(self.group, topology.source, partition))

    def step(self, max_records: int = 500, max_wait: float = 0.0) -> int:
        records = self.broker.fetch(self.topology.source, self.partition, self.position, max_records, max_wait)
        if not records:
            return 0
        outputs = []
        for r in records:
            outputs.extend(self.chain.process(r))
        if outputs:
            self.broker.produce(self.topology.output, outputs)
        if self.fault_hook:
            self.fault_hook("topology.after_produce")
        self.position = records[-1].offset + 1
        self.broker.commit_offset(
            self.group,
            self.topology.source,
            self.partition,
            self.chain.commit_position(self.position),
            self.chain.snapshot(),
        )
        self.processed += len(records)
        return len(records)


@dataclass
class RunningTopology:
    topology: Topology
    tasks: list
    threads: list = field(default_factory=list)
    state: str = "running"
    error: Optional[str] = None
    _stop: threading.Event = field(default_factory=threading.Event)

    def stop(self, timeout: float = 5.0) -> None:
        self._stop.set()
        for t in self.threads:
            if t is not threading.current_thread():
                t.join(timeout)
        if self.state == "running":
            self.state = "terminated"

    @property
    def processed(self) -> int:
        return sum(t.processed for t in self.tasks)

    def _loop(self, task: TopologyTask) -> None:
        while not self._stop.is_set():
            try:
                task.step(max_records=1000, max_wait=0.05)
            except Exception as exc:  # noqa: BLE001 - surfaced through status
                if self._stop.is_set():
                    return
                logger.exception("topology %s failed", self.topology.name)
                self.state = "failed"
                self.error = f"{type(exc).__name__}: {exc}"
                self._stop.set()
                return


def run_topology(topology: Topology, broker, *, output_partitions: int = 1) -> RunningTopology:
    """Start one thread per source partition; the output topic is created if missing."""
    broker.ensure_topic(topology.output, output_partitions)
    parts = broker.describe_topic(topology.source).partitions
    tasks = [TopologyTask(topology, broker, p) for p in range(parts)]
    handle = RunningTopology(topology, tasks)
    for task in tasks:
        t = threading.Thread(
            target=handle._loop, args=(task,), name=f"topology-{topology.name}-{task.partition}", daemon=True
        )
        handle.threads.append(t)
        t.start()
    return handle
