"""Statement execution, the stream catalog and the persistent-query registry.

Stream definitions and persistent queries are journalled to the internal
``__queries`` topic; a new engine over the same broker replays the journal,
so the catalog, query ids and running queries survive a restart.
"""
from __future__ import annotations

import itertools
import logging
import threading
import time
from dataclasses import dataclass, field
from typing import Any, Callable, Optional, Union

from estemd.engine.runtime import Chain, RunningTopology, run_topology
from estemd.eql import ast
from estemd.eql.analyzer import AnalyzedCreate, AnalyzedSelect, StreamInfo, analyze
from estemd.eql.parser import parse
from estemd.eql.planner import plan
from estemd.eql.printer import format_statement
from estemd.errors import SemanticError, UnknownQueryError
from estemd.model import Record, TopicSpec, canon

logger = logging.getLogger(__name__)

QUERIES_TOPIC = "__queries"


@dataclass
class QueryHandle:
    id: str
    statement: str
    topology: str
    output: str
    state: str = "running"
    runner: Optional[RunningTopology] = field(default=None, repr=False, compare=False)

    def refresh(self) -> str:
        if self.runner is not None and self.state == "running" and self.runner.state == "failed":
            self.state = "failed"
        return self.state

    def to_json(self) -> dict:
        d = {"id": self.id, "statement": self.statement, "topology": self.topology, "output": self.output, "state": self.refresh()}
        if self.runner is not None and self.runner.error:
            d["error"] = self.runner.error
        return d


@dataclass
class StatementResult:
    kind: str
    data: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {"kind": self.kind, **self.data}


RowCallback = Callable[[Record], Any]


class QueryEngine:
    def __init__(self, broker, *, start_queries: bool = True):
        self.broker = broker
        self.catalog: dict[str, StreamInfo] = {}
        self.queries: dict[str, QueryHandle] = {}
        self._lock = threading.RLock()
        self._ids = itertools.count(1)
        self._start_queries = start_queries
        broker.ensure_topic(QUERIES_TOPIC)
        self._replay()

    # -- journal ----------------------------------------------------------

    def _journal(self, **value) -> None:
        self.broker.produce(QUERIES_TOPIC, [{k.upper(): v for k, v in value.items()}])

    def _replay(self) -> None:
        pending: dict[str, dict] = {}
        order: list[str] = []
        pos = self.broker.start_offset(QUERIES_TOPIC, 0)
        while True:
            batch = self.broker.fetch(QUERIES_TOPIC, 0, pos, 1000)
            if not batch:
                break
            for r in batch:
                v = r.value
                kind = v["KIND"]
                if kind == "stream":
                    created = analyze(parse(v["SQL"]), self.catalog)
                    self.catalog[created.stream.name] = created.stream
                elif kind == "query":
                    created = analyze(parse(v["SQL"]), self.catalog)
                    self.catalog[created.stream.name] = created.stream
                    qid = v["ID"]
                    pending[qid] = {"sql": v["SQL"], "created": created, "state": "running"}
                    order.append(qid)
                    self._ids = itertools.count(int(qid.split("_")[1]) + 1)
                elif kind == "terminate":
                    if v["ID"] in pending:
                        pending[v["ID"]]["state"] = "terminated"
            pos = batch[-1].offset + 1
        for qid in order:
            info = pending[qid]
            handle = self._make_handle(qid, info["sql"], info["created"])
            handle.state = info["state"]
            if handle.state == "running" and self._start_queries:
                self._start(handle, info["created"])

    # -- public API -------------------------------------------------------

    def execute(
        self,
        statement: Union[str, ast.Statement],
        on_row: Optional[RowCallback] = None,
        cancel: Optional[threading.Event] = None,
        timeout: Optional[float] = None,
    ) -> StatementResult:
        """Run one statement.

        Interactive selects stream rows to ``on_row`` from the earliest offset
        and block until LIMIT is reached (outcome ``"limit"``), ``cancel`` is
        set or ``timeout`` expires (outcome ``"terminated"``).
        """
        stmt = parse(statement) if isinstance(statement, str) else statement
        if isinstance(stmt, ast.ShowTopics):
            return StatementResult("topics", {"topics": self.broker.list_topics()})
        if isinstance(stmt, ast.ShowStreams):
            return StatementResult("streams", {"streams": [s.to_json() for s in self.streams()]})
        if isinstance(stmt, ast.ShowQueries):
            return StatementResult("queries", {"queries": [q.to_json() for q in self.list_queries()]})
        if isinstance(stmt, ast.Terminate):
            self.terminate(stmt.query_id)
            return StatementResult("terminated", {"query_id": canon(stmt.query_id)})
        if isinstance(stmt, ast.CreateStream):
            return self._create(stmt)
        analyzed = analyze(stmt, self.catalog)
        return self._interactive(analyzed, on_row, cancel, timeout)

    def run_statement(self, sql: str) -> dict:
        return self.execute(sql).to_json()

    def stream_names(self) -> list[str]:
        return sorted(self.catalog)

    def list_topics(self) -> list[str]:
        return self.broker.list_topics()

    def create_topic(self, name: str, partitions: int = 1):
        return self.broker.create_topic(TopicSpec(name, partitions))

    def streams(self) -> list[StreamInfo]:
        return [self.catalog[k] for k in sorted(self.catalog)]

    def list_queries(self) -> list[QueryHandle]:
        return [self.queries[k] for k in sorted(self.queries)]

    def terminate(self, query_id: str) -> QueryHandle:
        qid = canon(query_id)
        with self._lock:
            handle = self.queries.get(qid)
            if handle is None:
                raise UnknownQueryError(f"unknown query {qid}")
            if handle.state == "terminated":
                return handle
            if handle.runner is not None:
                handle.runner.stop()
            handle.state = "terminated"
            self._journal(kind="terminate", id=qid)
            return handle

    def close(self) -> None:
        with self._lock:
            for h in self.queries.values():
                if h.runner is not None:
                    h.runner.stop()

    # -- internals --------------------------------------------------------

    def _make_handle(self, qid: str, sql: str, created: AnalyzedCreate) -> QueryHandle:
        handle = QueryHandle(qid, sql, f"{created.stream.name}_{qid}", created.stream.topic)
        self.queries[qid] = handle
        return handle

    def _start(self, handle: QueryHandle, created: AnalyzedCreate) -> None:
        stream = created.stream
        if self.broker.has_topic(stream.topic):
            self.broker.attach_schema(stream.topic, stream.schema)
        else:
            self.broker.ensure_topic(stream.topic, 1, stream.schema)
        topology = plan(created.query, handle.topology, self.broker.topic_name(stream.topic))
        handle.runner = run_topology(topology, self.broker)

    def _create(self, stmt: ast.CreateStream) -> StatementResult:
        with self._lock:
            created = analyze(stmt, self.catalog)
            stream = created.stream
            sql = format_statement(stmt)
            if created.query is None:
                existing = self.broker.has_topic(stream.topic)
                if existing:
                    current = self.broker.schema_of(stream.topic)
                    if current is not None and current != stream.schema:
                        raise SemanticError(
                            f"topic {stream.topic} already carries a different schema"
                        )
                    self.broker.attach_schema(stream.topic, stream.schema)
                else:
                    self.broker.ensure_topic(stream.topic, 1, stream.schema)
                self.catalog[stream.name] = stream
                self._journal(kind="stream", sql=sql)
                return StatementResult("stream_created", {"stream": stream.name, "topic": stream.topic, "query_id": None})
            qid = f"Q_{next(self._ids):04d}"
            handle = self._make_handle(qid, sql, created)
            self.catalog[stream.name] = stream
            self._journal(kind="query", id=qid, sql=sql)
            self._start(handle, created)
            return StatementResult(
                "stream_created", {"stream": stream.name, "topic": handle.output, "query_id": qid}
            )

    def _interactive(
        self,
        analyzed: AnalyzedSelect,
        on_row: Optional[RowCallback],
        cancel: Optional[threading.Event],
        timeout: Optional[float],
    ) -> StatementResult:
        topology = plan(analyzed)
        source = analyzed.source.topic
        stream_name = analyzed.source.name
        parts = self.broker.describe_topic(source).partitions
        chains = {p: Chain(topology) for p in range(parts)}
        positions = {p: self.broker.start_offset(source, p) for p in range(parts)}
        limit = analyzed.select.limit
        deadline = None if timeout is None else time.monotonic() + timeout
        rows = 0
        collected: list[dict] = []
        while True:
            progressed = False
            for p in range(parts):
                batch = self.broker.fetch(source, p, positions[p], 500)
                if not batch:
                    continue
                progressed = True
                for r in batch:
                    positions[p] = r.offset + 1
                    for out in chains[p].process(r):
                        row = Record(stream_name, p, None, int(out.event_time), out.key, out.value)
                        rows += 1
                        if on_row is not None:
                            on_row(row)
                        else:
                            collected.append(out.value)
                        if limit is not None and rows >= limit:
                            return self._select_result("limit", rows, analyzed, collected, on_row)
            if cancel is not None and cancel.is_set():
                break
            if deadline is not None and time.monotonic() >= deadline:
                break
            if not progressed:
                wait = 0.1 if deadline is None else max(0.0, min(0.1, deadline - time.monotonic()))
                self.broker.wait_for_data(source, positions, wait)
        return self._select_result("terminated", rows, analyzed, collected, on_row)

    @staticmethod
    def _select_result(outcome, rows, analyzed, collected, on_row) -> StatementResult:
        data = {"outcome": outcome, "rows": rows, "columns": analyzed.output.names, "stream": analyzed.source.name}
        if on_row is None:
            data["values"] = collected
        return StatementResult("select", data)
