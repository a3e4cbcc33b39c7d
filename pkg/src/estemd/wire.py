"""NDJSON-over-TCP protocol: frame codec, threaded server and a blocking client.

Every frame is one line of UTF-8 JSON. Requests carry ``op`` and ``corr``;
responses echo ``corr`` with ``ok`` plus ``result`` or ``error``. Push frames
(``event: record`` for subscriptions, ``event: row`` for query rows) carry the
corr of the request that started them.
"""
from __future__ import annotations

import itertools
import json
import logging
import os
import queue
import socket
import socketserver
import threading
import time
from dataclasses import dataclass
from typing import Any, Callable, Iterable, Optional

from estemd.errors import ConnectionClosedError, EstemdError, ProtocolError, RemoteError
from estemd.model import ProducerRecord, Record, Schema, TopicSpec, as_producer_records, canon

logger = logging.getLogger(__name__)

DEFAULT_PORT = 9021
MAX_FRAME = 64 << 20


def default_port() -> int:
    return int(os.environ.get("ESTEMD_PORT", DEFAULT_PORT))


def parse_bootstrap(text: str) -> tuple[str, int]:
    host, _, port = text.rpartition(":")
    if not host:
        return text, DEFAULT_PORT
    return host, int(port)


# -- codec -------------------------------------------------------------------


def encode_frame(frame: dict) -> bytes:
    """Serialise to one line. json escapes control characters, so no raw newline survives."""
    return json.dumps(frame, separators=(",", ":"), ensure_ascii=False).encode("utf-8") + b"\n"


def decode_frame(line) -> dict:
    if isinstance(line, bytes):
        try:
            line = line.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ProtocolError(f"frame is not UTF-8: {exc}") from None
    try:
        frame = json.loads(line)
    except json.JSONDecodeError as exc:
        pos = len(line[: exc.pos].encode("utf-8"))
        raise ProtocolError(f"invalid JSON at byte {pos}: {exc.msg}") from None
    if not isinstance(frame, dict):
        raise ProtocolError("frame must be a JSON object")
    return frame


def ok_frame(corr: int, result: Any) -> dict:
    return {"corr": corr, "ok": True, "result": result}


def error_frame(corr: int, code: str, msg: str) -> dict:
    return {"corr": corr, "ok": False, "error": {"code": code, "msg": msg}}


def record_from_json(doc: dict) -> Record:
    return Record(
        doc["topic"],
        doc["partition"],
        doc.get("offset"),
        doc["event_time"],
        doc.get("key"),
        doc["value"],
        tuple(tuple(h) for h in doc.get("headers") or ()),
    )


def producer_record_to_json(r: ProducerRecord) -> dict:
    d: dict = {"value": dict(r.value)}
    if r.key is not None:
        d["key"] = r.key
    if r.event_time is not None:
        d["event_time"] = int(r.event_time)
    if r.headers:
        d["headers"] = [list(h) for h in r.headers]
    return d


# -- server ------------------------------------------------------------------


class BadRequest(EstemdError):
    code = "bad_request"


class UnknownOp(EstemdError):
    code = "unknown_op"


@dataclass
class _Worker:
    cancel: threading.Event
    thread: Optional[threading.Thread] = None
    subscription: Any = None  # (group, topic, consumer, delivered positions)


class _Connection:
    def __init__(self, server: "WireServer", sock: socket.socket):
        self.server = server
        self.sock = sock
        self.send_lock = threading.Lock()
        self.workers: dict[int, _Worker] = {}
        self.closed = False

    def send(self, frame: dict) -> None:
        data = encode_frame(frame)
        with self.send_lock:
            if self.closed:
                raise ConnectionClosedError("connection closed")
            try:
                self.sock.sendall(data)
            except OSError:
                self.closed = True
                raise ConnectionClosedError("connection closed") from None

    def close(self) -> None:
        # cancelled workers still get to send their final response
        for w in list(self.workers.values()):
            w.cancel.set()
        for w in list(self.workers.values()):
            if w.thread is not None and w.thread is not threading.current_thread():
                w.thread.join(2.0)
        self.closed = True


class _Handler(socketserver.StreamRequestHandler):
    server: "_TCPServer"

    def handle(self) -> None:
        wire: WireServer = self.server.wire
        conn = _Connection(wire, self.request)
        wire._register(conn)
        try:
            while not wire.stopping.is_set():
                try:
                    line = self.rfile.readline(MAX_FRAME)
                except OSError:
                    break
                if not line:
                    break
                if not line.strip():
                    continue
                try:
                    frame = decode_frame(line)
                    corr = frame.get("corr")
                    if not isinstance(corr, int) or isinstance(corr, bool):
                        raise ProtocolError("frame needs an integer corr")
                    if not isinstance(frame.get("op"), str):
                        raise ProtocolError("frame needs a string op")
                except ProtocolError as exc:
                    conn.send(error_frame(0, exc.code, exc.message))
                    continue
                wire.dispatch(conn, frame)
        except ConnectionClosedError:
            pass
        finally:
            conn.close()
            wire._unregister(conn)


class _TCPServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True
    wire: "WireServer"


class WireServer:
    """Serves one broker and query engine. ``start`` returns once the socket is bound."""

    def __init__(self, broker, engine=None, host: str = "0.0.0.0", port: Optional[int] = None):
        self.broker = broker
        self.engine = engine
        self.stopping = threading.Event()
        self._conns: set = set()
        self._lock = threading.Lock()
        self._anon = itertools.count(1)
        self._tcp = _TCPServer((host, default_port() if port is None else port), _Handler)
        self._tcp.wire = self
        self._thread: Optional[threading.Thread] = None

    @property
    def address(self) -> tuple[str, int]:
        return self._tcp.server_address[:2]

    def start(self) -> "WireServer":
        self._thread = threading.Thread(target=self._tcp.serve_forever, kwargs={"poll_interval": 0.1}, name="wire-server", daemon=True)
        self._thread.start()
        return self

    def shutdown(self) -> None:
        """Stop accepting, cancel streams, let in-flight responses drain, then close sockets."""
        self.stopping.set()
        self._tcp.shutdown()
        with self._lock:
            conns = list(self._conns)
        for c in conns:
            c.close()
            try:
                c.sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
        self._tcp.server_close()

    def _register(self, conn) -> None:
        with self._lock:
            self._conns.add(conn)

    def _unregister(self, conn) -> None:
        with self._lock:
            self._conns.discard(conn)

    # -- dispatch ---------------------------------------------------------

    def dispatch(self, conn: _Connection, frame: dict) -> None:
        corr = frame["corr"]
        op = frame["op"]
        try:
            if op == "subscribe":
                return self._subscribe(conn, frame)
            if op == "query":
                return self._query(conn, frame)
            handler = getattr(self, f"op_{op}", None)
            if handler is None:
                raise UnknownOp(f"unknown op {op!r}")
            result = handler(conn, frame)
        except EstemdError as exc:
            conn.send(error_frame(corr, exc.code, exc.message))
            return
        except (KeyError, TypeError, ValueError) as exc:
            conn.send(error_frame(corr, "bad_request", f"{type(exc).__name__}: {exc}"))
            return
        conn.send(ok_frame(corr, result))

    @staticmethod
    def _need(frame: dict, name: str):
        if name not in frame:
            raise BadRequest(f"missing field {name!r}")
        return frame[name]

    def op_create_topic(self, conn, frame) -> dict:
        name = self._need(frame, "topic")
        schema = Schema.from_json(frame["schema"]) if frame.get("schema") else None
        if frame.get("if_not_exists"):
            created = self.broker.ensure_topic(name, int(frame.get("partitions", 1)), schema)
            return {"created": created, **self.broker.describe_topic(name).to_json()}
        desc = self.broker.create_topic(TopicSpec(name, int(frame.get("partitions", 1))), schema)
        return {"created": True, **desc.to_json()}

    def op_list_topics(self, conn, frame) -> dict:
        return {"topics": self.broker.list_topics(bool(frame.get("internal", False)))}

    def op_describe(self, conn, frame) -> dict:
        return self.broker.describe_topic(self._need(frame, "topic")).to_json()

    def op_produce(self, conn, frame) -> dict:
        topic = self._need(frame, "topic")
        records = self._need(frame, "records")
        if not isinstance(records, list):
            raise BadRequest("records must be a list")
        out = self.broker.produce(topic, records)
        return {"assignments": [{"partition": p, "offset": o} for p, o in out]}

    def op_fetch(self, conn, frame) -> dict:
        recs = self.broker.fetch(
            self._need(frame, "topic"),
            int(frame.get("partition", 0)),
            int(self._need(frame, "offset")),
            int(frame.get("max_records", 500)),
            min(float(frame.get("max_wait", 0.0)), 30.0),
        )
        return {"records": [r.to_json() for r in recs]}

    def op_commit(self, conn, frame) -> dict:
        sub_corr = frame.get("subscription")
        if sub_corr is not None:
            worker = conn.workers.get(sub_corr)
            if worker is None or worker.subscription is None:
                raise BadRequest(f"no active subscription with corr {sub_corr}")
            group, topic, _, delivered = worker.subscription
            offsets = frame.get("offsets")
            if offsets is None:
                offsets = dict(delivered)
            done = {}
            for p, off in offsets.items():
                done[str(p)] = self.broker.commit_offset(group, topic, int(p), int(off))
            return {"committed": done}
        group = self._need(frame, "group")
        topic = self._need(frame, "topic")
        p = int(frame.get("partition", 0))
        off = self.broker.commit_offset(group, topic, p, int(self._need(frame, "offset")), frame.get("metadata"))
        return {"committed": {str(p): off}}

    def op_committed(self, conn, frame) -> dict:
        return {
            "offset": self.broker.committed(
                self._need(frame, "group"), self._need(frame, "topic"), int(frame.get("partition", 0))
            )
        }

    def op_terminate_query(self, conn, frame) -> dict:
        if frame.get("target_corr") is not None:
            worker = conn.workers.get(frame["target_corr"])
            if worker is None:
                return {"cancelled": False}
            worker.cancel.set()
            if worker.thread is not None and worker.subscription is not None:
                # release the group's partitions before answering
                worker.thread.join(5.0)
            return {"cancelled": True}
        if self.engine is None:
            raise BadRequest("no query engine attached")
        handle = self.engine.terminate(self._need(frame, "query_id"))
        return {"query_id": handle.id, "state": handle.state}

    # -- streaming ops ----------------------------------------------------

    def _spawn(self, conn: _Connection, corr: int, target, worker: _Worker) -> None:
        def run():
            try:
                target()
            except ConnectionClosedError:
                pass
            finally:
                conn.workers.pop(corr, None)

        worker.thread = threading.Thread(target=run, name=f"wire-{corr}", daemon=True)
        conn.workers[corr] = worker
        worker.thread.start()

    def _subscribe(self, conn: _Connection, frame: dict) -> None:
        corr = frame["corr"]
        topic = self._need(frame, "topic")
        group = frame.get("group") or f"_anon-{next(self._anon)}"
        consumer = self.broker.subscribe(group, topic, frame.get("position", "earliest"))
        delivered = dict(consumer.positions)
        worker = _Worker(threading.Event(), subscription=(group, consumer.topic, consumer, delivered))
        conn.send(ok_frame(corr, {"group": group, "topic": consumer.topic, "partitions": consumer.assignment, "positions": {str(k): v for k, v in delivered.items()}}))

        def pump():
            try:
                while not worker.cancel.is_set() and not conn.closed:
                    for r in consumer.poll(500, 0.1):
                        conn.send({"corr": corr, "event": "record", "record": r.to_json()})
                        delivered[r.partition] = r.offset + 1
            finally:
                consumer.close()

        self._spawn(conn, corr, pump, worker)

    def _query(self, conn: _Connection, frame: dict) -> None:
        corr = frame["corr"]
        if self.engine is None:
            raise BadRequest("no query engine attached")
        sql = self._need(frame, "sql")
        timeout = frame.get("timeout")
        worker = _Worker(threading.Event())

        def on_row(row: Record) -> None:
            conn.send({"corr": corr, "event": "row", "stream": row.topic, "event_time": int(row.event_time), "row": dict(row.value)})

        def run():
            try:
                result = self.engine.execute(sql, on_row=on_row, cancel=worker.cancel, timeout=timeout)
                conn.send(ok_frame(corr, result.to_json()))
            except EstemdError as exc:
                conn.send(error_frame(corr, exc.code, exc.message))

        self._spawn(conn, corr, run, worker)


def serve(broker, engine=None, host: str = "0.0.0.0", port: Optional[int] = None) -> WireServer:
    return WireServer(broker, engine, host, port).start()


# -- client ------------------------------------------------------------------


class Client:
    """Blocking client. Safe to share between threads; responses are routed by corr."""

    def __init__(self, host: str = "127.0.0.1", port: int = DEFAULT_PORT, timeout: float = 10.0):
        try:
            self.sock = socket.create_connection((host, port), timeout=timeout)
        except OSError as exc:
            raise ConnectionClosedError(f"cannot connect to {host}:{port}: {exc}") from None
        self.sock.settimeout(None)
        self.sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self.timeout = timeout
        self._corr = itertools.count(1)
        self._send_lock = threading.Lock()
        self._lock = threading.Lock()
        self._pending: dict[int, queue.Queue] = {}
        self._push: dict[int, Callable[[Optional[dict]], None]] = {}
        self.closed = False
        self.server_errors: list[dict] = []
        self._reader = threading.Thread(target=self._read_loop, name="wire-client", daemon=True)
        self._reader.start()

    @classmethod
    def from_bootstrap(cls, bootstrap: str, timeout: float = 10.0) -> "Client":
        host, port = parse_bootstrap(bootstrap)
        return cls(host, port, timeout)

    def _read_loop(self) -> None:
        f = self.sock.makefile("rb")
        try:
            for line in f:
                try:
                    frame = decode_frame(line)
                except ProtocolError:
                    logger.warning("dropping undecodable frame from server")
                    continue
                corr = frame.get("corr")
                if "event" in frame:
                    handler = self._push.get(corr)
                    if handler is not None:
                        handler(frame)
                    continue
                if corr == 0:
                    self.server_errors.append(frame)
                with self._lock:
                    q = self._pending.pop(corr, None)
                if q is not None:
                    q.put(frame)
        except (OSError, ValueError):
            pass
        finally:
            self.closed = True
            with self._lock:
                pending = list(self._pending.values())
                self._pending.clear()
                pushes = list(self._push.values())
            for q in pending:
                q.put(None)
            for h in pushes:
                h(None)

    def close(self) -> None:
        if not self.closed:
            self.closed = True
            try:
                self.sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            self.sock.close()
        self._reader.join(2.0)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def send_raw(self, data: bytes) -> None:
        with self._send_lock:
            try:
                self.sock.sendall(data)
            except OSError:
                self.closed = True
                raise ConnectionClosedError("connection closed") from None

    def _start(self, op: str, payload: dict, on_push=None) -> tuple[int, queue.Queue]:
        if self.closed:
            raise ConnectionClosedError("connection closed")
        corr = next(self._corr)
        q: queue.Queue = queue.Queue(1)
        with self._lock:
            self._pending[corr] = q
            if on_push is not None:
                self._push[corr] = on_push
        self.send_raw(encode_frame({"op": op, "corr": corr, **payload}))
        return corr, q

    def _finish(self, corr: int, frame: Optional[dict], keep_push: bool = False):
        if not keep_push:
            with self._lock:
                self._push.pop(corr, None)
        if frame is None:
            raise ConnectionClosedError("connection closed before a response arrived")
        if not frame.get("ok"):
            err = frame.get("error") or {}
            raise RemoteError(err.get("code", "error"), err.get("msg", ""))
        return frame.get("result")

    def request(self, op: str, timeout: Optional[float] = None, **payload):
        """One blocking round trip. Returns ``result`` or raises RemoteError."""
        corr, q = self._start(op, payload)
        try:
            frame = q.get(timeout=self.timeout if timeout is None else timeout)
        except queue.Empty:
            with self._lock:
                self._pending.pop(corr, None)
            raise ConnectionClosedError(f"no response to {op} within timeout") from None
        return self._finish(corr, frame)

    # -- broker-shaped API ------------------------------------------------

    def list_topics(self, include_internal: bool = False) -> list[str]:
        return self.request("list_topics", internal=include_internal)["topics"]

    def has_topic(self, name: str) -> bool:
        return canon(name) in {canon(t) for t in self.list_topics(True)}

    def describe_topic(self, name: str) -> dict:
        return self.request("describe", topic=name)

    def schema_of(self, name: str) -> Optional[Schema]:
        doc = self.describe_topic(name).get("schema")
        return Schema.from_json(doc) if doc else None

    def create_topic(self, name, partitions: int = 1, schema: Optional[Schema] = None) -> dict:
        if isinstance(name, TopicSpec):
            name, partitions = name.name, name.partitions
        payload = {"topic": name, "partitions": partitions}
        if schema is not None:
            payload["schema"] = schema.to_json()
        return self.request("create_topic", **payload)

    def ensure_topic(self, name: str, partitions: int = 1, schema: Optional[Schema] = None) -> bool:
        payload = {"topic": name, "partitions": partitions, "if_not_exists": True}
        if schema is not None:
            payload["schema"] = schema.to_json()
        return self.request("create_topic", **payload)["created"]

    def produce(self, topic: str, records: Iterable) -> list[tuple[int, int]]:
        items = [producer_record_to_json(r) for r in as_producer_records(records)]
        res = self.request("produce", topic=topic, records=items)
        return [(a["partition"], a["offset"]) for a in res["assignments"]]

    def fetch(self, topic: str, partition: int, from_offset: int, max_records: int = 500, max_wait: float = 0.0) -> list[Record]:
        res = self.request(
            "fetch", timeout=self.timeout + max_wait, topic=topic, partition=partition,
            offset=from_offset, max_records=max_records, max_wait=max_wait,
        )
        return [record_from_json(d) for d in res["records"]]

    def commit_offset(self, group: str, topic: str, partition: int, next_offset: int, metadata: Optional[str] = None) -> int:
        res = self.request("commit", group=group, topic=topic, partition=partition, offset=next_offset, metadata=metadata)
        return res["committed"][str(partition)]

    def committed(self, group: str, topic: str, partition: int) -> Optional[int]:
        return self.request("committed", group=group, topic=topic, partition=partition)["offset"]

    def subscribe(self, group: Optional[str], topic: str, position="earliest") -> "RemoteConsumer":
        return RemoteConsumer(self, group, topic, position)

    # -- query-plane API --------------------------------------------------

    def query(
        self,
        sql: str,
        on_row: Optional[Callable[[dict], Any]] = None,
        cancel: Optional[threading.Event] = None,
        timeout: Optional[float] = None,
    ) -> dict:
        """Run one statement; row frames go to ``on_row`` as they arrive.

        Setting ``cancel`` asks the server to stop the query; the final result
        then reports outcome ``terminated``.
        """

        def push(frame):
            if frame is not None and on_row is not None:
                on_row(frame)

        payload = {"sql": sql}
        if timeout is not None:
            payload["timeout"] = timeout
        corr, q = self._start("query", payload, push)
        cancelled = False
        while True:
            try:
                frame = q.get(timeout=0.05)
                break
            except queue.Empty:
                if self.closed:
                    frame = None
                    break
                if cancel is not None and cancel.is_set() and not cancelled:
                    cancelled = True
                    self.request("terminate_query", target_corr=corr)
        return self._finish(corr, frame)

    def run_statement(self, sql: str) -> dict:
        return self.query(sql)

    def stream_names(self) -> list[str]:
        return [s["name"] for s in self.query("SHOW STREAMS;")["streams"]]

    def terminate_query(self, query_id: str) -> dict:
        return self.request("terminate_query", query_id=query_id)


class RemoteConsumer:
    """Client side of a subscription. Pushed records queue up until polled."""

    def __init__(self, client: Client, group: Optional[str], topic: str, position="earliest"):
        self.client = client
        self._q: queue.Queue = queue.Queue()
        self._closed = False
        self.corr, rq = client._start("subscribe", {"topic": topic, "group": group, "position": position}, self._on_push)
        try:
            frame = rq.get(timeout=client.timeout)
        except queue.Empty:
            raise ConnectionClosedError("no response to subscribe within timeout") from None
        res = client._finish(self.corr, frame, keep_push=True)
        self.group = res["group"]
        self.topic = res["topic"]
        self.positions = {int(k): v for k, v in res["positions"].items()}

    @property
    def assignment(self) -> list[int]:
        return sorted(self.positions)

    def _on_push(self, frame: Optional[dict]) -> None:
        self._q.put(frame)

    def poll(self, max_records: int = 500, max_wait: float = 0.0) -> list[Record]:
        out: list[Record] = []
        deadline = time.monotonic() + max_wait
        while len(out) < max_records:
            try:
                if out:
                    frame = self._q.get_nowait()
                else:
                    frame = self._q.get(timeout=max(0.0, deadline - time.monotonic()))
            except queue.Empty:
                break
            if frame is None:
                self._closed = True
                if not out:
                    raise ConnectionClosedError("subscription connection closed")
                break
            r = record_from_json(frame["record"])
            self.positions[r.partition] = r.offset + 1
            out.append(r)
        return out

    def commit(self) -> dict[int, int]:
        res = self.client.request("commit", subscription=self.corr, offsets={str(p): o for p, o in self.positions.items()})
        return {int(k): v for k, v in res["committed"].items()}

    def close(self) -> None:
        if self._closed:
            return
        self._closed = True
        if not self.client.closed:
            try:
                self.client.request("terminate_query", target_corr=self.corr)
            except (ConnectionClosedError, RemoteError):
                pass
        with self.client._lock:
            self.client._push.pop(self.corr, None)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
