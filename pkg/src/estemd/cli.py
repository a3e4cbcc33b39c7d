"""``estemd`` command line: broker daemon, admin, produce/consume, connectors, seeder and shell.

Exit codes: 0 ok, 1 domain error, 2 environment error (bind, connect).
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import signal
import sys
import threading
import time
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Optional

from estemd import __version__
from estemd.broker import Broker
from estemd.connect import SinkConnector, SourceConnector, load_config
from estemd.connect.generator import RainParams, iter_rain, write_rain_file
from estemd.connect.parsers import parse_csv_line, parse_header, parse_jsonl_line
from estemd.eql import QueryEngine
from estemd.errors import ConnectionClosedError, EstemdError, RemoteError
from estemd.model import ProducerRecord, ScalarType, Schema, format_iso
from estemd.models import install_case_study
from estemd.wire import Client, WireServer, default_port

EXIT_OK = 0
EXIT_DOMAIN = 1
EXIT_ENV = 2

DEFAULT_BOOTSTRAP = "127.0.0.1:9021"
HISTORY_FILE = "~/.estemd_history"
PROMPT = "eql> "
CONTINUE = "  -> "

logger = logging.getLogger("estemd")


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_DOMAIN):
        super().__init__(message)
        self.code = code


# -- output helpers ------------------------------------------------------------


def emit_json(doc: Any, out=None) -> None:
    out = out or sys.stdout
    out.write(json.dumps(doc, sort_keys=True) + "\n")
    out.flush()


def render_table(headers: list[str], rows: list[list[Any]]) -> str:
    cells = [[str(h) for h in headers]] + [["" if c is None else str(c) for c in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(headers))]
    lines = [" | ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in cells]
    lines.insert(1, "-+-".join("-" * w for w in widths))
    return "\n".join(lines)


def format_cell(value: Any) -> str:
    """Display form used by the shell and ``consume``: floats to exactly two decimals."""
    if value is None:
        return "null"
    if value is True:
        return "true"
    if value is False:
        return "false"
    if isinstance(value, float):
        return f"{value:.2f}"
    return str(value)


def format_row(event_time: int, values: list, stream: str) -> str:
    """``YYYY-MM-DD | HH:MM:SS | <values> | <stream>`` with event time in UTC."""
    dt = datetime.fromtimestamp(event_time // 1000, tz=timezone.utc)
    parts = [dt.strftime("%Y-%m-%d"), dt.strftime("%H:%M:%S")]
    parts.extend(format_cell(v) for v in values)
    parts.append(stream)
    return " | ".join(parts)


def _client(args):
    try:
        return Client.from_bootstrap(args.bootstrap)
    except ConnectionClosedError as exc:
        raise CliError(f"broker unreachable at {args.bootstrap}: {exc.message}", EXIT_ENV) from None


# -- broker ------------------------------------------------------------------------


def cmd_broker(args) -> int:
    port = args.port if args.port is not None else default_port()
    data_dir = None if args.in_memory else Path(args.data_dir)
    try:
        server_probe = WireServer(None, None, args.host, port)
    except OSError as exc:
        raise CliError(f"cannot bind {args.host}:{port}: {exc.strerror or exc}", EXIT_ENV) from None
    try:
        broker = Broker(data_dir, fsync=not args.no_fsync)
    except OSError as exc:
        server_probe._tcp.server_close()
        raise CliError(f"cannot open data directory {data_dir}: {exc}", EXIT_ENV) from None
    engine = QueryEngine(broker)
    server_probe.broker = broker
    server_probe.engine = engine
    server = server_probe.start()
    stop = threading.Event()

    def on_signal(signum, frame):
        stop.set()

    signal.signal(signal.SIGINT, on_signal)
    signal.signal(signal.SIGTERM, on_signal)
    host, bound = server.address
    where = "in-memory" if data_dir is None else str(data_dir)
    print(f"estemd broker listening on {host}:{bound} ({where})", file=sys.stderr, flush=True)
    while not stop.wait(0.2):
        pass
    print("shutting down", file=sys.stderr, flush=True)
    server.shutdown()
    engine.close()
    broker.close()
    return EXIT_OK


# -- topics ------------------------------------------------------------------------


def cmd_topics(args) -> int:
    client = _client(args)
    try:
        if args.topics_cmd == "list":
            topics = client.list_topics(args.internal)
            if args.format == "json":
                emit_json({"topics": topics})
            else:
                print(render_table(["Topic"], [[t] for t in topics]))
        elif args.topics_cmd == "create":
            schema = None
            if args.schema:
                text = Path(args.schema).read_text() if os.path.exists(args.schema) else args.schema
                schema = Schema.from_json(json.loads(text))
            desc = client.create_topic(args.name, args.partitions, schema)
            if args.format == "json":
                emit_json(desc)
            else:
                print(f"Created topic {desc['name']} with {desc['partitions']} partition(s)")
        else:
            d = client.describe_topic(args.name)
            if args.format == "json":
                emit_json(d)
            else:
                print(
                    render_table(
                        ["Topic", "Partitions", "Replication", "In sync", "End offsets"],
                        [[d["name"], d["partitions"], d["replication_display"], f"{d['percent_in_sync']:g}%",
                          ",".join(map(str, d["end_offsets"]))]],
                    )
                )
                if d.get("schema"):
                    print(render_table(["Field", "Type", "Nullable"],
                                       [[f["name"], f["type"], f["nullable"]] for f in d["schema"]["fields"]]))
    finally:
        client.close()
    return EXIT_OK


# -- produce / consume ---------------------------------------------------------------


def _infer_cell(text: str):
    for conv in (int, float):
        try:
            return conv(text)
        except ValueError:
            pass
    return text


def read_input_records(lines, fmt: str, schema) -> list:
    """Turn stdin lines into producer records, typed by the topic schema when there is one."""
    lines = [ln.rstrip("\r\n") for ln in lines if ln.strip()]
    values = []
    if fmt == "csv":
        if not lines:
            return []
        if schema is not None:
            header = parse_header(lines[0], schema)
            values = [parse_csv_line(header, ln, schema) for ln in lines[1:]]
        else:
            header = next(csv.reader([lines[0]]))
            for row in csv.reader(lines[1:]):
                if len(row) != len(header):
                    raise CliError(f"expected {len(header)} cells, found {len(row)}")
                values.append({h: _infer_cell(c) for h, c in zip(header, row)})
    else:
        for ln in lines:
            if schema is not None:
                values.append(parse_jsonl_line(ln, schema))
            else:
                try:
                    doc = json.loads(ln)
                except json.JSONDecodeError as exc:
                    raise CliError(f"invalid JSON: {exc.msg} at byte {exc.pos}") from None
                if not isinstance(doc, dict):
                    raise CliError("each line must be a JSON object")
                values.append(doc)
    etf = schema.event_time_field if schema is not None else None
    return [ProducerRecord(v, None, int(v[etf]) if etf and v.get(etf) is not None else None) for v in values]


def cmd_produce(args) -> int:
    client = _client(args)
    try:
        schema = client.schema_of(args.topic)
        records = read_input_records(sys.stdin, args.input_format, schema)
        out = client.produce(args.topic, records) if records else []
        if args.format == "json":
            emit_json({"assignments": [{"partition": p, "offset": o} for p, o in out]})
        else:
            print(f"Produced {len(out)} record(s) to {args.topic}")
    finally:
        client.close()
    return EXIT_OK


def cmd_consume(args) -> int:
    client = _client(args)
    position: Any = args.from_
    if position not in ("earliest", "latest"):
        try:
            position = int(position)
        except ValueError:
            raise CliError("--from takes earliest, latest or an offset") from None
    schema = client.schema_of(args.topic)
    ts_fields = {f.name for f in schema.fields if f.type is ScalarType.TIMESTAMP} if schema else set()
    consumer = client.subscribe(args.group, args.topic, position)
    count = 0
    idle_since = time.monotonic()
    try:
        while args.max is None or count < args.max:
            want = 500 if args.max is None else args.max - count
            batch = consumer.poll(want, 0.2)
            if not batch:
                if args.timeout is not None and time.monotonic() - idle_since >= args.timeout:
                    break
                continue
            idle_since = time.monotonic()
            for r in batch:
                if args.format == "json":
                    emit_json(r.to_json())
                else:
                    values = [format_iso(v) if k in ts_fields and isinstance(v, int) else v for k, v in r.value.items()]
                    print(format_row(r.event_time, values, r.topic), flush=True)
            count += len(batch)
            if args.group:
                consumer.commit()
    except KeyboardInterrupt:
        pass
    finally:
        consumer.close()
        client.close()
    return EXIT_OK


# -- connect -----------------------------------------------------------------------


def cmd_connect(args) -> int:
    try:
        config = load_config(args.config)
    except (OSError, ValueError, KeyError) as exc:
        raise CliError(f"bad connector config {args.config}: {exc}") from None
    client = _client(args)
    sources = [SourceConnector(c, client) for c in config.sources]
    sinks = [SinkConnector(c, client) for c in config.sinks]
    tasks = sources + sinks
    try:
        if args.once:
            for s in sources:
                s.drain()
            # persistent queries may still be producing into the sinks' topics
            quiet_since = time.monotonic()
            while time.monotonic() - quiet_since < args.settle:
                if sum(s.drain() for s in sinks):
                    quiet_since = time.monotonic()
                else:
                    time.sleep(0.05)
        else:
            stop = threading.Event()
            signal.signal(signal.SIGINT, lambda *a: stop.set())
            signal.signal(signal.SIGTERM, lambda *a: stop.set())
            for t in tasks:
                t.start()
            print(f"running {len(sources)} source(s) and {len(sinks)} sink(s)", file=sys.stderr, flush=True)
            while not stop.wait(0.5):
                if all(t.state == "failed" for t in tasks) and tasks:
                    break
            for t in tasks:
                t.stop()
        status = [t.status() for t in tasks]
    finally:
        for t in sinks:
            t.close()
        client.close()
    if args.format == "json":
        emit_json({"connectors": status})
    else:
        print(render_table(["Connector", "Kind", "State", "Records", "Dead-lettered"],
                           [[s["name"], s["kind"], s["state"], s.get("produced", s.get("written")), s["dead_lettered"]]
                            for s in status]))
    return EXIT_DOMAIN if any(s["state"] == "failed" for s in status) else EXIT_OK


# -- seed --------------------------------------------------------------------------


def cmd_seed(args) -> int:
    try:
        params = RainParams(
            start_time=args.start,
            interval_s=args.interval_s,
            count=args.count,
            mode="seeded_random" if args.mode == "random" else "constant",
            value=args.value,
            seed=args.seed,
            min=args.min,
            max=args.max,
        )
    except ValueError as exc:
        raise CliError(str(exc)) from None
    try:
        n = write_rain_file(args.out, iter_rain(params))
    except ValueError as exc:
        raise CliError(str(exc)) from None
    except OSError as exc:
        raise CliError(f"cannot write {args.out}: {exc.strerror or exc}") from None
    if args.format == "json":
        emit_json({"path": args.out, "records": n})
    else:
        print(f"Wrote {n} record(s) to {args.out}")
    return EXIT_OK


# -- install -----------------------------------------------------------------------


def cmd_install(args) -> int:
    client = _client(args)
    try:
        report = install_case_study(
            client,
            full=args.full,
            window_ms=args.window_minutes * 60_000,
            clamp=args.clamp,
            drought_topics=args.drought_topics,
        )
    finally:
        client.close()
    if args.format == "json":
        emit_json(report.to_json())
    else:
        print(f"Created topics: {', '.join(report.created_topics) or '(none)'}")
        print(f"Created streams: {', '.join(report.created_streams) or '(none)'}")
        print(f"Started queries: {', '.join(report.query_ids) or '(none)'}")
        if report.existing:
            print(f"Already present: {', '.join(report.existing)}")
    return EXIT_OK


# -- shell -------------------------------------------------------------------------


def take_statements(buffer: str) -> tuple[list[str], str]:
    """Cut complete ``;``-terminated statements off the front of ``buffer``.

    Quotes and ``--`` comments are respected so a ``;`` inside them does not end
    a statement.
    """
    out = []
    start = 0
    i = 0
    n = len(buffer)
    in_quote = False
    while i < n:
        ch = buffer[i]
        if in_quote:
            if ch == "'":
                if i + 1 < n and buffer[i + 1] == "'":
                    i += 1
                else:
                    in_quote = False
        elif ch == "'":
            in_quote = True
        elif ch == "-" and buffer.startswith("--", i):
            j = buffer.find("\n", i)
            if j < 0:
                break
            i = j
        elif ch == ";":
            out.append(buffer[start : i + 1].strip())
            start = i + 1
        i += 1
    return out, buffer[start:]


class Shell:
    """Interactive EQL session over the wire ``query`` op."""

    def __init__(self, client, fmt: str = "table", out=None, history: Optional[str] = HISTORY_FILE):
        self.client = client
        self.fmt = fmt
        self.out = out or sys.stdout
        self.history = os.path.expanduser(history) if history else None
        self._cancel: Optional[threading.Event] = None
        self.errors = 0

    def write(self, line: str = "") -> None:
        self.out.write(line + "\n")
        self.out.flush()

    def on_row(self, frame: dict) -> None:
        if self.fmt == "json":
            emit_json({"event": "row", "stream": frame["stream"], "event_time": frame["event_time"], "row": frame["row"]}, self.out)
        else:
            self.write(format_row(frame["event_time"], list(frame["row"].values()), frame["stream"]))

    def execute(self, sql: str) -> bool:
        """Run one statement. Returns False when the session should end."""
        if sql.rstrip(";").strip().lower() in ("exit", "quit"):
            return False
        cancel = threading.Event()
        self._cancel = cancel
        prev = None
        if threading.current_thread() is threading.main_thread():
            prev = signal.signal(signal.SIGINT, lambda *a: cancel.set())
        try:
            result = self.client.query(sql, on_row=self.on_row, cancel=cancel)
        except RemoteError as exc:
            self.errors += 1
            if self.fmt == "json":
                emit_json({"error": {"code": exc.code, "msg": exc.message}}, self.out)
            else:
                self.write(f"Error: {exc.message}")
            return True
        finally:
            self._cancel = None
            if prev is not None:
                signal.signal(signal.SIGINT, prev)
        self.render(result)
        return True

    def render(self, result: dict) -> None:
        if self.fmt == "json":
            emit_json(result, self.out)
            return
        kind = result.get("kind")
        if kind == "select":
            if result["outcome"] == "limit":
                self.write("Limit Reached")
            self.write("Query terminated")
        elif kind == "topics":
            self.write(render_table(["Topic"], [[t] for t in result["topics"]]))
        elif kind == "streams":
            self.write(render_table(["Stream", "Topic", "Format"], [[s["name"], s["topic"], s["format"]] for s in result["streams"]]))
        elif kind == "queries":
            self.write(render_table(["Query", "State", "Output", "Statement"],
                                    [[q["id"], q["state"], q["output"], q["statement"]] for q in result["queries"]]))
        elif kind == "stream_created":
            msg = f"Stream {result['stream']} created"
            if result.get("query_id"):
                msg += f"; persistent query {result['query_id']} writing to {result['topic']}"
            self.write(msg)
        elif kind == "terminated":
            self.write(f"Query {result['query_id']} terminated")
        else:
            self.write(json.dumps(result))

    def _setup_history(self):
        if not self.history:
            return None
        try:
            import readline
        except ImportError:
            return None
        try:
            readline.read_history_file(self.history)
        except OSError:
            pass
        return readline

    def run(self, stream=None) -> int:
        """Read statements from ``stream`` (default: interactive prompt) until ``exit;`` or EOF."""
        interactive = stream is None and sys.stdin.isatty()
        rl = self._setup_history() if interactive else None
        buffer = ""
        try:
            while True:
                prompt = PROMPT if not buffer.strip() else CONTINUE
                try:
                    if stream is not None:
                        line = stream.readline()
                        if not line:
                            break
                    else:
                        if interactive:
                            line = input(prompt)
                        else:
                            # piped input: no prompt, so output stays line-exact
                            line = sys.stdin.readline()
                            if not line:
                                break
                except EOFError:
                    break
                except KeyboardInterrupt:
                    self.write()
                    buffer = ""
                    continue
                buffer += line if line.endswith("\n") else line + "\n"
                statements, buffer = take_statements(buffer)
                for sql in statements:
                    if not self.execute(sql):
                        return EXIT_OK
        finally:
            if rl is not None:
                try:
                    rl.write_history_file(self.history)
                except OSError:
                    pass
        return EXIT_OK


def cmd_shell(args) -> int:
    client = _client(args)
    try:
        if args.execute:
            shell = Shell(client, args.format, history=None)
            for sql in take_statements(args.execute if args.execute.rstrip().endswith(";") else args.execute + ";")[0]:
                shell.execute(sql)
            return EXIT_DOMAIN if shell.errors else EXIT_OK
        return Shell(client, args.format).run()
    except ConnectionClosedError as exc:
        raise CliError(f"lost connection to broker: {exc.message}", EXIT_ENV) from None
    finally:
        client.close()


# -- argument parsing ----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--bootstrap", default=argparse.SUPPRESS, help="broker address host:port")
    common.add_argument("--format", choices=("table", "json"), default=argparse.SUPPRESS, help="output format")
    # produce reuses --format for its input, so it only takes --bootstrap after the subcommand
    boot_only = argparse.ArgumentParser(add_help=False)
    boot_only.add_argument("--bootstrap", default=argparse.SUPPRESS, help="broker address host:port")

    p = argparse.ArgumentParser(prog="estemd", description="Environmental stream processing broker and tools.")
    p.add_argument("--version", action="version", version=f"estemd {__version__}")
    p.add_argument("--bootstrap", default=os.environ.get("ESTEMD_BOOTSTRAP", DEFAULT_BOOTSTRAP),
                   help="broker address host:port (env ESTEMD_BOOTSTRAP)")
    p.add_argument("--format", choices=("table", "json"), default="table", help="output format")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    b = sub.add_parser("broker", parents=[common], help="run the broker, query engine and wire server")
    b.add_argument("--host", default="0.0.0.0")
    b.add_argument("--port", type=int, default=None, help="listen port (default 9021, env ESTEMD_PORT)")
    b.add_argument("--data-dir", default="estemd-data")
    b.add_argument("--in-memory", action="store_true", help="keep nothing on disk")
    b.add_argument("--no-fsync", action="store_true", help="skip fsync on append (faster, less durable)")
    b.set_defaults(func=cmd_broker)

    t = sub.add_parser("topics", parents=[common], help="list, create or describe topics")
    tsub = t.add_subparsers(dest="topics_cmd", required=True, metavar="ACTION")
    tl = tsub.add_parser("list", parents=[common], help="list topics")
    tl.add_argument("--internal", action="store_true", help="include internal topics")
    tc = tsub.add_parser("create", parents=[common], help="create a topic")
    tc.add_argument("name")
    tc.add_argument("--partitions", type=int, default=1)
    tc.add_argument("--schema", help="schema JSON or a path to it")
    td = tsub.add_parser("describe", parents=[common], help="describe a topic")
    td.add_argument("name")
    t.set_defaults(func=cmd_topics)

    pr = sub.add_parser("produce", parents=[boot_only], help="produce stdin lines to a topic")
    pr.add_argument("topic")
    pr.add_argument("--format", dest="input_format", choices=("jsonl", "csv"), default="jsonl",
                    help="input line format")
    pr.set_defaults(func=cmd_produce)

    c = sub.add_parser("consume", parents=[common], help="print records from a topic")
    c.add_argument("topic")
    c.add_argument("--from", dest="from_", default="earliest", help="earliest, latest or an offset")
    c.add_argument("--max", type=int, default=None, help="stop after this many records")
    c.add_argument("--group", default=None, help="consumer group (commits progress)")
    c.add_argument("--timeout", type=float, default=None, help="stop after this many idle seconds")
    c.set_defaults(func=cmd_consume)

    cn = sub.add_parser("connect", parents=[common], help="run connectors from a JSON config")
    cn.add_argument("config")
    cn.add_argument("--once", action="store_true", help="drain available input and exit")
    cn.add_argument("--settle", type=float, default=1.0, help="with --once, idle seconds before sinks stop")
    cn.set_defaults(func=cmd_connect)

    sh = sub.add_parser("shell", parents=[common], help="interactive EQL shell")
    sh.add_argument("-e", "--execute", help="run the given statements and exit")
    sh.set_defaults(func=cmd_shell)

    sd = sub.add_parser("seed", parents=[common], help="write synthetic datasets")
    sdsub = sd.add_subparsers(dest="dataset", required=True, metavar="DATASET")
    rain = sdsub.add_parser("rain", parents=[common], help="rain gauge readings (TIMESTAMP, RAIN_MM)")
    rain.add_argument("--mode", choices=("constant", "random"), default="constant")
    rain.add_argument("--value", type=float, default=287.4)
    rain.add_argument("--seed", type=int, default=42)
    rain.add_argument("--min", type=float, default=0.0)
    rain.add_argument("--max", type=float, default=50.0)
    rain.add_argument("--start", default="2020-04-01T00:00:00Z")
    rain.add_argument("--interval-s", type=int, default=300)
    rain.add_argument("--count", type=int, default=8640)
    rain.add_argument("--out", required=True, help="output file ending in .csv or .jsonl")
    sd.set_defaults(func=cmd_seed)

    ins = sub.add_parser("install", parents=[common], help="install the case-study topics and queries")
    size = ins.add_mutually_exclusive_group()
    size.add_argument("--minimal", dest="full", action="store_false", help="RAIN and EP only (default)")
    size.add_argument("--full", dest="full", action="store_true", help="also the Avg_* models")
    ins.add_argument("--window-minutes", type=int, default=5)
    ins.add_argument("--clamp", action="store_true", help="clamp EP at zero")
    ins.add_argument("--drought-topics", action="store_true", help="also create DEP and EDI topics")
    ins.set_defaults(func=cmd_install, full=False)
    return p


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    json_out = args.format == "json"
    try:
        return args.func(args)
    except CliError as exc:
        code, msg, ecode = exc.code, str(exc), "environment" if exc.code == EXIT_ENV else "error"
    except RemoteError as exc:
        code, msg, ecode = EXIT_DOMAIN, exc.message, exc.code
    except EstemdError as exc:
        code, msg, ecode = exc.exit_code, exc.message, exc.code
    except OSError as exc:
        code, msg, ecode = EXIT_ENV, str(exc), "environment"
    except KeyboardInterrupt:
        return 130
    if json_out:
        emit_json({"error": {"code": ecode, "msg": msg}})
    print(f"error: {msg}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
