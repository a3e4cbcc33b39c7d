import threading

import pytest
from hypothesis import given, settings, strategies as st

from estemd.engine import Aggregation, Chain, Filter, Map, Negation, Projection, WindowSpec
from estemd.errors import EqlSyntaxError, SemanticError, UnknownQueryError
from estemd.eql import StreamInfo, analyze, format_statement, parse, parse_script, plan, split_statements, tokenize
from estemd.eql import ast
from estemd.expr import Binary, col, eval_expr, lit
from estemd.model import ProducerRecord, Record, ScalarType, Schema

from eql_corpus import CORPUS

RAIN_SCHEMA = Schema.of(("TIMESTAMP", ScalarType.TIMESTAMP, False), ("RAIN_MM", ScalarType.FLOAT, False), event_time_field="TIMESTAMP")
CATALOG = {
    "RAIN": StreamInfo("RAIN", "RAIN", RAIN_SCHEMA),
    "EP": StreamInfo("EP", "EP", Schema.of(("VALUE", ScalarType.FLOAT)), derived=True),
    "T": StreamInfo("T", "T", Schema.of(("TS", ScalarType.TIMESTAMP), ("STATION", ScalarType.TEXT), ("TEMP", ScalarType.FLOAT))),
}


def kinds(text):
    return [(t.kind, t.text) for t in tokenize(text) if t.kind != "eof"]


# -- lexer ------------------------------------------------------------------


def test_tokenize_select():
    assert kinds("SELECT Value FROM EP;") == [
        ("keyword", "SELECT"),
        ("identifier", "VALUE"),
        ("keyword", "FROM"),
        ("identifier", "EP"),
        ("punctuation", ";"),
    ]


def test_comment_skipped():
    assert kinds("-- note\nSELECT 1;") == [("keyword", "SELECT"), ("integer", "1"), ("punctuation", ";")]


def test_unterminated_literal():
    with pytest.raises(EqlSyntaxError) as err:
        tokenize("'abc")
    assert err.value.position == 0


def test_illegal_character_position():
    with pytest.raises(EqlSyntaxError) as err:
        tokenize("SELECT #")
    assert err.value.position == 7


def test_quote_escape():
    [tok] = [t for t in tokenize("'it''s'") if t.kind == "text"]
    assert tok.text == "it's"


def test_spans_are_byte_offsets():
    toks = tokenize("SELECT 'é' FROM X;")
    assert [(t.start, t.end) for t in toks[:3]] == [(0, 6), (7, 11), (12, 16)]


def test_spans_do_not_overlap():
    toks = tokenize(CORPUS[28])
    for a, b in zip(toks, toks[1:]):
        assert a.end <= b.start


# -- parser -----------------------------------------------------------------


def test_parse_select():
    s = parse("SELECT Value FROM EP;")
    assert isinstance(s, ast.Select)
    assert s.source == "EP"
    [item] = s.items
    assert item.expr == col("VALUE") and item.alias is None


def test_parse_ep_create():
    s = parse("CREATE STREAM EP AS SELECT (RAIN_MM - 5) * 0.75 AS VALUE FROM RAIN EMIT CHANGES;")
    assert s.name == "EP"
    [item] = s.query.items
    assert item.alias == "VALUE"
    assert item.expr == Binary("*", Binary("-", col("RAIN_MM"), lit(5)), lit(0.75))
    assert s.query.emit == "CHANGES"


def test_syntax_error_message():
    with pytest.raises(EqlSyntaxError) as err:
        parse("SELECT FROM;")
    assert "expected expression, found FROM" in str(err.value)
    assert err.value.position == 7


def test_precedence():
    e = parse("SELECT 1 + 2 * 3 AS V FROM S;").items[0].expr
    assert eval_expr(e, {}) == 7
    e = parse("SELECT NOT 1 = 2 AND FALSE OR TRUE AS V FROM S;").items[0].expr
    assert e.op == "OR"


def test_window_parse():
    w = parse("SELECT COUNT(*) FROM S WINDOW HOPPING (SIZE 10 MINUTES, ADVANCE BY 5 MINUTES);").window
    assert w == WindowSpec.hopping(600_000, 300_000)


def test_missing_semicolon():
    with pytest.raises(EqlSyntaxError):
        parse("SELECT 1 FROM S")


def test_split_statements_respects_quotes():
    parts = split_statements("SELECT ';' AS X FROM S; SHOW TOPICS;")
    assert len(parts) == 2
    assert len(parse_script("SHOW TOPICS; SHOW STREAMS;")) == 2


@pytest.mark.parametrize("text", CORPUS)
def test_round_trip(text):
    first = parse(text)
    assert parse(format_statement(first)) == first


def test_corpus_size():
    assert len(CORPUS) == 50


@settings(max_examples=300)
@given(st.binary(max_size=80))
def test_parser_total_on_bytes(data):
    try:
        parse(data.decode("utf-8", "surrogateescape"))
    except EqlSyntaxError:
        pass


@settings(max_examples=300)
@given(st.sampled_from(CORPUS), st.lists(st.tuples(st.integers(0, 200), st.sampled_from(list("();,'-*=<>! \nSELCTFROMWHE0123._")))))
def test_parser_total_on_mutations(text, edits):
    s = list(text)
    for pos, ch in edits:
        s.insert(min(pos, len(s)), ch)
    try:
        parse("".join(s))
    except EqlSyntaxError:
        pass


def test_deep_nesting_is_a_syntax_error():
    with pytest.raises(EqlSyntaxError):
        parse("SELECT " + "(" * 3000 + "1" + ")" * 3000 + " FROM S;")


# -- analyzer ---------------------------------------------------------------


def test_analyze_simple_select():
    a = analyze(parse("SELECT VALUE FROM EP;"), CATALOG)
    assert a.output == Schema.of(("VALUE", ScalarType.FLOAT))


def test_unknown_column():
    with pytest.raises(SemanticError, match="BOGUS"):
        analyze(parse("SELECT BOGUS FROM EP;"), CATALOG)


def test_unknown_stream():
    with pytest.raises(SemanticError, match="unknown stream"):
        analyze(parse("SELECT X FROM NOPE;"), CATALOG)


def test_aggregate_needs_window():
    with pytest.raises(SemanticError, match="WINDOW"):
        analyze(parse("SELECT AVG(TEMP) FROM T;"), CATALOG)


def test_bare_column_must_be_grouped():
    with pytest.raises(SemanticError):
        analyze(parse("SELECT STATION, AVG(TEMP) FROM T WINDOW TUMBLING (SIZE 1 MINUTES);"), CATALOG)
    analyze(parse("SELECT STATION, AVG(TEMP) FROM T WINDOW TUMBLING (SIZE 1 MINUTES) GROUP BY STATION;"), CATALOG)


def test_type_mismatch():
    with pytest.raises(SemanticError):
        analyze(parse("SELECT STATION + 1 AS X FROM T;"), CATALOG)
    with pytest.raises(SemanticError):
        analyze(parse("SELECT TEMP FROM T WHERE TEMP;"), CATALOG)


def test_absence_needs_window_and_where():
    with pytest.raises(SemanticError):
        analyze(parse("SELECT * FROM RAIN WHERE RAIN_MM > 0 EMIT ABSENCE;"), CATALOG)
    with pytest.raises(SemanticError):
        analyze(parse("SELECT * FROM RAIN WINDOW TUMBLING (SIZE 1 HOURS) EMIT ABSENCE;"), CATALOG)


def test_limit_only_interactive():
    with pytest.raises(SemanticError, match="LIMIT"):
        analyze(parse("CREATE STREAM X AS SELECT * FROM RAIN LIMIT 5;"), CATALOG)


def test_star_expands():
    a = analyze(parse("SELECT * FROM RAIN;"), CATALOG)
    assert a.output.names == ["TIMESTAMP", "RAIN_MM"]


# -- planner ----------------------------------------------------------------


def test_plan_ep():
    a = analyze(parse("CREATE STREAM EP2 AS SELECT (RAIN_MM - 5) * 0.75 AS VALUE FROM RAIN EMIT CHANGES;"), CATALOG)
    topo = plan(a.query, "EP2_Q_0001", "EP2")
    assert topo.source == "RAIN"
    m, p = topo.nodes
    assert isinstance(m, Map) and m.assignments[0][0] == "VALUE"
    assert isinstance(p, Projection) and p.fields == ("VALUE",)
    [out] = Chain(topo).process(Record("RAIN", 0, 0, 0, None, {"TIMESTAMP": 0, "RAIN_MM": 287.4}))
    assert out.value["VALUE"] == (287.4 - 5) * 0.75


def test_plan_aggregate():
    a = analyze(parse("SELECT AVG(TEMP) AS A FROM T WINDOW TUMBLING (SIZE 5 MINUTES);"), CATALOG)
    nodes = plan(a).nodes
    agg = next(n for n in nodes if isinstance(n, Aggregation))
    assert agg.window == WindowSpec.tumbling(300_000)
    assert agg.functions[0].function == "AVG" and agg.functions[0].alias == "A"


def test_plan_identity():
    assert plan(analyze(parse("SELECT * FROM S;"), {"S": CATALOG["RAIN"]})).nodes == ()


def test_plan_order_filter_first():
    a = analyze(parse("SELECT RAIN_MM * 2 AS D FROM RAIN WHERE RAIN_MM > 1;"), CATALOG)
    assert [type(n) for n in plan(a).nodes] == [Filter, Map, Projection]


def test_plan_absence():
    a = analyze(parse("SELECT * FROM RAIN WHERE RAIN_MM > 0 WINDOW TUMBLING (SIZE 1 HOURS) EMIT ABSENCE;"), CATALOG)
    assert [type(n) for n in plan(a).nodes] == [Negation]


def test_case_insensitive_plans():
    a = plan(analyze(parse("SELECT (RAIN_MM - 5) * 0.75 AS Value FROM Rain WHERE rain_mm > 0;"), CATALOG))
    b = plan(analyze(parse("select (rain_mm - 5) * 0.75 as VALUE from RAIN where RAIN_MM > 0;"), CATALOG))
    assert a == b


_exprs = st.sampled_from(["RAIN_MM", "(RAIN_MM - 5) * 0.75", "RAIN_MM / 3", "-RAIN_MM + 1", "GREATEST(RAIN_MM, 0)"])


@given(st.lists(_exprs, min_size=1, max_size=3), st.sampled_from(["", " WHERE RAIN_MM > 10", " WHERE NOT RAIN_MM < 0"]), st.floats(-1e6, 1e6))
def test_plan_soundness(exprs, where, rain):
    items = ", ".join(f"{e} AS C{i}" for i, e in enumerate(exprs))
    stmt = parse(f"SELECT {items} FROM RAIN{where};")
    analyzed = analyze(stmt, CATALOG)
    value = {"TIMESTAMP": 0, "RAIN_MM": rain}
    outs = Chain(plan(analyzed)).process(Record("RAIN", 0, 0, 0, None, value))
    keep = stmt.where is None or eval_expr(stmt.where, value) is True
    if not keep:
        assert outs == []
        return
    [out] = outs
    assert out.value == {f"C{i}": eval_expr(item.expr, value) for i, item in enumerate(stmt.items)}


# -- execution --------------------------------------------------------------


def seed_ep(engine, broker, n=5, rain=287.4):
    engine.execute(parse(CORPUS[36]))
    engine.execute("CREATE STREAM EP AS SELECT (RAIN_MM - 5) * 0.75 AS VALUE FROM RAIN EMIT CHANGES;")
    broker.produce("RAIN", [ProducerRecord({"TIMESTAMP": i * 300_000, "RAIN_MM": rain}, None, i * 300_000) for i in range(n)])


def wait_end(broker, topic, n, timeout=5.0):
    import time

    deadline = time.time() + timeout
    while broker.end_offset(topic, 0) < n and time.time() < deadline:
        time.sleep(0.01)
    return broker.end_offset(topic, 0)


def test_execute_limit(engine, broker):
    seed_ep(engine, broker, n=8)
    assert wait_end(broker, "EP", 8) == 8
    rows = []
    result = engine.execute("SELECT VALUE FROM EP LIMIT 5;", on_row=rows.append)
    assert result.data["outcome"] == "limit"
    assert len(rows) == 5
    assert all(abs(r.value["VALUE"] - 211.8) <= 1e-9 for r in rows)


def test_execute_cancel(engine, broker):
    seed_ep(engine, broker, n=2)
    cancel = threading.Event()
    threading.Timer(0.2, cancel.set).start()
    rows = []
    result = engine.execute("SELECT VALUE FROM EP;", on_row=rows.append, cancel=cancel)
    assert result.data["outcome"] == "terminated"
    assert len(rows) == 2


def test_show_and_terminate(engine, broker):
    seed_ep(engine, broker)
    [q] = engine.execute("SHOW QUERIES;").data["queries"]
    assert q["id"] == "Q_0001" and q["state"] == "running"
    assert q["topology"] == "EP_Q_0001"
    assert engine.execute("SHOW TOPICS;").data["topics"] == ["EP", "RAIN"]
    assert {s["name"] for s in engine.execute("SHOW STREAMS;").data["streams"]} == {"RAIN", "EP"}
    engine.execute("TERMINATE q_0001;")
    assert engine.list_queries()[0].state == "terminated"
    with pytest.raises(UnknownQueryError):
        engine.execute("TERMINATE Q_9999;")


def test_persistent_query_group(engine, broker):
    seed_ep(engine, broker)
    wait_end(broker, "EP", 5)
    import time

    deadline = time.time() + 3
    while broker.committed("query-EP_Q_0001", "RAIN", 0) != 5 and time.time() < deadline:
        time.sleep(0.01)
    assert broker.committed("query-EP_Q_0001", "RAIN", 0) == 5


def test_queries_survive_restart(tmp_path):
    from estemd.broker import Broker
    from estemd.eql import QueryEngine

    b = Broker(tmp_path)
    e = QueryEngine(b)
    seed_ep(e, b, n=3)
    wait_end(b, "EP", 3)
    e.execute("CREATE STREAM WET AS SELECT * FROM RAIN WHERE RAIN_MM > 0;")
    e.execute("TERMINATE Q_0002;")
    e.close()
    b.close()
    b2 = Broker(tmp_path)
    e2 = QueryEngine(b2)
    try:
        states = {q.id: q.state for q in e2.list_queries()}
        assert states == {"Q_0001": "running", "Q_0002": "terminated"}
        assert set(e2.stream_names()) == {"RAIN", "EP", "WET"}
        b2.produce("RAIN", [{"TIMESTAMP": 10**6, "RAIN_MM": 5.0}])
        assert wait_end(b2, "EP", 4) == 4
        # restarted query resumed from its commit instead of replaying everything
        assert b2.fetch("EP", 0, 3, 10)[0].value["VALUE"] == 0.0
        r = e2.execute("CREATE STREAM W2 AS SELECT * FROM RAIN;")
        assert r.data["query_id"] == "Q_0003"
    finally:
        e2.close()
        b2.close()


def test_interactive_aggregate(engine, broker):
    engine.execute("CREATE STREAM S (TS TIMESTAMP NOT NULL, X DOUBLE) WITH (topic='S', timestamp='TS');")
    broker.produce("S", [ProducerRecord({"TS": t, "X": float(t)}, None, t) for t in (0, 500, 1000, 2500)])
    rows = []
    result = engine.execute("SELECT AVG(X) AS A, COUNT(*) AS N FROM S WINDOW TUMBLING (SIZE 1 SECONDS) LIMIT 2;", on_row=rows.append)
    assert result.data["outcome"] == "limit"
    assert [(r.value["A"], r.value["N"]) for r in rows] == [(250.0, 2), (1000.0, 1)]
    assert result.data["columns"] == ["WINDOW_START", "WINDOW_END", "A", "N"]


def test_conflicting_schema_rejected(engine, broker):
    engine.execute(CORPUS[36])
    with pytest.raises(SemanticError):
        engine.execute("CREATE STREAM RAIN2 (A BIGINT) WITH (topic='RAIN');")
