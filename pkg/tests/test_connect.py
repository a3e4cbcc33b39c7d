import csv
import io
import json
import time

import pytest
from hypothesis import given, strategies as st

from estemd.connect import (
    RAIN_SCHEMA,
    Lcg,
    RainParams,
    SinkConfig,
    SinkConnector,
    SourceConfig,
    SourceConnector,
    TransformSpec,
    apply_transforms,
    generate_rain,
    load_config,
    parse_csv_line,
    parse_header,
    parse_jsonl_line,
    run_source,
    truncate_torn_tail,
    write_rain_file,
)
from estemd.connect.transforms import cast_value
from estemd.errors import RecordParseError, TransformError, ValidationError
from estemd.model import ProducerRecord, ScalarType, Schema, Timestamp, parse_timestamp

HEADER = ["TIMESTAMP", "RAIN_MM"]
T0 = 1585847107000  # 2020-04-02T17:05:07Z


def iso_ms(text):
    # independent converter: calendar arithmetic without datetime
    date, clock = text.rstrip("Z").split("T")
    y, m, d = map(int, date.split("-"))
    hh, mm, ss = map(int, clock.split(":"))
    days_before = [0, 31, 59, 90, 120, 151, 181, 212, 243, 273, 304, 334]
    leap = y % 4 == 0 and (y % 100 != 0 or y % 400 == 0)
    days = sum(366 if (yy % 4 == 0 and (yy % 100 != 0 or yy % 400 == 0)) else 365 for yy in range(1970, y))
    days += days_before[m - 1] + (1 if leap and m > 2 else 0) + d - 1
    return ((days * 24 + hh) * 60 + mm) * 60_000 + ss * 1000


# -- parsers ----------------------------------------------------------------


def test_csv_line():
    assert iso_ms("2020-04-02T17:05:07Z") == T0
    got = parse_csv_line(HEADER, "2020-04-02T17:05:07Z,287.4", RAIN_SCHEMA)
    assert got == {"TIMESTAMP": T0, "RAIN_MM": 287.4}
    assert isinstance(got["TIMESTAMP"], Timestamp)


def test_csv_quoted_numeric():
    assert parse_csv_line(HEADER, '2020-04-02T17:05:07Z,"287.4"', RAIN_SCHEMA) == {"TIMESTAMP": T0, "RAIN_MM": 287.4}


def test_csv_integer_ms_timestamp():
    assert parse_csv_line(HEADER, f"{T0},287.4", RAIN_SCHEMA)["TIMESTAMP"] == T0


def test_csv_coercion_failure_names_field():
    with pytest.raises(RecordParseError, match="RAIN_MM"):
        parse_csv_line(HEADER, "2020-04-02T17:05:07Z,abc", RAIN_SCHEMA)


def test_csv_arity_mismatch():
    with pytest.raises(RecordParseError):
        parse_csv_line(HEADER, "2020-04-02T17:05:07Z,1,2", RAIN_SCHEMA)


def test_csv_header_order_and_case_insensitive():
    header = parse_header("Rain_mm,timestamp\n", RAIN_SCHEMA)
    assert parse_csv_line(header, "287.4,2020-04-02T17:05:07Z", RAIN_SCHEMA) == {"TIMESTAMP": T0, "RAIN_MM": 287.4}
    with pytest.raises(RecordParseError):
        parse_header("timestamp,snow\n", RAIN_SCHEMA)


def test_jsonl_line_matches_csv():
    j = parse_jsonl_line('{"timestamp":"2020-04-02T17:05:07Z","rain_mm":287.4}', RAIN_SCHEMA)
    c = parse_csv_line(HEADER, "2020-04-02T17:05:07Z,287.4", RAIN_SCHEMA)
    assert j == c


def test_jsonl_int_widens():
    assert parse_jsonl_line(f'{{"timestamp":{T0},"rain_mm":287}}', RAIN_SCHEMA)["RAIN_MM"] == 287.0


def test_jsonl_missing_field():
    with pytest.raises(ValidationError):
        parse_jsonl_line('{"rain_mm":287.4}', RAIN_SCHEMA)


def test_jsonl_unknown_member():
    with pytest.raises(ValidationError):
        parse_jsonl_line(f'{{"timestamp":{T0},"rain_mm":1.0,"x":1}}', RAIN_SCHEMA)


def test_jsonl_broken():
    with pytest.raises(RecordParseError, match="byte 1"):
        parse_jsonl_line("{broken", RAIN_SCHEMA)


# -- transforms -------------------------------------------------------------


def pr(value):
    return ProducerRecord(value, None, 0)


def test_rename():
    out = apply_transforms([TransformSpec.rename("RAIN", "rain_mm")], pr({"RAIN": 5.0}))
    assert out.value == {"RAIN_MM": 5.0}


def test_lossy_cast_rejected():
    with pytest.raises(TransformError) as err:
        apply_transforms([TransformSpec.cast("rain_mm", "BIGINT")], pr({"RAIN_MM": 287.4}))
    assert err.value.index == 0


def test_integral_cast_allowed():
    assert cast_value(287.0, ScalarType.INT) == 287
    assert cast_value("12", ScalarType.INT) == 12


def test_empty_chain_is_identity():
    r = pr({"A": 1})
    assert apply_transforms([], r) == r


def test_missing_field_names_index():
    chain = [TransformSpec.rename("A", "B"), TransformSpec("drop", "NOPE")]
    with pytest.raises(TransformError) as err:
        apply_transforms(chain, pr({"A": 1}))
    assert err.value.index == 1


def test_set_key_drop_wallclock():
    chain = [
        TransformSpec("set_key", "STATION"),
        TransformSpec("drop", "JUNK"),
        TransformSpec("insert_wallclock", "SEEN"),
    ]
    out = apply_transforms(chain, pr({"STATION": "bfn", "JUNK": 1}))
    assert out.key == "bfn"
    assert "JUNK" not in out.value
    assert abs(out.value["SEEN"] - time.time() * 1000) < 5000


def test_transform_json_round_trip():
    for t in [TransformSpec.rename("A", "B"), TransformSpec.cast("A", "DOUBLE"), TransformSpec("drop", "X")]:
        assert TransformSpec.from_json(t.to_json()) == t


_chains = st.lists(
    st.sampled_from([TransformSpec.rename("A", "B"), TransformSpec.cast("C", "DOUBLE"), TransformSpec("set_key", "D")]),
    unique=True,
)


@given(_chains, st.data())
def test_identity_transforms_change_nothing(chain, data):
    identity = TransformSpec.rename("E", "E")
    positions = data.draw(st.lists(st.integers(0, len(chain)), max_size=3))
    padded = list(chain)
    for p in sorted(positions, reverse=True):
        padded.insert(p, identity)
    r = pr({"A": 1, "C": 2, "D": "k", "E": True})
    assert apply_transforms(padded, r) == apply_transforms(chain, r)


# -- generator --------------------------------------------------------------


def test_constant_readings():
    rows = generate_rain(start_time=0, count=3, interval_s=300, value=287.4)
    assert [r["TIMESTAMP"] for r in rows] == [0, 300_000, 600_000]
    assert [r["RAIN_MM"] for r in rows] == [287.4] * 3


def test_count_zero():
    assert generate_rain(start_time=0, count=0) == []


def test_seeded_random_deterministic_and_bounded():
    p = RainParams(0, count=500, mode="seeded_random", seed=42, min=2.0, max=9.0)
    a, b = generate_rain(p), generate_rain(p)
    assert a == b
    assert all(2.0 <= r["RAIN_MM"] <= 9.0 for r in a)
    assert generate_rain(RainParams(0, count=5, mode="seeded_random", seed=43)) != a[:5]


def test_lcg_reference():
    # first draw by hand: state advances once, then the top 53 bits scale to [0, 1)
    state = (6364136223846793005 * 42 + 1442695040888963407) % 2**64
    assert Lcg(42).next_unit() == (state >> 11) / 2**53


def test_april_has_8640_readings():
    start = parse_timestamp("2020-04-01T00:00:00Z")
    rows = generate_rain(start_time=start, count=30 * 86400 // 300)
    assert len(rows) == 8640 == 30 * 288
    assert rows[-1]["TIMESTAMP"] == parse_timestamp("2020-04-30T23:55:00Z")


def test_seed_files(tmp_path):
    rows = generate_rain(start_time=T0, count=2)
    write_rain_file(tmp_path / "r.csv", rows)
    write_rain_file(tmp_path / "r.jsonl", rows)
    assert (tmp_path / "r.csv").read_text() == "timestamp,rain_mm\n2020-04-02T17:05:07Z,287.4\n2020-04-02T17:10:07Z,287.4\n"
    first = (tmp_path / "r.jsonl").read_text().splitlines()[0]
    assert json.loads(first) == {"timestamp": "2020-04-02T17:05:07Z", "rain_mm": 287.4}
    write_rain_file(tmp_path / "e.csv", [])
    write_rain_file(tmp_path / "e.jsonl", [])
    assert (tmp_path / "e.csv").read_text() == "timestamp,rain_mm\n"
    assert (tmp_path / "e.jsonl").read_text() == ""


# -- sources ----------------------------------------------------------------


def csv_source(path, **kw):
    return SourceConfig("rain-csv", "csv_file", "RAIN", RAIN_SCHEMA, str(path), **kw)


def write_lines(path, lines, mode="a"):
    with open(path, mode, encoding="utf-8") as fh:
        fh.write("".join(line + "\n" for line in lines))


def values(broker, topic):
    return [r.value for r in broker.fetch(topic, 0, 0, 100_000)]


def test_csv_source_in_order(tmp_path, broker):
    path = tmp_path / "rain.csv"
    write_lines(path, ["timestamp,rain_mm", "2020-04-02T17:05:07Z,1.0", "2020-04-02T17:10:07Z,2.0", "2020-04-02T17:15:07Z,3.0"], "w")
    src = SourceConnector(csv_source(path), broker)
    assert src.drain() == 3
    got = broker.fetch("RAIN", 0, 0, 10)
    assert [r.value["RAIN_MM"] for r in got] == [1.0, 2.0, 3.0]
    assert got[0].event_time == T0


def test_checkpoint_resumes_without_redelivery(tmp_path, broker):
    path = tmp_path / "rain.csv"
    write_lines(path, ["timestamp,rain_mm", f"{T0},1.0", f"{T0},2.0", f"{T0},3.0"], "w")
    SourceConnector(csv_source(path), broker).drain()
    assert (tmp_path / "rain.csv.rain-csv.offset").exists()
    write_lines(path, [f"{T0},4.0", f"{T0},5.0"])
    # a fresh connector (as after a restart) continues from the checkpoint
    SourceConnector(csv_source(path), broker).drain()
    assert [v["RAIN_MM"] for v in values(broker, "RAIN")] == [1.0, 2.0, 3.0, 4.0, 5.0]


def test_partial_line_waits_for_newline(tmp_path, broker):
    path = tmp_path / "rain.jsonl"
    path.write_text(f'{{"timestamp":{T0},"rain_mm":1.0}}\n{{"timestamp":{T0},"rai')
    cfg = SourceConfig("j", "jsonl_file", "RAIN", RAIN_SCHEMA, str(path))
    src = SourceConnector(cfg, broker)
    assert src.drain() == 1
    with open(path, "a") as fh:
        fh.write('n_mm":2.0}\n')
    assert src.drain() == 1
    assert [v["RAIN_MM"] for v in values(broker, "RAIN")] == [1.0, 2.0]


def test_malformed_row_goes_to_dlq(tmp_path, broker):
    path = tmp_path / "rain.csv"
    rows = [f"{T0},1.0", f"{T0},2.0", f"{T0},oops", f"{T0},4.0", f"{T0},5.0"]
    write_lines(path, ["timestamp,rain_mm", *rows], "w")
    SourceConnector(csv_source(path), broker).drain()
    assert len(values(broker, "RAIN")) == 4
    [dead] = broker.fetch("RAIN__dlq", 0, 0, 10)
    assert dead.value["LINE"] == f"{T0},oops"
    headers = dict(dead.headers)
    assert "RAIN_MM" in headers["error"]
    assert headers["connector"] == "rain-csv"


def test_schema_violation_after_transform_goes_to_dlq(tmp_path, broker):
    broker.create_topic("RAIN", RAIN_SCHEMA)
    path = tmp_path / "rain.jsonl"
    write_lines(path, [f'{{"timestamp":{T0},"rain_mm":1.0}}', f'{{"timestamp":{T0},"rain_mm":2.0}}'], "w")
    cfg = SourceConfig("j", "jsonl_file", "RAIN", RAIN_SCHEMA, str(path), transforms=(TransformSpec("insert_wallclock", "SEEN"),))
    SourceConnector(cfg, broker).drain()
    assert values(broker, "RAIN") == []
    assert len(values(broker, "RAIN__dlq")) == 2


def test_event_time_from_wall_clock_without_field(tmp_path, broker):
    schema = Schema.of(("RAIN_MM", ScalarType.FLOAT))
    path = tmp_path / "r.jsonl"
    write_lines(path, ['{"rain_mm":1.0}'], "w")
    SourceConnector(SourceConfig("j", "jsonl_file", "R", schema, str(path)), broker).drain()
    [r] = broker.fetch("R", 0, 0, 1)
    assert abs(r.event_time - time.time() * 1000) < 5000


def test_generator_source(tmp_path, broker):
    params = RainParams(T0, count=7, interval_s=60)
    cfg = SourceConfig("gen", "generator", "RAIN", generator=params, checkpoint_path=str(tmp_path / "gen.offset"), batch_lines=3)
    src = SourceConnector(cfg, broker)
    assert src.drain() == 7
    assert src.finished
    assert SourceConnector(cfg, broker).drain() == 0
    assert [r.event_time for r in broker.fetch("RAIN", 0, 0, 10)] == [T0 + i * 60_000 for i in range(7)]


def test_unreadable_path_retries(tmp_path, broker):
    path = tmp_path / "late.jsonl"
    cfg = SourceConfig("late", "jsonl_file", "RAIN", RAIN_SCHEMA, str(path), poll_interval=0.05)
    src = run_source(cfg, broker)
    try:
        deadline = time.time() + 3
        while src.status()["error"] is None and time.time() < deadline:
            time.sleep(0.01)
        assert "FileNotFoundError" in src.status()["error"]
        assert src.status()["state"] == "running"
        write_lines(path, [f'{{"timestamp":{T0},"rain_mm":1.0}}'], "w")
        deadline = time.time() + 5
        while broker.end_offset("RAIN", 0) < 1 and time.time() < deadline:
            time.sleep(0.02)
        assert broker.end_offset("RAIN", 0) == 1
    finally:
        src.stop()


class Crash(Exception):
    pass


def test_crash_after_produce_redelivers(tmp_path, broker):
    path = tmp_path / "rain.csv"
    write_lines(path, ["timestamp,rain_mm", f"{T0},1.0", f"{T0},2.0"], "w")

    def boom(point):
        raise Crash(point)

    with pytest.raises(Crash):
        SourceConnector(csv_source(path), broker, fault_hook=boom).drain()
    SourceConnector(csv_source(path), broker).drain()
    assert [v["RAIN_MM"] for v in values(broker, "RAIN")] == [1.0, 2.0, 1.0, 2.0]


def test_csv_and_jsonl_equivalent(tmp_path, broker):
    rows = generate_rain(RainParams(T0, count=50, mode="seeded_random"))
    write_rain_file(tmp_path / "r.csv", rows)
    write_rain_file(tmp_path / "r.jsonl", rows)
    SourceConnector(SourceConfig("c", "csv_file", "A", RAIN_SCHEMA, str(tmp_path / "r.csv")), broker).drain()
    SourceConnector(SourceConfig("j", "jsonl_file", "B", RAIN_SCHEMA, str(tmp_path / "r.jsonl")), broker).drain()
    a = broker.fetch("A", 0, 0, 100)
    b = broker.fetch("B", 0, 0, 100)
    assert [(r.value, r.event_time) for r in a] == [(r.value, r.event_time) for r in b]
    assert [r.value["RAIN_MM"] for r in a] == [r["RAIN_MM"] for r in rows]


# -- sinks ------------------------------------------------------------------


def fill(broker, n=3):
    broker.create_topic("EP", Schema.of(("VALUE", ScalarType.FLOAT), ("TS", ScalarType.TIMESTAMP)))
    broker.produce("EP", [ProducerRecord({"VALUE": 211.8 + i, "TS": T0 + i}, None, T0 + i) for i in range(n)])


def test_jsonl_sink_round_trip(tmp_path, broker):
    fill(broker)
    path = tmp_path / "out" / "ep.jsonl"
    sink = SinkConnector(SinkConfig("ep", "jsonl_file", "EP", str(path)), broker)
    assert sink.drain() == 3
    sink.close()
    lines = path.read_text().splitlines()
    assert len(lines) == 3
    assert lines[0] == '{"TS":"2020-04-02T17:05:07Z","VALUE":211.8}'
    assert [json.loads(line)["VALUE"] for line in lines] == [211.8, 212.8, 213.8]
    assert broker.committed("sink-ep", "EP", 0) == 3


def test_csv_sink_header_once(tmp_path, broker):
    fill(broker)
    path = tmp_path / "ep.csv"
    cfg = SinkConfig("ep", "csv_file", "EP", str(path))
    s = SinkConnector(cfg, broker)
    s.drain()
    s.close()
    broker.produce("EP", [ProducerRecord({"VALUE": 1.5, "TS": 0}, None, 0)])
    s = SinkConnector(cfg, broker)
    s.drain()
    s.close()
    rows = list(csv.reader(io.StringIO(path.read_text())))
    assert rows[0] == ["VALUE", "TS"]
    assert [r for r in rows if r == ["VALUE", "TS"]] == [rows[0]]
    assert len(rows) == 5


def test_sink_crash_before_commit_repeats(tmp_path, broker):
    fill(broker)
    path = tmp_path / "ep.jsonl"
    cfg = SinkConfig("ep", "jsonl_file", "EP", str(path))

    def boom(point):
        raise Crash(point)

    s = SinkConnector(cfg, broker, fault_hook=boom)
    with pytest.raises(Crash):
        s.step(0)
    s.close()
    s = SinkConnector(cfg, broker)
    s.drain()
    s.close()
    got = [json.loads(line)["VALUE"] for line in path.read_text().splitlines()]
    assert got == [211.8, 212.8, 213.8] * 2


def test_torn_tail_removed(tmp_path):
    p = tmp_path / "x.jsonl"
    p.write_text('{"a":1}\n{"a":')
    assert truncate_torn_tail(p) == 5
    assert p.read_text() == '{"a":1}\n'
    assert truncate_torn_tail(p) == 0


def test_sink_transform_failure_to_dlq(tmp_path, broker):
    fill(broker, 2)
    cfg = SinkConfig("ep", "jsonl_file", "EP", str(tmp_path / "o.jsonl"), transforms=(TransformSpec("drop", "NOPE"),))
    s = SinkConnector(cfg, broker)
    s.drain()
    s.close()
    assert len(broker.fetch("EP__dlq", 0, 0, 10)) == 2
    assert (tmp_path / "o.jsonl").read_text() == ""


def test_load_config(tmp_path):
    doc = {
        "sources": [
            {
                "name": "rain-csv",
                "kind": "csv_file",
                "path": "data/rain.csv",
                "target_topic": "RAIN",
                "schema": RAIN_SCHEMA.to_json(),
                "transforms": [{"type": "rename", "from": "A", "to": "B"}],
            },
            {"name": "gen", "kind": "generator", "target_topic": "RAIN", "generator": {"start": "2020-04-01T00:00:00Z", "count": 3, "mode": "random"}},
        ],
        "sinks": [{"name": "ep", "kind": "jsonl_file", "source_topic": "EP", "path": "out/ep.jsonl"}],
    }
    (tmp_path / "c.json").write_text(json.dumps(doc))
    cfg = load_config(tmp_path / "c.json")
    src, gen = cfg.sources
    assert src.path == str(tmp_path.resolve() / "data/rain.csv")
    assert src.event_time_field == "TIMESTAMP"
    assert gen.generator.mode == "seeded_random"
    assert cfg.sinks[0].group == "sink-ep"
    with pytest.raises(ValueError):
        load_config({"sources": [], "extra": []})
