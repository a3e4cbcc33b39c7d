import threading
import time

import pytest

from estemd.broker import Broker
from estemd.errors import (
    DuplicateTopicError,
    InvalidNameError,
    OffsetBeyondEndError,
    UnknownPartitionError,
    UnknownTopicError,
    ValidationError,
)
from estemd.model import ProducerRecord, ScalarType, Schema, TopicSpec

RAIN = Schema.of(("TIMESTAMP", ScalarType.TIMESTAMP, False), ("RAIN_MM", ScalarType.FLOAT, False), event_time_field="TIMESTAMP")


def test_create_and_describe(broker):
    broker.create_topic(TopicSpec("RAIN", 1, 1))
    broker.create_topic(TopicSpec("EP", 1, 1))
    d = broker.describe_topic("EP")
    assert (d.partitions, d.replication_display, d.percent_in_sync) == (1, 1, 100.0)
    assert d.end_offsets == [0]


def test_duplicate_topic(broker):
    broker.create_topic(TopicSpec("RAIN"))
    with pytest.raises(DuplicateTopicError):
        broker.create_topic(TopicSpec("rain"))


def test_invalid_name(broker):
    with pytest.raises(InvalidNameError):
        broker.create_topic("has space")


def test_display_spelling_kept(broker):
    broker.create_topic("Avg_Temperature")
    assert broker.describe_topic("AVG_TEMPERATURE").name == "Avg_Temperature"
    assert broker.list_topics() == ["Avg_Temperature"]


def test_internal_topics_hidden(broker):
    assert broker.list_topics() == []
    assert "__offsets" in broker.list_topics(include_internal=True)


def test_describe_unknown(broker):
    with pytest.raises(UnknownTopicError):
        broker.describe_topic("NOPE")


def test_first_produce_offset_zero(broker):
    broker.create_topic("RAIN")
    assert broker.produce("RAIN", [{"rain_mm": 287.4}]) == [(0, 0)]


def test_same_key_same_partition(broker):
    broker.create_topic("RAIN")
    a = broker.produce("RAIN", [ProducerRecord({"x": 1}, "k"), ProducerRecord({"x": 2}, "k")])
    assert a == [(0, 0), (0, 1)]


def test_keyed_routing_multi_partition(broker):
    broker.create_topic(TopicSpec("M", 4))
    a = broker.produce("M", [ProducerRecord({"x": i}, "station") for i in range(5)])
    assert len({p for p, _ in a}) == 1
    assert [o for _, o in a] == list(range(5))


def test_round_robin_without_key(broker):
    broker.create_topic(TopicSpec("M", 3))
    a = broker.produce("M", [{"x": i} for i in range(6)])
    assert sorted(p for p, _ in a) == [0, 0, 1, 1, 2, 2]


def test_unknown_topic_produce(broker):
    with pytest.raises(UnknownTopicError):
        broker.produce("XYZ", [{"a": 1}])


def test_validation_rejects_whole_batch(broker):
    broker.create_topic("RAIN", RAIN)
    good = {"TIMESTAMP": 0, "RAIN_MM": 1.0}
    with pytest.raises(ValidationError) as err:
        broker.produce("RAIN", [good, {"RAIN_MM": 2.0}])
    assert "record 1" in str(err.value)
    assert broker.end_offset("RAIN", 0) == 0


def test_event_time_defaults_to_wall_clock(broker):
    broker.create_topic("T")
    before = time.time() * 1000
    broker.produce("T", [{"a": 1}])
    [r] = broker.fetch("T", 0, 0)
    assert before - 5 <= r.event_time <= time.time() * 1000 + 5


def test_fetch_empty_and_read_own_write(broker):
    broker.create_topic("T")
    assert broker.fetch("T", 0, 0, 10, 0) == []
    broker.produce("T", [ProducerRecord({"a": 1}, None, 5)])
    [r] = broker.fetch("T", 0, 0, 10, 0)
    assert (r.offset, r.value, r.event_time) == (0, {"A": 1}, 5)


def test_fetch_unknown_partition(broker):
    broker.create_topic("T")
    with pytest.raises(UnknownPartitionError):
        broker.fetch("T", 1, 0)


def test_fetch_long_poll_wakes_on_produce(broker):
    broker.create_topic("T")

    def later():
        time.sleep(0.1)
        broker.produce("T", [{"a": 1}])

    threading.Thread(target=later).start()
    t0 = time.monotonic()
    got = broker.fetch("T", 0, 0, 10, max_wait=5.0)
    elapsed = time.monotonic() - t0
    assert len(got) == 1
    assert elapsed < 2.0


def test_fetch_long_poll_times_out(broker):
    broker.create_topic("T")
    t0 = time.monotonic()
    assert broker.fetch("T", 0, 0, 10, max_wait=0.15) == []
    assert time.monotonic() - t0 >= 0.14


def test_commit_is_monotone(broker):
    broker.create_topic("T")
    broker.produce("T", [{"a": i} for i in range(10)])
    assert broker.commit_offset("g", "T", 0, 5) == 5
    assert broker.commit_offset("g", "T", 0, 3) == 5
    assert broker.committed("g", "T", 0) == 5


def test_commit_beyond_end(broker):
    broker.create_topic("T")
    broker.produce("T", [{"a": 1}])
    broker.commit_offset("g", "T", 0, 1)
    with pytest.raises(OffsetBeyondEndError):
        broker.commit_offset("g", "T", 0, 2)


def test_state_survives_restart(tmp_path):
    b = Broker(tmp_path)
    b.create_topic("RAIN", RAIN)
    b.produce("RAIN", [{"TIMESTAMP": i, "RAIN_MM": 1.0} for i in range(10)])
    b.commit_offset("g", "RAIN", 0, 5)
    b.close()
    b2 = Broker(tmp_path)
    assert b2.committed("g", "RAIN", 0) == 5
    assert b2.describe_topic("RAIN").end_offsets == [10]
    assert b2.schema_of("RAIN") == RAIN
    b2.close()


def test_in_memory_has_nothing_to_recover():
    b = Broker()
    b.create_topic("T")
    b.close()
    assert Broker().list_topics() == []


def test_fan_out_two_groups(broker):
    broker.create_topic("T")
    for i in range(0, 1000, 100):
        broker.produce("T", [{"n": n} for n in range(i, i + 100)])
    seen = {}
    for g in ("a", "b"):
        c = broker.subscribe(g, "T")
        got = []
        while True:
            batch = c.poll(137)
            if not batch:
                break
            got.extend(r.value["N"] for r in batch)
        seen[g] = got
    assert seen["a"] == seen["b"] == list(range(1000))


def test_one_member_per_partition(broker):
    broker.create_topic(TopicSpec("T", 2))
    c1 = broker.subscribe("g", "T")
    c2 = broker.subscribe("g", "T")
    assert c1.assignment == [0, 1]
    assert c2.assignment == []
    c1.close()
    c3 = broker.subscribe("g", "T")
    assert c3.assignment == [0, 1]


def test_subscribe_positions(broker):
    broker.create_topic("T")
    broker.produce("T", [{"a": i} for i in range(3)])
    assert len(broker.subscribe("e", "T", "earliest").poll()) == 3
    late = broker.subscribe("l", "T", "latest")
    assert late.poll() == []
    broker.produce("T", [{"a": 9}])
    assert [r.offset for r in late.poll()] == [3]
    assert [r.offset for r in broker.subscribe("x", "T", 2).poll()] == [2, 3]


def test_group_resumes_after_restart(tmp_path):
    b = Broker(tmp_path)
    b.create_topic("T")
    b.produce("T", [{"a": i} for i in range(6)])
    c = b.subscribe("g", "T")
    c.poll(4)
    c.commit()
    b.close()
    b2 = Broker(tmp_path)
    c2 = b2.subscribe("g", "T", "earliest")
    assert [r.offset for r in c2.poll()] == [4, 5]
    b2.close()


def test_concurrent_producers_keep_offsets_contiguous(broker):
    broker.create_topic("T")

    def work(k):
        for i in range(50):
            broker.produce("T", [{"k": k, "i": i}, {"k": k, "i": i}])

    threads = [threading.Thread(target=work, args=(k,)) for k in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    got = broker.fetch("T", 0, 0, 1000)
    assert [r.offset for r in got] == list(range(400))
    # a batch is never interleaved with another producer's batch
    for a, b in zip(got[::2], got[1::2]):
        assert a.value == b.value
