import zlib

import pytest
from hypothesis import given, settings, strategies as st

from estemd.commitlog import (
    PartitionLog,
    RetentionPolicy,
    decode_body,
    encode_entry,
    recover,
    segment_name,
)
from estemd.errors import CorruptLogError, OffsetOutOfRangeError
from estemd.model import ProducerRecord, Timestamp


def recs(n, start=0):
    return [ProducerRecord({"N": start + i, "V": float(i) / 3}, None, 1000 + i) for i in range(n)]


class Crash(Exception):
    """Stands in for the process dying mid-write."""


def crash(point):
    raise Crash(point)


@pytest.fixture(params=["memory", "file"])
def log(request, tmp_path):
    directory = None if request.param == "memory" else tmp_path / "p0"
    lg = PartitionLog("T", 0, directory)
    yield lg
    lg.close()


def test_first_append_is_offset_zero(log):
    assert log.append(recs(1)) == 0


def test_offsets_are_contiguous(log):
    assert log.append(recs(3)) == 0
    assert log.append(recs(2)) == 3
    assert log.end_offset == 5


def test_empty_read(log):
    assert log.read(0, 10) == []


def test_suffix_read(log):
    log.append(recs(3))
    got = log.read(1, 10)
    assert [r.offset for r in got] == [1, 2]
    assert [r.value["N"] for r in got] == [1, 2]


def test_read_past_end_is_empty(log):
    log.append(recs(3))
    assert log.read(3, 10) == []
    assert log.read(50, 10) == []


def test_read_after_append_identical(log):
    value = {"T": Timestamp(5), "S": "héllo", "B": True, "I": -7, "F": float("inf"), "N": None}
    log.append([ProducerRecord(value, "k", 5, (("h", "v"),))])
    [r] = log.read(0, 1)
    assert r.value == value
    assert isinstance(r.value["T"], Timestamp)
    assert r.key == "k"
    assert r.headers == (("h", "v"),)


def test_replay_is_byte_identical(log):
    log.append(recs(100))
    first = log.read_raw(0, 100)
    second = log.read_raw(0, 100)
    assert len(first) == 100
    assert first == second


def test_entry_framing():
    entry = encode_entry(7, 1000, None, {"A": 1})
    body_len = int.from_bytes(entry[:4], "big")
    body = entry[4 : 4 + body_len]
    assert len(entry) == 4 + body_len + 4
    assert int.from_bytes(entry[-4:], "big") == zlib.crc32(body)
    assert decode_body(body) == (7, 1000, None, {"A": 1}, ())


def test_segment_naming():
    assert segment_name(0) == "00000000000000000000.log"
    assert segment_name(1234) == "00000000000000001234.log"


def test_empty_directory_recovers_to_zero(tmp_path):
    lg = recover(tmp_path / "empty")
    assert lg.end_offset == 0
    assert (tmp_path / "empty" / segment_name(0)).exists()
    lg.close()


def test_batch_survives_crash_and_recover(tmp_path):
    lg = PartitionLog("T", 0, tmp_path)
    lg.append(recs(1000))
    # no close: the process "dies" here
    lg2 = recover(tmp_path)
    assert lg2.end_offset == 1000
    assert [r.value["N"] for r in lg2.read(0, 1000)] == list(range(1000))


def test_torn_tail_truncated_by_hand(tmp_path):
    lg = PartitionLog("T", 0, tmp_path)
    for i in range(11):
        lg.append(recs(1, i))
    lg.close()
    path = tmp_path / segment_name(0)
    data = path.read_bytes()
    last = len(encode_entry(10, 1000, None, {"N": 10, "V": 0.0}))
    cut = len(data) - last // 2
    path.write_bytes(data[:cut])
    lg2 = recover(tmp_path)
    assert lg2.end_offset == 10
    assert path.stat().st_size == len(data) - last
    # the log is writable again at the repaired boundary
    assert lg2.append(recs(1, 10)) == 10
    lg2.close()


def test_torn_tail_from_crash_mid_write(tmp_path):
    lg = PartitionLog("T", 0, tmp_path)
    lg.append(recs(10))
    lg.fault_hook = crash
    with pytest.raises(Crash):
        lg.append(recs(1, 10))
    lg2 = recover(tmp_path)
    assert lg2.end_offset == 10
    assert [r.value["N"] for r in lg2.read(0, 100)] == list(range(10))
    lg2.close()


def test_crash_mid_batch_keeps_a_clean_prefix(tmp_path):
    lg = PartitionLog("T", 0, tmp_path)
    lg.append(recs(10))
    lg.fault_hook = crash
    with pytest.raises(Crash):
        lg.append(recs(6, 10))
    lg2 = recover(tmp_path)
    # complete entries before the tear survive; the torn one and the rest do not
    assert 10 <= lg2.end_offset < 16
    got = lg2.read(0, 100)
    assert [r.value["N"] for r in got] == list(range(lg2.end_offset))
    lg2.close()


def test_recover_is_idempotent(tmp_path):
    lg = PartitionLog("T", 0, tmp_path)
    lg.append(recs(7))
    lg.fault_hook = crash
    with pytest.raises(Crash):
        lg.append(recs(1))
    ends = []
    for _ in range(3):
        r = recover(tmp_path)
        ends.append((r.end_offset, (tmp_path / segment_name(0)).stat().st_size))
        r.close()
    assert ends[0][0] == 7
    assert len(set(ends)) == 1


def test_byte_flip_in_sealed_segment_refuses_to_open(tmp_path):
    lg = PartitionLog("T", 0, tmp_path)
    for i in range(10):
        lg.append(recs(1, i))
    lg.seal()
    lg.append(recs(1, 10))
    lg.close()
    path = tmp_path / segment_name(0)
    data = bytearray(path.read_bytes())
    entry_len = len(encode_entry(0, 1000, None, {"N": 0, "V": 0.0}))
    # every entry has the same length here; flip a byte inside entry 5's body
    data[5 * entry_len + 12] ^= 0xFF
    path.write_bytes(bytes(data))
    with pytest.raises(CorruptLogError):
        recover(tmp_path)


def test_segments_roll_without_gaps(tmp_path):
    lg = PartitionLog("T", 0, tmp_path, segment_bytes=200)
    for i in range(40):
        lg.append(recs(1, i))
    segs = lg.segments
    assert len(segs) > 3
    for a, b in zip(segs, segs[1:]):
        assert a.end_offset == b.base_offset
        assert a.sealed
    assert not segs[-1].sealed
    lg.close()
    lg2 = recover(tmp_path, segment_bytes=200)
    assert lg2.end_offset == 40
    assert [r.value["N"] for r in lg2.read(0, 40)] == list(range(40))
    lg2.close()


def test_retention_unlimited_deletes_nothing(log):
    log.append(recs(3))
    log.seal()
    assert log.enforce_retention(RetentionPolicy.unlimited()) == 0


def test_retention_never_touches_active(log):
    log.append(recs(3))
    assert log.enforce_retention(RetentionPolicy.max_segments(0)) == 0
    assert log.enforce_retention(RetentionPolicy.max_age(0), now=10**12) == 0


def test_retention_max_segments(log):
    for i in range(3):
        log.append(recs(2, 2 * i))
        log.seal()
    log.append(recs(1, 6))
    bases = [s.base_offset for s in log.segments]
    assert bases == [0, 2, 4, 6]
    assert log.enforce_retention(RetentionPolicy.max_segments(1)) == 2
    assert log.start_offset == 4
    with pytest.raises(OffsetOutOfRangeError) as err:
        log.read(0, 10)
    assert err.value.earliest == 4
    assert [r.offset for r in log.read(4, 10)] == [4, 5, 6]


def test_retention_max_age(log):
    log.append([ProducerRecord({"N": 0}, None, 100)])
    log.seal()
    log.append([ProducerRecord({"N": 1}, None, 5000)])
    log.seal()
    log.append([ProducerRecord({"N": 2}, None, 9000)])
    assert log.enforce_retention(RetentionPolicy.max_age(1000), now=6000) == 1
    assert log.start_offset == 1


def test_retention_files_removed(tmp_path):
    lg = PartitionLog("T", 0, tmp_path)
    for i in range(3):
        lg.append(recs(2, 2 * i))
        lg.seal()
    lg.enforce_retention(RetentionPolicy.max_segments(1))
    names = sorted(p.name for p in tmp_path.glob("*.log"))
    assert names == [segment_name(4), segment_name(6)]
    lg.close()
    lg2 = recover(tmp_path)
    assert (lg2.start_offset, lg2.end_offset) == (4, 6)
    lg2.close()


@settings(max_examples=10, deadline=None)
@given(st.lists(st.integers(1, 500), min_size=1, max_size=60))
def test_random_batches_contiguous(sizes):
    lg = PartitionLog("T", 0)
    total = 0
    for n in sizes:
        assert lg.append(recs(n, total)) == total
        total += n
    got = lg.read(0, total)
    assert [r.offset for r in got] == list(range(total))
    assert [r.value["N"] for r in got] == list(range(total))


def test_ten_thousand_random_appends_durable(tmp_path):
    import random

    rng = random.Random(7)
    lg = PartitionLog("T", 0, tmp_path, fsync=False, segment_bytes=64 * 1024)
    total = 0
    while total < 10_000:
        n = min(rng.randint(1, 300), 10_000 - total)
        assert lg.append(recs(n, total)) == total
        total += n
    assert [r.offset for r in lg.read(0, 20_000)] == list(range(10_000))
    lg.close()
    lg2 = recover(tmp_path, segment_bytes=64 * 1024)
    assert lg2.read_raw(0, 20_000) == lg2.read_raw(0, 20_000)
    assert [r.offset for r in lg2.read(0, 20_000)] == list(range(10_000))
    lg2.close()
