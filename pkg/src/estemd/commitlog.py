"""Append-only partition log.

On disk a partition is a directory of segment files named
``<base offset, 20 digits>.log``. Each entry is framed as::

    u32 body_len | body | u32 crc32(body)          (big-endian)

    body = u64 offset | u64 event_time
         | u16 key_len (0xFFFF = no key) | key
         | u16 n_fields | n * (u16 name_len | name | u8 tag | payload)
         | u16 n_headers | n * (u16 len | name | u16 len | value)

Value tags: 0 null, 1 bool (u8), 2 int (i64), 3 float (f64), 4 text
(u32 len + utf-8), 5 timestamp (u64 ms).

Only the last segment is writable. Recovery truncates a torn tail on that
segment and refuses to open when any other entry fails its checksum.
"""
from __future__ import annotations

import os
import struct
import threading
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Mapping, Optional, Sequence

from estemd.errors import CorruptLogError, OffsetOutOfRangeError, StorageError
from estemd.model import Record, Timestamp, now_ms

SEGMENT_BYTES = 16 * 1024 * 1024
NO_KEY = 0xFFFF

_U32 = struct.Struct(">I")
_HEAD = struct.Struct(">QQH")
_U16 = struct.Struct(">H")
_I64 = struct.Struct(">q")
_F64 = struct.Struct(">d")
_U64 = struct.Struct(">Q")

T_NULL, T_BOOL, T_INT, T_FLOAT, T_TEXT, T_TS = range(6)


def _short(b: bytes, what: str) -> bytes:
    if len(b) > 0xFFFE:
        raise StorageError(f"{what} longer than 65534 bytes")
    return _U16.pack(len(b)) + b


def encode_value_map(value: Mapping[str, Any]) -> bytes:
    parts = [_U16.pack(len(value))]
    for name, v in value.items():
        parts.append(_short(name.encode("utf-8"), "field name"))
        if v is None:
            parts.append(b"\x00")
        elif v is True or v is False:
            parts.append(b"\x01\x01" if v else b"\x01\x00")
        elif isinstance(v, Timestamp):
            parts.append(b"\x05" + _U64.pack(v))
        elif isinstance(v, int):
            parts.append(b"\x02" + _I64.pack(v))
        elif isinstance(v, float):
            parts.append(b"\x03" + _F64.pack(v))
        elif isinstance(v, str):
            raw = v.encode("utf-8")
            parts.append(b"\x04" + _U32.pack(len(raw)) + raw)
        else:
            raise StorageError(f"cannot encode value of type {type(v).__name__}")
    return b"".join(parts)


def encode_body(offset: int, event_time: int, key: Optional[str], value: Mapping[str, Any], headers=()) -> bytes:
    if key is None:
        key_part = _U16.pack(NO_KEY)
    else:
        key_part = _short(key.encode("utf-8"), "key")
    hdr = [_U16.pack(len(headers))]
    for k, v in headers:
        hdr.append(_short(k.encode("utf-8"), "header"))
        hdr.append(_short(v.encode("utf-8"), "header"))
    return _U64.pack(offset) + _U64.pack(event_time) + key_part + encode_value_map(value) + b"".join(hdr)


def encode_entry(offset: int, event_time: int, key: Optional[str], value: Mapping[str, Any], headers=()) -> bytes:
    body = encode_body(offset, event_time, key, value, headers)
    return _U32.pack(len(body)) + body + _U32.pack(zlib.crc32(body))


def decode_body(body: bytes):
    """Return ``(offset, event_time, key, value, headers)``."""
    offset, event_time, klen = _HEAD.unpack_from(body, 0)
    pos = _HEAD.size
    if klen == NO_KEY:
        key = None
    else:
        key = body[pos : pos + klen].decode("utf-8")
        pos += klen
    (n,) = _U16.unpack_from(body, pos)
    pos += 2
    value = {}
    for _ in range(n):
        (ln,) = _U16.unpack_from(body, pos)
        pos += 2
        name = body[pos : pos + ln].decode("utf-8")
        pos += ln
        tag = body[pos]
        pos += 1
        if tag == T_NULL:
            v = None
        elif tag == T_BOOL:
            v = body[pos] == 1
            pos += 1
        elif tag == T_INT:
            (v,) = _I64.unpack_from(body, pos)
            pos += 8
        elif tag == T_FLOAT:
            (v,) = _F64.unpack_from(body, pos)
            pos += 8
        elif tag == T_TEXT:
            (ln,) = _U32.unpack_from(body, pos)
            pos += 4
            v = body[pos : pos + ln].decode("utf-8")
            pos += ln
        elif tag == T_TS:
            (raw,) = _U64.unpack_from(body, pos)
            v = Timestamp(raw)
            pos += 8
        else:
            raise ValueError(f"unknown value tag {tag}")
        value[name] = v
    (nh,) = _U16.unpack_from(body, pos)
    pos += 2
    headers = []
    for _ in range(nh):
        (ln,) = _U16.unpack_from(body, pos)
        k = body[pos + 2 : pos + 2 + ln].decode("utf-8")
        pos += 2 + ln
        (ln,) = _U16.unpack_from(body, pos)
        v = body[pos + 2 : pos + 2 + ln].decode("utf-8")
        pos += 2 + ln
        headers.append((k, v))
    if pos != len(body):
        raise ValueError("trailing bytes in entry body")
    return offset, event_time, key, value, tuple(headers)


def segment_name(base_offset: int) -> str:
    return f"{base_offset:020d}.log"


@dataclass
class Segment:
    base_offset: int
    path: Optional[Path]
    size_bytes: int = 0
    sealed: bool = False
    max_event_time: int = -1
    # byte position of each entry (file segments) or the framed entries
    # themselves (memory); plain bytes keep a large in-memory log invisible to
    # the cyclic garbage collector
    positions: list = field(default_factory=list)
    records: list = field(default_factory=list)

    @property
    def end_offset(self) -> int:
        return self.base_offset + max(len(self.positions), len(self.records))


@dataclass(frozen=True)
class RetentionPolicy:
    kind: str = "unlimited"
    value: int = 0

    @classmethod
    def unlimited(cls) -> "RetentionPolicy":
        return cls("unlimited")

    @classmethod
    def max_segments(cls, n: int) -> "RetentionPolicy":
        if n < 0:
            raise ValueError("max_segments must be >= 0")
        return cls("max_segments", n)

    @classmethod
    def max_age(cls, ms: int) -> "RetentionPolicy":
        if ms < 0:
            raise ValueError("max_age must be >= 0")
        return cls("max_age", ms)


class PartitionLog:
    """One partition's log. Single writer, many readers.

    ``directory=None`` keeps everything in memory. Otherwise every append is
    written with one ``write`` call and, when ``fsync`` is on, synced before
    returning.
    """

    def __init__(
        self,
        topic: str,
        partition: int,
        directory: Optional[os.PathLike] = None,
        *,
        fsync: bool = True,
        segment_bytes: int = SEGMENT_BYTES,
    ):
        self.topic = topic
        self.partition = partition
        self.directory = Path(directory) if directory is not None else None
        self.fsync = fsync
        self.segment_bytes = segment_bytes
        # test hook: called between the two halves of a write; raising tears the entry
        self.fault_hook: Optional[Callable[[str], None]] = None
        self._lock = threading.Lock()
        self._segments: list[Segment] = []
        self._fd: Optional[int] = None
        self._closed = False
        if self.directory is None:
            self._segments.append(Segment(0, None))
        else:
            self.directory.mkdir(parents=True, exist_ok=True)
            self._recover()

    @property
    def in_memory(self) -> bool:
        return self.directory is None

    @property
    def end_offset(self) -> int:
        return self._segments[-1].end_offset

    @property
    def start_offset(self) -> int:
        return self._segments[0].base_offset

    @property
    def segments(self) -> list[Segment]:
        return list(self._segments)

    # -- recovery ---------------------------------------------------------

    def _recover(self) -> None:
        files = sorted(self.directory.glob("*.log"))
        expected: Optional[int] = None
        for i, path in enumerate(files):
            last = i == len(files) - 1
            try:
                base = int(path.stem)
            except ValueError:
                raise CorruptLogError(f"unexpected file in log directory: {path.name}") from None
            if expected is not None and base != expected:
                raise CorruptLogError(f"segment {path.name} does not start at offset {expected}")
            seg = self._scan_segment(path, base, last)
            seg.sealed = not last
            self._segments.append(seg)
            expected = seg.end_offset
        if not self._segments:
            path = self.directory / segment_name(0)
            path.touch()
            self._segments.append(Segment(0, path))
        self._open_active()

    def _scan_segment(self, path: Path, base: int, last: bool) -> Segment:
        data = path.read_bytes()
        seg = Segment(base, path)
        pos = 0
        expected = base
        n = len(data)
        while pos < n:
            torn = None
            if n - pos < 4:
                torn = "truncated length prefix"
            else:
                (blen,) = _U32.unpack_from(data, pos)
                end = pos + 4 + blen + 4
                if end > n:
                    torn = "truncated entry"
                else:
                    body = data[pos + 4 : pos + 4 + blen]
                    (crc,) = _U32.unpack_from(data, pos + 4 + blen)
                    if zlib.crc32(body) != crc:
                        if last and end == n:
                            torn = "checksum mismatch on final entry"
                        else:
                            raise CorruptLogError(
                                f"checksum mismatch at byte {pos} (offset {expected}) in {path.name}"
                            )
                    else:
                        try:
                            offset, event_time, *_ = decode_body(body)
                        except (ValueError, struct.error, UnicodeDecodeError) as exc:
                            raise CorruptLogError(f"undecodable entry at byte {pos} in {path.name}: {exc}") from None
                        if offset != expected:
                            raise CorruptLogError(f"offset gap in {path.name}: expected {expected}, found {offset}")
                        seg.positions.append(pos)
                        seg.max_event_time = max(seg.max_event_time, event_time)
                        expected += 1
                        pos = end
                        continue
            if not last:
                raise CorruptLogError(f"{torn} at byte {pos} inside sealed segment {path.name}")
            with open(path, "r+b") as f:
                f.truncate(pos)
                f.flush()
                os.fsync(f.fileno())
            break
        seg.size_bytes = pos
        return seg

    def _open_active(self) -> None:
        if self._fd is not None:
            os.close(self._fd)
        self._fd = os.open(self._segments[-1].path, os.O_RDWR | os.O_APPEND)

    # -- writes -----------------------------------------------------------

    def append(self, records: Sequence) -> int:
        """Append ``records`` (objects with value/key/event_time/headers) atomically.

        Returns the offset assigned to the first record.
        """
        if not records:
            raise ValueError("append needs at least one record")
        with self._lock:
            if self._closed:
                raise StorageError("log is closed")
            active = self._segments[-1]
            if active.size_bytes >= self.segment_bytes and active.end_offset > active.base_offset:
                self._roll()
                active = self._segments[-1]
            base = active.end_offset
            chunks = []
            max_t = active.max_event_time
            for i, r in enumerate(records):
                t = int(r.event_time)
                chunks.append(encode_entry(base + i, t, r.key, dict(r.value), r.headers))
                max_t = max(max_t, t)
            if self.in_memory:
                active.records.extend(chunks)
                active.size_bytes += sum(len(c) for c in chunks)
            else:
                buf = b"".join(chunks)
                self._write(buf)
                pos = active.size_bytes
                new_positions = []
                for c in chunks:
                    new_positions.append(pos)
                    pos += len(c)
                active.size_bytes = pos
                active.positions.extend(new_positions)
            active.max_event_time = max_t
            return base

    def _write(self, buf: bytes) -> None:
        start = self._segments[-1].size_bytes
        try:
            if self.fault_hook is not None:
                half = len(buf) // 2
                os.write(self._fd, buf[:half])
                self.fault_hook("append.partial")
                os.write(self._fd, buf[half:])
            else:
                written = os.write(self._fd, buf)
                if written != len(buf):
                    os.write(self._fd, buf[written:])
            if self.fsync:
                os.fsync(self._fd)
        except OSError as exc:
            try:
                os.ftruncate(self._fd, start)
            except OSError:
                pass
            raise StorageError(f"append failed: {exc}") from exc

    def _roll(self) -> None:
        active = self._segments[-1]
        active.sealed = True
        base = active.end_offset
        if self.in_memory:
            self._segments.append(Segment(base, None))
            return
        path = self.directory / segment_name(base)
        path.touch()
        self._segments.append(Segment(base, path))
        self._open_active()
        if self.fsync:
            _fsync_dir(self.directory)

    def seal(self) -> None:
        """Close the active segment (if it has entries) and start a new one."""
        with self._lock:
            if self._segments[-1].end_offset > self._segments[-1].base_offset:
                self._roll()

    # -- reads ------------------------------------------------------------

    def read(self, from_offset: int, max_records: int = 500) -> list[Record]:
        if from_offset < 0:
            raise ValueError("from_offset must be >= 0")
        if max_records < 1:
            raise ValueError("max_records must be positive")
        segments = self._segments  # list replaced only under lock; snapshot is consistent
        if from_offset < segments[0].base_offset:
            raise OffsetOutOfRangeError(from_offset, segments[0].base_offset)
        end = segments[-1].end_offset
        stop = min(end, from_offset + max_records)
        out: list[Record] = []
        for seg in segments:
            seg_end = seg.end_offset
            if seg_end <= from_offset or seg.base_offset >= stop:
                continue
            lo = max(from_offset, seg.base_offset) - seg.base_offset
            hi = min(stop, seg_end) - seg.base_offset
            if seg.path is None:
                out.extend(self._decode(chunk) for chunk in seg.records[lo:hi])
            else:
                out.extend(self._read_file(seg, lo, hi))
        return out

    def _decode(self, chunk: bytes) -> Record:
        offset, t, key, value, headers = decode_body(chunk[4:-4])
        return Record(self.topic, self.partition, offset, t, key, value, headers)

    def _read_file(self, seg: Segment, lo: int, hi: int) -> list[Record]:
        positions = seg.positions
        start = positions[lo]
        stop = positions[hi] if hi < len(positions) else None
        with open(seg.path, "rb") as f:
            f.seek(start)
            data = f.read() if stop is None else f.read(stop - start)
        out = []
        pos = 0
        for _ in range(hi - lo):
            (blen,) = _U32.unpack_from(data, pos)
            body = data[pos + 4 : pos + 4 + blen]
            (crc,) = _U32.unpack_from(data, pos + 4 + blen)
            if zlib.crc32(body) != crc:
                raise CorruptLogError(f"checksum mismatch reading {seg.path.name}")
            offset, t, key, value, headers = decode_body(body)
            out.append(Record(self.topic, self.partition, offset, t, key, value, headers))
            pos += 8 + blen
        return out

    def read_raw(self, from_offset: int, max_records: int = 500) -> list[bytes]:
        """Re-serialised entries, for byte-level replay comparisons."""
        return [
            encode_entry(r.offset, r.event_time, r.key, r.value, r.headers)
            for r in self.read(from_offset, max_records)
        ]

    # -- retention --------------------------------------------------------

    def enforce_retention(self, policy: RetentionPolicy, now: Optional[int] = None) -> int:
        """Delete whole sealed segments, oldest first. Returns how many were deleted."""
        if policy.kind == "unlimited":
            return 0
        with self._lock:
            sealed = [s for s in self._segments[:-1]]
            if policy.kind == "max_segments":
                victims = sealed[: max(0, len(sealed) - policy.value)]
            elif policy.kind == "max_age":
                cutoff = (now_ms() if now is None else now) - policy.value
                victims = []
                for s in sealed:
                    if s.max_event_time >= cutoff:
                        break
                    victims.append(s)
            else:
                raise ValueError(f"unknown retention policy {policy.kind!r}")
            for s in victims:
                if s.path is not None:
                    s.path.unlink(missing_ok=True)
            if victims:
                self._segments = self._segments[len(victims) :]
            return len(victims)

    def close(self) -> None:
        with self._lock:
            self._closed = True
            if self._fd is not None:
                os.close(self._fd)
                self._fd = None


def recover(directory: os.PathLike, topic: str = "", partition: int = 0, **kwargs) -> PartitionLog:
    """Open (and repair if needed) the log stored in ``directory``."""
    return PartitionLog(topic, partition, directory, **kwargs)


def _fsync_dir(path: Path) -> None:
    try:
        fd = os.open(path, os.O_RDONLY)
    except OSError:
        return
    try:
        os.fsync(fd)
    except OSError:
        pass
    finally:
        os.close(fd)
