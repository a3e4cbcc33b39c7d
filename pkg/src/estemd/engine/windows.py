"""Windowed aggregation and absence detection over event time.

The watermark is the maximum event time seen. A window closes once
``start + size + grace <= watermark``; it then emits exactly once. A record
whose every covering window has already closed is dropped and counted as
late.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Optional, Sequence, Union

from estemd.engine.operators import ABSENT, WINDOW_END, WINDOW_START, AggSpec, WindowSpec
from estemd.expr import Expr, compile_expr
from estemd.model import Record, Timestamp


@dataclass
class _Bucket:
    start: int
    key: tuple
    seq: int
    # per function: [count, sum, min, max]
    accs: list
    min_offset: Optional[int] = None


@dataclass
class WindowState:
    watermark: int = -1
    buckets: dict = field(default_factory=dict)
    late_records: int = 0
    _seq: int = 0

    def min_open_offset(self) -> Optional[int]:
        offs = [b.min_offset for b in self.buckets.values() if b.min_offset is not None]
        return min(offs) if offs else None


def _fold(accs: list, functions: Sequence[AggSpec], value) -> None:
    for acc, fn in zip(accs, functions):
        if fn.field is None:
            acc[0] += 1
            continue
        v = value.get(fn.field)
        if v is None:
            continue
        if acc[0] == 0:
            acc[1] = v
            acc[2] = v
            acc[3] = v
        else:
            acc[1] += v
            if v < acc[2]:
                acc[2] = v
            if v > acc[3]:
                acc[3] = v
        acc[0] += 1


def _result(fn: AggSpec, acc: list):
    count, total, lo, hi = acc
    if fn.function == "COUNT":
        return count
    if count == 0:
        return None
    if fn.function == "AVG":
        return float(total) / count
    if fn.function == "SUM":
        return int(total) if isinstance(total, int) else total
    return lo if fn.function == "MIN" else hi


def advance_window(
    state: WindowState,
    record: Record,
    spec: WindowSpec,
    functions: Sequence[AggSpec],
    group_by: Sequence[str] = (),
    *,
    include: bool = True,
) -> list[dict]:
    """Fold ``record`` into its open windows, advance the watermark, emit closed windows.

    With ``include=False`` the record only moves the watermark (it was
    filtered out upstream but still advances stream time).
    """
    t = int(record.event_time)
    if include:
        open_starts = [s for s in spec.starts_for(t) if spec.closes_at(s) > state.watermark]
        if not open_starts:
            state.late_records += 1
        else:
            value = record.value
            key = tuple(value.get(g) for g in group_by)
            for s in open_starts:
                b = state.buckets.get((key, s))
                if b is None:
                    b = _Bucket(s, key, state._seq, [[0, 0, None, None] for _ in functions])
                    state._seq += 1
                    state.buckets[(key, s)] = b
                _fold(b.accs, functions, value)
                if record.offset is not None and (b.min_offset is None or record.offset < b.min_offset):
                    b.min_offset = record.offset
    return advance_watermark(state, t, spec, functions, group_by)


def advance_watermark(
    state: WindowState,
    t: int,
    spec: WindowSpec,
    functions: Sequence[AggSpec],
    group_by: Sequence[str] = (),
) -> list[dict]:
    if t <= state.watermark:
        return []
    state.watermark = t
    closing = [b for b in state.buckets.values() if spec.closes_at(b.start) <= t]
    if not closing:
        return []
    closing.sort(key=lambda b: (b.start, b.seq))
    out = []
    for b in closing:
        del state.buckets[(b.key, b.start)]
        row: dict[str, Any] = {
            WINDOW_START: Timestamp(b.start),
            WINDOW_END: Timestamp(b.start + spec.size_ms),
        }
        for g, v in zip(group_by, b.key):
            row[g] = v
        for fn, acc in zip(functions, b.accs):
            row[fn.alias] = _result(fn, acc)
        out.append(row)
    return out


@dataclass
class NegationState:
    """Absence tracking. ``next_start`` is the oldest window not yet evaluated."""

    watermark: int = -1
    next_start: Optional[int] = None
    matched: dict = field(default_factory=dict)  # window start -> min contributing offset
    late_records: int = 0

    @classmethod
    def from_origin(cls, origin: int) -> "NegationState":
        return cls(next_start=origin)

    def min_open_offset(self) -> Optional[int]:
        offs = [o for o in self.matched.values() if o is not None]
        return min(offs) if offs else None


def advance_negation(
    state: NegationState,
    record_or_tick: Union[Record, int],
    spec: WindowSpec,
    predicate: Union[Expr, Callable],
) -> list[dict]:
    """Feed a record (or a bare watermark tick) and emit absence rows for closed windows."""
    if isinstance(record_or_tick, Record):
        t = int(record_or_tick.event_time)
        starts = spec.starts_for(t)
        if state.next_start is None:
            state.next_start = starts[0]
        open_starts = [s for s in starts if s >= state.next_start and spec.closes_at(s) > state.watermark]
        if not open_starts:
            state.late_records += 1
        else:
            pred = predicate if callable(predicate) else compile_expr(predicate)
            if pred(record_or_tick.value) is True:
                off = record_or_tick.offset
                for s in open_starts:
                    prev = state.matched.get(s)
                    if s not in state.matched or (off is not None and (prev is None or off < prev)):
                        state.matched[s] = off
    else:
        t = int(record_or_tick)
        if state.next_start is None:
            state.next_start = spec.starts_for(t)[0]
    if t > state.watermark:
        state.watermark = t
    out = []
    while spec.closes_at(state.next_start) <= state.watermark:
        s = state.next_start
        if s not in state.matched:
            out.append({WINDOW_START: Timestamp(s), WINDOW_END: Timestamp(s + spec.size_ms), ABSENT: True})
        else:
            del state.matched[s]
        state.next_start = s + spec.advance_ms
    return out
