"""Deterministic synthetic rain readings and writers for the seed files."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional, Union

from estemd.model import ScalarType, Schema, Timestamp, format_iso, parse_timestamp

LCG_A = 6364136223846793005
LCG_C = 1442695040888963407
MASK64 = (1 << 64) - 1

RAIN_SCHEMA = Schema.of(
    ("TIMESTAMP", ScalarType.TIMESTAMP, False),
    ("RAIN_MM", ScalarType.FLOAT, False),
    event_time_field="TIMESTAMP",
)


class Lcg:
    """64-bit linear congruential generator. The state advances before each draw."""

    def __init__(self, seed: int):
        self.state = seed & MASK64

    def next_unit(self) -> float:
        self.state = (LCG_A * self.state + LCG_C) & MASK64
        return (self.state >> 11) / float(1 << 53)


@dataclass(frozen=True)
class RainParams:
    start_time: int  # epoch ms
    interval_s: int = 300
    count: int = 0
    mode: str = "constant"  # "constant" | "seeded_random"
    value: float = 287.4
    seed: int = 42
    min: float = 0.0
    max: float = 50.0

    def __post_init__(self):
        if self.count < 0:
            raise ValueError("count must be >= 0")
        if self.interval_s <= 0:
            raise ValueError("interval_s must be > 0")
        if self.mode not in ("constant", "seeded_random"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if isinstance(self.start_time, str):
            object.__setattr__(self, "start_time", int(parse_timestamp(self.start_time)))

    @classmethod
    def from_json(cls, doc: dict) -> "RainParams":
        d = dict(doc)
        if "start" in d and "start_time" not in d:
            d["start_time"] = d.pop("start")
        if d.get("mode") == "random":
            d["mode"] = "seeded_random"
        return cls(**d)


def iter_rain(params: RainParams, skip: int = 0) -> Iterator[dict]:
    """Yield readings from index ``skip`` onwards."""
    rng = Lcg(params.seed)
    span = params.max - params.min
    for i in range(params.count):
        if params.mode == "seeded_random":
            v = params.min + rng.next_unit() * span
        else:
            v = float(params.value)
        if i >= skip:
            yield {"TIMESTAMP": Timestamp(params.start_time + i * params.interval_s * 1000), "RAIN_MM": v}


def generate_rain(params: Optional[RainParams] = None, **kwargs) -> list[dict]:
    """Build the full reading sequence, e.g. ``generate_rain(start_time=0, count=3)``."""
    if params is None:
        params = RainParams(**kwargs)
    return list(iter_rain(params))


def write_rain_file(path: Union[str, Path], readings) -> int:
    """Write readings as CSV or JSONL, chosen by the file extension. Returns the row count."""
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix not in (".csv", ".jsonl"):
        raise ValueError(f"output must end in .csv or .jsonl, got {path.name}")
    n = 0
    with open(path, "w", encoding="utf-8", newline="") as fh:
        if suffix == ".csv":
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["timestamp", "rain_mm"])
            for r in readings:
                w.writerow([format_iso(r["TIMESTAMP"]), repr(float(r["RAIN_MM"]))])
                n += 1
        else:
            for r in readings:
                fh.write(json.dumps({"timestamp": format_iso(r["TIMESTAMP"]), "rain_mm": float(r["RAIN_MM"])}, separators=(",", ":")))
                fh.write("\n")
                n += 1
    return n
