"""Filter->Map throughput and produce-to-output latency, in-memory mode.

Run as a script; prints one JSON object. Kept out of the pytest process so
the harness's own heap does not skew garbage-collection pauses.
"""
import json
import sys
import threading
import time

from estemd.broker import Broker
from estemd.eql.session import QueryEngine
from estemd.model import ProducerRecord


def run(rate: int = 11_000, duration: float = 10.0, tick: float = 0.01) -> dict:
    broker = Broker()
    engine = QueryEngine(broker)
    engine.execute("CREATE STREAM S (T BIGINT NOT NULL, X DOUBLE NOT NULL) WITH (topic='S');")
    engine.execute("CREATE STREAM O AS SELECT T, X * 2 AS Y FROM S WHERE X >= 0 EMIT CHANGES;")
    latencies = []
    done = threading.Event()

    def consume():
        c = broker.subscribe("bench", "O", "earliest")
        while not done.is_set():
            batch = c.poll(10_000, 0.05)
            now = time.perf_counter_ns()
            latencies.extend((now - r.value["T"]) / 1e6 for r in batch)

    reader = threading.Thread(target=consume)
    reader.start()
    per_tick = int(rate * tick)
    produced = 0
    began = time.perf_counter()
    due = began
    while time.perf_counter() - began < duration:
        stamp = time.perf_counter_ns()
        broker.produce("S", [ProducerRecord({"T": stamp, "X": 1.5}, None, 0) for _ in range(per_tick)])
        produced += per_tick
        due += tick
        pause = due - time.perf_counter()
        if pause > 0:
            time.sleep(pause)
    elapsed = time.perf_counter() - began
    deadline = time.monotonic() + 5
    while len(latencies) < produced and time.monotonic() < deadline:
        time.sleep(0.01)
    done.set()
    reader.join()
    engine.close()
    broker.close()
    latencies.sort()
    return {
        "produced": produced,
        "delivered": len(latencies),
        "elapsed": elapsed,
        "p50_ms": latencies[len(latencies) // 2] if latencies else None,
        "p99_ms": latencies[int(len(latencies) * 0.99)] if latencies else None,
    }


if __name__ == "__main__":
    print(json.dumps(run(*map(float, sys.argv[1:]))))
