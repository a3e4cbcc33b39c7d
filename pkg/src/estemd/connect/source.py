"""Source connectors: tail a CSV/JSONL file (or run the rain generator) into a topic."""
from __future__ import annotations

import logging
import os
import threading
from pathlib import Path
from typing import Callable, Optional

from estemd.connect.config import SourceConfig
from estemd.connect.generator import iter_rain
from estemd.connect.parsers import parse_csv_line, parse_header, parse_jsonl_line
from estemd.connect.transforms import apply_transforms
from estemd.errors import EstemdError, ValidationError
from estemd.model import ProducerRecord

logger = logging.getLogger(__name__)

FaultHook = Callable[[str], None]


def dlq_topic(target: str) -> str:
    return f"{target}__dlq"


def read_checkpoint(path: Optional[Path]) -> int:
    if path is None or not path.exists():
        return 0
    text = path.read_text(encoding="ascii").strip()
    return int(text) if text else 0


def write_checkpoint(path: Optional[Path], value: int) -> None:
    """Atomically replace the checkpoint file (write, fsync, rename)."""
    if path is None:
        return
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="ascii") as fh:
        fh.write(str(value))
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


class ConnectorTask:
    """Shared thread plumbing: ``step`` until stopped, backing off on errors."""

    name = "connector"

    def __init__(self, poll_interval: float):
        self.poll_interval = poll_interval
        self.state = "idle"
        self.last_error: Optional[str] = None
        self._stop = threading.Event()
        self._thread: Optional[threading.Thread] = None

    def step(self) -> int:  # pragma: no cover - overridden
        raise NotImplementedError

    def close(self) -> None:
        pass

    def start(self) -> "ConnectorTask":
        self.state = "running"
        self._thread = threading.Thread(target=self._loop, name=f"connect-{self.name}", daemon=True)
        self._thread.start()
        return self

    def stop(self, timeout: float = 5.0) -> None:
        self._stop.set()
        if self._thread is not None and self._thread is not threading.current_thread():
            self._thread.join(timeout)
        if self.state == "running":
            self.state = "stopped"
        self.close()

    def join(self, timeout: Optional[float] = None) -> None:
        if self._thread is not None:
            self._thread.join(timeout)

    def _loop(self) -> None:
        backoff = self.poll_interval
        while not self._stop.is_set():
            try:
                n = self.step()
                backoff = self.poll_interval
                self.last_error = None
            except OSError as exc:
                # unreadable path or transient I/O: retry with backoff, visible in status
                self.last_error = f"{type(exc).__name__}: {exc}"
                logger.warning("connector %s: %s", self.name, self.last_error)
                self._stop.wait(backoff)
                backoff = min(backoff * 2, 5.0)
                continue
            except Exception as exc:  # noqa: BLE001 - reported through status
                self.state = "failed"
                self.last_error = f"{type(exc).__name__}: {exc}"
                logger.exception("connector %s failed", self.name)
                self.close()
                return
            if n == 0:
                self._stop.wait(self.poll_interval)


class SourceConnector(ConnectorTask):
    """Reads new complete lines from the checkpoint onwards and produces them.

    The checkpoint is written only after the broker acknowledged the batch, so a
    crash in between re-delivers lines (at-least-once) but never skips any.
    """

    def __init__(self, config: SourceConfig, broker, *, fault_hook: Optional[FaultHook] = None):
        super().__init__(config.poll_interval)
        self.config = config
        self.name = config.name
        self.broker = broker
        self.fault_hook = fault_hook
        self.produced = 0
        self.dead_lettered = 0
        self.header: Optional[list[str]] = None
        self.position = read_checkpoint(config.checkpoint)
        broker.ensure_topic(config.target_topic)
        self._dlq_ready = False

    @property
    def finished(self) -> bool:
        gen = self.config.generator
        return gen is not None and self.position >= gen.count

    # -- record building ----------------------------------------------------

    def _build(self, value: dict) -> ProducerRecord:
        etf = self.config.event_time_field
        event_time = value.get(etf) if etf else None
        rec = ProducerRecord(value, None, None if event_time is None else int(event_time))
        return apply_transforms(self.config.transforms, rec)

    def _parse(self, line: str) -> dict:
        if self.config.kind == "csv_file":
            return parse_csv_line(self.header, line, self.config.schema)
        return parse_jsonl_line(line, self.config.schema)

    def _dead_letter(self, raw: str, exc: Exception) -> ProducerRecord:
        code = getattr(exc, "code", type(exc).__name__)
        msg = getattr(exc, "message", None) or str(exc)
        return ProducerRecord(
            {"SOURCE": self.name, "LINE": raw, "ERROR": msg},
            None,
            None,
            (("error", msg), ("error_code", code), ("connector", self.name)),
        )

    def _produce(self, good: list[tuple[str, ProducerRecord]], bad: list[ProducerRecord]) -> None:
        target = self.config.target_topic
        if good:
            try:
                self.broker.produce(target, [r for _, r in good])
                self.produced += len(good)
            except ValidationError:
                # find the offending records one by one; the rest still go through
                for raw, r in good:
                    try:
                        self.broker.produce(target, [r])
                        self.produced += 1
                    except ValidationError as exc:
                        bad.append(self._dead_letter(raw, exc))
        if bad:
            if not self._dlq_ready:
                self.broker.ensure_topic(dlq_topic(target))
                self._dlq_ready = True
            self.broker.produce(dlq_topic(target), bad)
            self.dead_lettered += len(bad)

    # -- stepping -------------------------------------------------------------

    def step(self) -> int:
        """Process one batch. Returns the number of input lines (or readings) consumed."""
        if self.config.kind == "generator":
            return self._step_generator()
        return self._step_file()

    def _step_generator(self) -> int:
        params = self.config.generator
        good = []
        for value in iter_rain(params, self.position):
            good.append(("", self._build(value)))
            if len(good) >= self.config.batch_lines:
                break
        if not good:
            return 0
        self._produce(good, [])
        if self.fault_hook:
            self.fault_hook("source.after_produce")
        self.position += len(good)
        write_checkpoint(self.config.checkpoint, self.position)
        return len(good)

    def _read_header(self, fh) -> bool:
        fh.seek(0)
        first = fh.readline()
        if not first.endswith(b"\n"):
            return False
        self.header = parse_header(first.decode("utf-8"), self.config.schema)
        if self.position < len(first):
            self.position = len(first)
        return True

    def _step_file(self) -> int:
        path = Path(self.config.path)
        with open(path, "rb") as fh:
            if self.config.kind == "csv_file" and self.header is None:
                if not self._read_header(fh):
                    return 0
            size = os.fstat(fh.fileno()).st_size
            if size <= self.position:
                return 0
            fh.seek(self.position)
            chunk = fh.read(min(size - self.position, 8 << 20))
        end = chunk.rfind(b"\n")
        if end < 0:
            return 0
        lines = chunk[: end + 1].split(b"\n")[:-1]
        lines = lines[: self.config.batch_lines]
        consumed = sum(len(b) + 1 for b in lines)
        good: list[tuple[str, ProducerRecord]] = []
        bad: list[ProducerRecord] = []
        for raw in lines:
            try:
                text = raw.decode("utf-8").rstrip("\r")
            except UnicodeDecodeError as exc:
                bad.append(self._dead_letter(raw.decode("utf-8", "replace"), exc))
                continue
            if not text.strip():
                continue
            try:
                good.append((text, self._build(self._parse(text))))
            except EstemdError as exc:
                bad.append(self._dead_letter(text, exc))
        self._produce(good, bad)
        if self.fault_hook:
            self.fault_hook("source.after_produce")
        self.position += consumed
        write_checkpoint(self.config.checkpoint, self.position)
        return len(lines)

    def drain(self) -> int:
        """Step until no complete input remains. Returns the total consumed."""
        total = 0
        while True:
            n = self.step()
            if n == 0:
                return total
            total += n

    def status(self) -> dict:
        return {
            "name": self.name,
            "kind": self.config.kind,
            "state": self.state,
            "position": self.position,
            "produced": self.produced,
            "dead_lettered": self.dead_lettered,
            "error": self.last_error,
        }


def run_source(config: SourceConfig, broker, **kwargs) -> SourceConnector:
    """Start a source connector in its own thread."""
    return SourceConnector(config, broker, **kwargs).start()
