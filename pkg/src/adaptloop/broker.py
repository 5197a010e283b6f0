"""Embedded pub/sub broker with append-only per-topic persistence.

Single-process stand-in for the message-queue + time-series-database
pair of a full deployment. Each topic keeps an in-memory record list
(the hot tail) mirrored to JSON-lines segment files on disk. Ordering
is by per-source sequence number; timestamps are informational and may
arrive out of order, so time-range queries do a linear scan over the
retained window.

Partitions are logical: the assigned partition is hash(source_id) mod
partition_count and is reported in the publish ack, but all records of
a topic share one log so per-source ordering holds regardless of the
partition count.
"""

from __future__ import annotations

import json
import os
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Optional

from .envelope import EnvelopeError, SampleEnvelope

DEFAULT_RETENTION_NS = 24 * 3600 * 10**9
DEFAULT_RETENTION_BYTES = 1 << 30
DEFAULT_SEGMENT_BYTES = 64 << 20
DEFAULT_MEM_RECORDS = 2_000_000


class BrokerError(Exception):
    pass


class UnknownTopicError(BrokerError):
    pass


class SeqRegressionError(BrokerError):
    """A producer re-used or rewound its per-source sequence number."""


class DuplicateTopicError(BrokerError):
    pass


@dataclass(slots=True)
class TopicDescriptor:
    topic: str
    retention_ns: int = DEFAULT_RETENTION_NS
    retention_bytes: int = DEFAULT_RETENTION_BYTES
    schema_hint: Optional[list[str]] = None
    partition_count: int = 1

    def validate(self) -> None:
        if not self.topic:
            raise BrokerError("empty topic name")
        if self.partition_count < 1:
            raise BrokerError("partition_count must be >= 1")
        if self.retention_ns <= 0 or self.retention_bytes <= 0:
            raise BrokerError("retention must be > 0")


@dataclass(slots=True)
class StreamCursor:
    mode: str = "live_tail"  # or "range_replay"
    t0_ns: int = 0
    t1_ns: int = 0

    def validate(self) -> None:
        if self.mode not in ("live_tail", "range_replay"):
            raise BrokerError(f"unknown cursor mode {self.mode!r}")
        if self.mode == "range_replay" and self.t0_ns > self.t1_ns:
            raise BrokerError("range_replay requires t0 <= t1")


@dataclass(slots=True)
class PublishAck:
    partition: int
    offset: int


@dataclass(slots=True)
class QueryResult:
    envelopes: list[SampleEnvelope]
    truncated: bool = False  # range extended past the retained window


# In-memory record: (offset, ts_ns, line). The line is the canonical
# wire JSON; it is decoded lazily on read.
_Record = tuple[int, int, str]


class _TopicLog:
    def __init__(self, descriptor: TopicDescriptor, directory: Path,
                 mem_cap: int, fsync: bool):
        self.descriptor = descriptor
        self.dir = directory
        self.mem_cap = mem_cap
        self.fsync = fsync
        self.lock = threading.RLock()
        self.cond = threading.Condition(self.lock)
        self.records: list[_Record] = []
        self.base_offset = 0          # offset of records[0]
        self.trim_offset = 0          # oldest offset still on disk
        self.last_seq: dict[str, int] = {}
        self._segment_file = None
        self._segment_start = 0
        self._segment_bytes = 0
        self._appends_since_trim = 0
        self._partition_of: dict[str, int] = {}
        self.dir.mkdir(parents=True, exist_ok=True)
        self._load()

    # -- persistence -------------------------------------------------

    def _segment_paths(self) -> list[Path]:
        return sorted(self.dir.glob("*.log"))

    def _load(self) -> None:
        next_offset = 0
        for seg in self._segment_paths():
            start = int(seg.stem)
            if self.trim_offset == 0 and not self.records:
                self.trim_offset = start
            next_offset = start
            with seg.open("r", encoding="utf-8") as fh:
                for line in fh:
                    line = line.rstrip("\n")
                    if not line:
                        continue
                    obj = json.loads(line)
                    self.records.append((next_offset, int(obj["ts_ns"]), line))
                    seq = int(obj["seq"])
                    src = obj["source_id"]
                    if self.last_seq.get(src, -1) < seq:
                        self.last_seq[src] = seq
                    next_offset += 1
        if self.records:
            self.base_offset = self.records[0][0]
            self.trim_offset = self.base_offset
        self._open_segment(next_offset)
        if len(self.records) > self.mem_cap:
            drop = len(self.records) - self.mem_cap
            del self.records[:drop]
            self.base_offset += drop

    def _open_segment(self, start_offset: int) -> None:
        path = self.dir / f"{start_offset:020d}.log"
        self._segment_file = path.open("a", encoding="utf-8")
        self._segment_start = start_offset
        self._segment_bytes = path.stat().st_size

    def _roll_segment(self, next_offset: int) -> None:
        self._segment_file.close()
        self._open_segment(next_offset)

    def flush(self) -> None:
        with self.lock:
            self._segment_file.flush()
            if self.fsync:
                os.fsync(self._segment_file.fileno())

    def close(self) -> None:
        with self.lock:
            self._segment_file.flush()
            os.fsync(self._segment_file.fileno())
            self._segment_file.close()
            self.cond.notify_all()

    # -- hot path ----------------------------------------------------

    def append(self, env: SampleEnvelope) -> PublishAck:
        env.validate()
        line = env.to_wire()
        with self.lock:
            last = self.last_seq.get(env.source_id)
            if last is not None and env.seq <= last:
                raise SeqRegressionError(
                    f"seq {env.seq} <= last {last} for source "
                    f"{env.source_id!r} on topic {env.topic!r}")
            self.last_seq[env.source_id] = env.seq
            offset = self.base_offset + len(self.records)
            self.records.append((offset, env.timestamp_ns, line))
            self._segment_file.write(line + "\n")
            self._segment_bytes += len(line) + 1
            if self._segment_bytes >= DEFAULT_SEGMENT_BYTES:
                self._roll_segment(offset + 1)
            self._appends_since_trim += 1
            if self._appends_since_trim >= 4096:
                self._maintain(env.timestamp_ns)
            self.cond.notify_all()
        partition = self._partition_of.get(env.source_id)
        if partition is None:
            partition = hash(env.source_id) % self.descriptor.partition_count
            self._partition_of[env.source_id] = partition
        return PublishAck(partition=partition, offset=offset)

    def append_auto(self, source_id: str, timestamp_ns: int,
                    payload: dict) -> tuple[PublishAck, int]:
        """Append with a server-assigned per-source sequence number."""
        with self.lock:
            seq = self.last_seq.get(source_id, -1) + 1
            env = SampleEnvelope(self.descriptor.topic, source_id, seq,
                                 timestamp_ns, payload)
            return self.append(env), seq

    # -- retention ---------------------------------------------------

    def _maintain(self, now_ns: int) -> None:
        # called under lock
        self._appends_since_trim = 0
        if len(self.records) > self.mem_cap:
            # trim deep (half the cap) so the O(n) front deletion
            # amortizes instead of running on almost every maintenance
            drop = len(self.records) - self.mem_cap // 2
            del self.records[:drop]
            self.base_offset += drop
        horizon = now_ns - self.descriptor.retention_ns
        # drop whole closed segments that fall out of the time/size budget
        segs = [p for p in self._segment_paths()
                if int(p.stem) != self._segment_start]
        total = sum(p.stat().st_size for p in segs) + self._segment_bytes
        for seg in segs:
            too_big = total > self.descriptor.retention_bytes
            too_old = False
            if not too_big:
                last_line = _last_line(seg)
                if last_line:
                    too_old = int(json.loads(last_line)["ts_ns"]) < horizon
            if too_big or too_old:
                size = seg.stat().st_size
                with seg.open("r", encoding="utf-8") as fh:
                    count = sum(1 for _ in fh)
                seg.unlink()
                total -= size
                self.trim_offset = max(self.trim_offset, int(seg.stem) + count)
            else:
                break

    # -- reads -------------------------------------------------------

    def end_offset(self) -> int:
        with self.lock:
            return self.base_offset + len(self.records)

    def read_from(self, offset: int, max_records: int = 4096,
                  timeout: Optional[float] = None) -> tuple[list[_Record], int]:
        """Records at >= offset, blocking up to timeout if none are ready.

        Returns (records, next_offset). Offsets trimmed from memory are
        skipped forward.
        """
        with self.cond:
            if offset < self.base_offset:
                offset = self.base_offset
            end = self.base_offset + len(self.records)
            if offset >= end and timeout:
                self.cond.wait(timeout)
                if offset < self.base_offset:
                    offset = self.base_offset
                end = self.base_offset + len(self.records)
            lo = offset - self.base_offset
            hi = min(lo + max_records, len(self.records))
            if lo >= hi:
                return [], offset
            batch = self.records[lo:hi]
            return batch, self.base_offset + hi

    def scan_range(self, t0_ns: int, t1_ns: int) -> QueryResult:
        """All retained records with ts in [t0, t1], in append order."""
        out: list[SampleEnvelope] = []
        with self.lock:
            mem_base = self.base_offset
            trim = self.trim_offset
            self._segment_file.flush()
            mem_snapshot = list(self.records)
        oldest_ts = _first_ts(mem_snapshot)
        if mem_base > trim:
            segs = self._segment_paths()
            if segs:
                first = _first_line(segs[0])
                if first:
                    oldest_ts = int(json.loads(first)["ts_ns"])
        truncated = trim > 0 and t0_ns < oldest_ts
        # disk portion that predates the in-memory tail
        if mem_base > trim:
            for seg in self._segment_paths():
                start = int(seg.stem)
                if start >= mem_base:
                    break
                with seg.open("r", encoding="utf-8") as fh:
                    for i, line in enumerate(fh):
                        off = start + i
                        if off >= mem_base:
                            break
                        line = line.rstrip("\n")
                        if not line:
                            continue
                        obj = json.loads(line)
                        if t0_ns <= int(obj["ts_ns"]) <= t1_ns:
                            out.append(SampleEnvelope.from_dict(obj))
        for _off, ts, line in mem_snapshot:
            if t0_ns <= ts <= t1_ns:
                out.append(SampleEnvelope.from_wire(line))
        return QueryResult(envelopes=out, truncated=truncated)


def _first_ts(records: list[_Record]) -> int:
    return records[0][1] if records else 0


def _first_line(path: Path) -> Optional[str]:
    with path.open("r", encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                return line
    return None


def _last_line(path: Path, tail_bytes: int = 65536) -> Optional[str]:
    # read only the tail: closed segments can be tens of MB and this
    # runs from the publish path's periodic maintenance
    with path.open("rb") as fh:
        fh.seek(0, os.SEEK_END)
        size = fh.tell()
        fh.seek(max(0, size - tail_bytes))
        chunk = fh.read()
    for line in reversed(chunk.splitlines()):
        if line.strip():
            return line.decode("utf-8")
    return None


class Broker:
    """Thread-safe embedded broker; one instance per process."""

    def __init__(self, data_dir: str | Path,
                 mem_cap: int = DEFAULT_MEM_RECORDS,
                 fsync: bool = False):
        self.data_dir = Path(data_dir)
        self.topics_dir = self.data_dir / "topics"
        self.topics_dir.mkdir(parents=True, exist_ok=True)
        self.mem_cap = mem_cap
        self.fsync = fsync
        self._lock = threading.Lock()
        self._topics: dict[str, _TopicLog] = {}
        self._closed = False
        self._recover()

    def _recover(self) -> None:
        for tdir in sorted(self.topics_dir.iterdir()) if self.topics_dir.exists() else []:
            meta = tdir / "topic.json"
            if not meta.exists():
                continue
            obj = json.loads(meta.read_text())
            desc = TopicDescriptor(**obj)
            self._topics[desc.topic] = _TopicLog(
                desc, tdir, self.mem_cap, self.fsync)

    def create_topic(self, descriptor: TopicDescriptor) -> None:
        descriptor.validate()
        with self._lock:
            if descriptor.topic in self._topics:
                raise DuplicateTopicError(descriptor.topic)
            tdir = self.topics_dir / _safe_name(descriptor.topic)
            tdir.mkdir(parents=True, exist_ok=True)
            (tdir / "topic.json").write_text(json.dumps({
                "topic": descriptor.topic,
                "retention_ns": descriptor.retention_ns,
                "retention_bytes": descriptor.retention_bytes,
                "schema_hint": descriptor.schema_hint,
                "partition_count": descriptor.partition_count,
            }))
            self._topics[descriptor.topic] = _TopicLog(
                descriptor, tdir, self.mem_cap, self.fsync)

    def ensure_topic(self, topic: str, **kwargs) -> None:
        if topic not in self._topics:
            self.create_topic(TopicDescriptor(topic=topic, **kwargs))

    def has_topic(self, topic: str) -> bool:
        return topic in self._topics

    def list_topics(self) -> list[TopicDescriptor]:
        return [t.descriptor for t in self._topics.values()]

    def _log(self, topic: str) -> _TopicLog:
        try:
            return self._topics[topic]
        except KeyError:
            raise UnknownTopicError(topic) from None

    def publish(self, envelope: SampleEnvelope) -> PublishAck:
        return self._log(envelope.topic).append(envelope)

    def publish_payload(self, topic: str, source_id: str, seq: int,
                        timestamp_ns: int, payload: dict) -> PublishAck:
        return self.publish(SampleEnvelope(topic, source_id, seq,
                                           timestamp_ns, payload))

    def publish_auto(self, topic: str, source_id: str, timestamp_ns: int,
                     payload: dict) -> tuple[PublishAck, int]:
        return self._log(topic).append_auto(source_id, timestamp_ns, payload)

    def next_seq(self, topic: str, source_id: str) -> int:
        log = self._log(topic)
        with log.lock:
            return log.last_seq.get(source_id, -1) + 1

    def end_offset(self, topic: str) -> int:
        return self._log(topic).end_offset()

    def subscribe(self, topic: str, cursor: StreamCursor,
                  poll_timeout: float = 0.2,
                  stop: Optional[Callable[[], bool]] = None,
                  ) -> Iterator[SampleEnvelope]:
        """Generator of envelopes per the cursor mode.

        live_tail yields from the moment of the call onward until
        stop() returns true; range_replay yields the persisted records
        in [t0, t1] and terminates.
        """
        cursor.validate()
        log = self._log(topic)
        if cursor.mode == "range_replay":
            for env in log.scan_range(cursor.t0_ns, cursor.t1_ns).envelopes:
                yield env
            return
        offset = log.end_offset()
        while not self._closed and not (stop and stop()):
            batch, offset = log.read_from(offset, timeout=poll_timeout)
            for _off, _ts, line in batch:
                yield SampleEnvelope.from_wire(line)

    def query_range(self, topic: str, t0_ns: int, t1_ns: int) -> QueryResult:
        if t0_ns > t1_ns:
            raise BrokerError("t0 > t1")
        return self._log(topic).scan_range(t0_ns, t1_ns)

    def read_from(self, topic: str, offset: int, max_records: int = 4096,
                  timeout: Optional[float] = None):
        return self._log(topic).read_from(offset, max_records, timeout)

    def flush(self) -> None:
        for log in self._topics.values():
            log.flush()

    def close(self) -> None:
        self._closed = True
        for log in self._topics.values():
            log.close()


def _safe_name(topic: str) -> str:
    return "".join(c if c.isalnum() or c in "._-" else "_" for c in topic)


def now_ns() -> int:
    return time.time_ns()
