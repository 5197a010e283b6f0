"""Characterization benchmarks: broker throughput and edge-node emulation.

bench_broker drives one in-process producer/consumer pair as hard as
it can. bench_edge emulates a standard sensor-node mix over loopback
HTTP: one 6-channel inertial-like stream, one 3-channel
environmental-like stream, one 1-channel distance-like stream, paced
to add up to roughly 284 msg/s.
"""

from __future__ import annotations

import json
import threading
import time
from dataclasses import dataclass, field
from typing import Optional

import httpx

from .broker import Broker, StreamCursor, TopicDescriptor
from .envelope import SampleEnvelope
from .http_api import DEFAULT_TOKEN


@dataclass
class BenchResult:
    messages: int
    duration_s: float
    throughput_msg_s: float
    mean_latency_ms: float
    max_latency_ms: float
    lost: int = 0
    posted: int = 0
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "messages": self.messages,
            "duration_s": round(self.duration_s, 3),
            "throughput_msg_s": round(self.throughput_msg_s, 1),
            "mean_latency_ms": round(self.mean_latency_ms, 3),
            "max_latency_ms": round(self.max_latency_ms, 3),
            "lost": self.lost,
            "posted": self.posted,
            **self.extra,
        }


def bench_broker(broker: Broker, duration_s: float = 30.0,
                 topic: str = "bench.broker") -> BenchResult:
    """Single producer, single consumer, as fast as possible."""
    if not broker.has_topic(topic):
        broker.create_topic(TopicDescriptor(topic=topic))
    stop = threading.Event()
    produced = [0]
    consumed = [0]
    latencies: list[float] = []

    def producer():
        seq = broker.next_seq(topic, "bench-producer")
        publish = broker.publish
        while not stop.is_set():
            now = time.time_ns()
            publish(SampleEnvelope(topic, "bench-producer", seq, now,
                                   {"t": now, "v": 1.0}))
            seq += 1
            produced[0] += 1

    def consumer():
        offset = broker.end_offset(topic)
        since_sample = 0
        while not stop.is_set() or offset < broker.end_offset(topic):
            batch, offset = broker.read_from(topic, offset,
                                             max_records=8192, timeout=0.1)
            consumed[0] += len(batch)
            since_sample += len(batch)
            if batch and since_sample >= 1024:
                since_sample = 0
                line = batch[-1][2]
                sent = json.loads(line)["payload"]["t"]
                latencies.append((time.time_ns() - sent) / 1e6)
            if stop.is_set() and not batch:
                break

    ct = threading.Thread(target=consumer)
    pt = threading.Thread(target=producer)
    t0 = time.perf_counter()
    ct.start()
    pt.start()
    time.sleep(duration_s)
    stop.set()
    pt.join()
    ct.join(timeout=10.0)
    elapsed = time.perf_counter() - t0
    return BenchResult(
        messages=consumed[0],
        duration_s=elapsed,
        throughput_msg_s=consumed[0] / elapsed,
        mean_latency_ms=sum(latencies) / len(latencies) if latencies else 0.0,
        max_latency_ms=max(latencies) if latencies else 0.0,
        posted=produced[0],
        lost=produced[0] - consumed[0],
    )


# standard node mix: (source, channels, rate Hz, workers)
EDGE_MIX = [
    ("imu-1", ["ax", "ay", "az", "gx", "gy", "gz"], 250.0, 2),
    ("cth-1", ["co2", "temp", "humidity"], 1.0, 1),
    ("dist-1", ["range_mm"], 33.0, 1),
]


def bench_edge(base_url: str, broker: Broker, duration_s: float = 15.0,
               topic: str = "bench.edge",
               token: str = DEFAULT_TOKEN) -> BenchResult:
    """Sensor mix over loopback HTTP POST /ingest, zero-loss check.

    Latency is client send time to in-process subscriber receipt.
    """
    if not broker.has_topic(topic):
        broker.create_topic(TopicDescriptor(topic=topic))
    stop = threading.Event()
    posted = [0]
    post_lock = threading.Lock()
    received = [0]
    latencies: list[float] = []
    errors: list[str] = []

    def sensor(source_id: str, channels: list[str], rate_hz: float,
               worker: int, workers: int, start_t: float):
        headers = {"Authorization": f"Bearer {token}"}
        interval = workers / rate_hz
        with httpx.Client(base_url=base_url, timeout=10.0) as client:
            # schedule anchors at the shared bench start so client setup
            # and thread spawn time are made up by an initial burst
            next_t = start_t + worker * interval / workers
            while not stop.is_set():
                now = time.perf_counter()
                if now < next_t:
                    time.sleep(min(next_t - now, 0.05))
                    continue
                next_t += interval
                body = {
                    "topic": topic,
                    "source_id": f"{source_id}-w{worker}",
                    "timestamp_ns": time.time_ns(),
                    "payload": {ch: 0.5 for ch in channels},
                }
                body["payload"]["sent_ns"] = float(time.time_ns())
                r = client.post("/ingest", json=body, headers=headers)
                if r.status_code != 200:
                    errors.append(f"{r.status_code}: {r.text[:100]}")
                    if len(errors) > 10:
                        return
                else:
                    with post_lock:
                        posted[0] += 1

    def subscriber():
        offset = broker.end_offset(topic)
        while not stop.is_set() or offset < broker.end_offset(topic):
            batch, offset = broker.read_from(topic, offset,
                                             max_records=1024, timeout=0.1)
            now = time.time_ns()
            for _off, _ts, line in batch:
                received[0] += 1
                sent = json.loads(line)["payload"].get("sent_ns")
                if sent:
                    latencies.append((now - sent) / 1e6)
            if stop.is_set() and not batch:
                break

    t0 = time.perf_counter()
    threads = [threading.Thread(target=subscriber)]
    for source_id, channels, rate, workers in EDGE_MIX:
        for w in range(workers):
            threads.append(threading.Thread(
                target=sensor, args=(source_id, channels, rate, w, workers, t0)))
    for t in threads:
        t.start()
    time.sleep(duration_s)
    stop.set()
    # rate is measured over the posting window; the joins below only
    # drain messages already posted inside that window
    elapsed = time.perf_counter() - t0
    for t in threads:
        t.join(timeout=10.0)
    return BenchResult(
        messages=received[0],
        duration_s=elapsed,
        throughput_msg_s=received[0] / elapsed,
        mean_latency_ms=sum(latencies) / len(latencies) if latencies else 0.0,
        max_latency_ms=max(latencies) if latencies else 0.0,
        posted=posted[0],
        lost=posted[0] - received[0],
        extra={"errors": errors[:5]},
    )


def bench_http_publish(base_url: str, broker: Broker,
                       duration_s: float = 5.0,
                       topic: str = "bench.http",
                       token: str = DEFAULT_TOKEN) -> BenchResult:
    """Loopback HTTP ingestion rate with one posting client."""
    if not broker.has_topic(topic):
        broker.create_topic(TopicDescriptor(topic=topic))
    headers = {"Authorization": f"Bearer {token}"}
    posted = 0
    latencies: list[float] = []
    deadline = time.perf_counter() + duration_s
    with httpx.Client(base_url=base_url, timeout=10.0) as client:
        while time.perf_counter() < deadline:
            t0 = time.perf_counter()
            r = client.post("/ingest", json={
                "topic": topic, "source_id": "http-bench",
                "timestamp_ns": time.time_ns(), "payload": {"v": 1.0}},
                headers=headers)
            if r.status_code == 200:
                posted += 1
                latencies.append((time.perf_counter() - t0) * 1e3)
    return BenchResult(
        messages=posted, duration_s=duration_s,
        throughput_msg_s=posted / duration_s,
        mean_latency_ms=sum(latencies) / len(latencies) if latencies else 0.0,
        max_latency_ms=max(latencies) if latencies else 0.0,
        posted=posted)
