"""Self-labeling engine: workflows, effect FIFO, causal state mapping.

A workflow binds one cause node and its effect nodes (via a truth
table) to live streams and models. Detected effect events queue in a
per-workflow FIFO; a periodic scan assembles them into truth-table
rows to resolve the cause state, asks the interaction-time model for
the causal lag tau, and emits a three-value self-label record
(cause state, cause-end timestamp, duration). Mode 1 persists the raw
records; Mode 2 additionally extracts the labeled cause-stream window
as a training sample.

Matching policy: greedy in arrival order. The earliest pending event
anchors the search; rows are tried in table order and each non-wild
slot takes the earliest cached event of the matching node and state.
If two completable rows disagree on the cause state the situation is
inconsistent and all involved events are evicted. Events that cannot
complete any row within max_wait are evicted individually. A wildcard
slot requires and consumes no event.
"""

from __future__ import annotations

import json
import threading
import time
import uuid
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

from .broker import Broker, StreamCursor
from .envelope import SampleEnvelope
from .features import LabeledSample, pool_envelopes
from .kg import TruthTable, WILDCARD


class SlbError(Exception):
    pass


class ItmUnavailableError(SlbError):
    """Transient ITM failure; the resolution is parked and retried."""


POSITIVE = "positive"
NEGATIVE = "negative"


@dataclass
class EffectEvent:
    node_id: str
    state: str
    transition_ts_ns: int
    confidence: float = 1.0
    polarity: str = POSITIVE
    event_id: str = field(default_factory=lambda: uuid.uuid4().hex)
    # (topic, t0_ns, t1_ns) of the feature / background window
    feature_ref: Optional[tuple[str, int, int]] = None

    def validate(self) -> None:
        if not 0.0 <= self.confidence <= 1.0:
            raise SlbError(f"confidence {self.confidence} outside [0,1]")
        if self.polarity == NEGATIVE and self.feature_ref is None:
            raise SlbError("negative_sample event needs a background window ref")

    def to_dict(self) -> dict:
        return {
            "node_id": self.node_id, "state": self.state,
            "transition_ts_ns": self.transition_ts_ns,
            "confidence": self.confidence, "polarity": self.polarity,
            "event_id": self.event_id,
            "feature_ref": list(self.feature_ref) if self.feature_ref else None,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "EffectEvent":
        ref = obj.get("feature_ref")
        return cls(
            node_id=obj["node_id"], state=obj["state"],
            transition_ts_ns=int(obj["transition_ts_ns"]),
            confidence=float(obj.get("confidence", 1.0)),
            polarity=obj.get("polarity", POSITIVE),
            event_id=obj.get("event_id", uuid.uuid4().hex),
            feature_ref=(ref[0], int(ref[1]), int(ref[2])) if ref else None,
        )


@dataclass
class CauseResolution:
    outcome: str  # resolved | ambiguous | inconsistent | evicted
    cause_state: Optional[str] = None
    events: list[EffectEvent] = field(default_factory=list)
    missing_nodes: list[str] = field(default_factory=list)


@dataclass
class SelfLabelRecord:
    workflow_id: str
    cause_state: str
    cause_end_ts_ns: int
    duration_ns: int
    tau_ns: int
    contributing_effects: list[str] = field(default_factory=list)
    polarity: str = POSITIVE
    record_id: str = ""

    def validate(self, effect_ts_ns: Optional[int] = None) -> None:
        if self.duration_ns <= 0:
            raise SlbError("duration must be > 0")
        if self.polarity == POSITIVE and effect_ts_ns is not None \
                and self.cause_end_ts_ns >= effect_ts_ns:
            raise SlbError(
                f"positive record cause_end {self.cause_end_ts_ns} >= "
                f"effect transition {effect_ts_ns}")

    def dedupe_key(self) -> tuple[str, int]:
        return (self.workflow_id, self.cause_end_ts_ns)

    def window(self) -> tuple[int, int]:
        return (self.cause_end_ts_ns - self.duration_ns, self.cause_end_ts_ns)

    def to_dict(self) -> dict:
        return {
            "workflow_id": self.workflow_id, "cause_state": self.cause_state,
            "cause_end_ts_ns": self.cause_end_ts_ns,
            "duration_ns": self.duration_ns, "tau_ns": self.tau_ns,
            "contributing_effects": self.contributing_effects,
            "polarity": self.polarity, "record_id": self.record_id,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "SelfLabelRecord":
        return cls(
            workflow_id=obj["workflow_id"], cause_state=obj["cause_state"],
            cause_end_ts_ns=int(obj["cause_end_ts_ns"]),
            duration_ns=int(obj["duration_ns"]), tau_ns=int(obj["tau_ns"]),
            contributing_effects=list(obj.get("contributing_effects", [])),
            polarity=obj.get("polarity", POSITIVE),
            record_id=obj.get("record_id", ""),
        )


def compute_cause_window(effect_ts_ns: int, tau_ns: int, duration_ns: int,
                         epoch_ns: int = 0) -> tuple[int, int, bool]:
    """Map an effect transition back to its cause window.

    The cause ends tau before the effect transition and lasts duration.
    Returns (start, end, clamped); clamped is set when the start falls
    before the stream epoch.
    """
    if tau_ns < 0:
        raise SlbError("tau must be >= 0")
    if duration_ns <= 0:
        raise SlbError("duration must be > 0")
    end = effect_ts_ns - tau_ns
    start = end - duration_ns
    clamped = start < epoch_ns
    if clamped:
        start = epoch_ns
    return start, end, clamped


@dataclass
class WorkflowSpec:
    workflow_id: str
    cause_node: str
    effect_nodes: list[str]
    truth_table_id: str
    effect_event_topics: list[str]
    cause_stream_topic: str
    itm_ref: str
    output_topic: str
    cause_window_duration_ns: int = 4 * 10**9
    max_wait_ns: int = 10 * 10**9
    mode1_enabled: bool = True
    mode2_enabled: bool = True
    confidence_threshold: float = 0.5
    negative_cause_state: str = "background"
    negative_tau_ns: int = 0
    tau_anchor: str = "earliest"  # or "latest"
    cause_channels: list[str] = field(default_factory=list)
    itm_retry_budget: int = 5

    def validate(self) -> None:
        if not (self.mode1_enabled or self.mode2_enabled):
            raise SlbError("at least one of mode1/mode2 must be enabled")
        if self.cause_window_duration_ns <= 0:
            raise SlbError("cause_window_duration must be > 0")
        if self.max_wait_ns <= 0:
            raise SlbError("max_wait must be > 0")
        if self.tau_anchor not in ("earliest", "latest"):
            raise SlbError(f"unknown tau anchor {self.tau_anchor!r}")

    def to_dict(self) -> dict:
        return {
            "workflow_id": self.workflow_id, "cause_node": self.cause_node,
            "effect_nodes": self.effect_nodes,
            "truth_table_id": self.truth_table_id,
            "effect_event_topics": self.effect_event_topics,
            "cause_stream_topic": self.cause_stream_topic,
            "itm_ref": self.itm_ref, "output_topic": self.output_topic,
            "cause_window_duration_ns": self.cause_window_duration_ns,
            "max_wait_ns": self.max_wait_ns,
            "mode1_enabled": self.mode1_enabled,
            "mode2_enabled": self.mode2_enabled,
            "confidence_threshold": self.confidence_threshold,
            "negative_cause_state": self.negative_cause_state,
            "negative_tau_ns": self.negative_tau_ns,
            "tau_anchor": self.tau_anchor,
            "cause_channels": self.cause_channels,
            "itm_retry_budget": self.itm_retry_budget,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "WorkflowSpec":
        known = {f for f in cls.__dataclass_fields__}
        return cls(**{k: v for k, v in obj.items() if k in known})


class SelfLabelStore:
    """At-least-once record sink deduplicated on (workflow, cause_end)."""

    def __init__(self, persist_path: Optional[Path] = None):
        self._lock = threading.Lock()
        self._records: list[SelfLabelRecord] = []
        self._keys: dict[tuple[str, int], str] = {}
        self._path = Path(persist_path) if persist_path else None
        if self._path and self._path.exists():
            with self._path.open("r", encoding="utf-8") as fh:
                for line in fh:
                    if line.strip():
                        rec = SelfLabelRecord.from_dict(json.loads(line))
                        self._records.append(rec)
                        self._keys[rec.dedupe_key()] = rec.record_id
        self._fh = self._path.open("a", encoding="utf-8") if self._path else None

    def add(self, record: SelfLabelRecord) -> tuple[str, bool]:
        with self._lock:
            key = record.dedupe_key()
            existing = self._keys.get(key)
            if existing is not None:
                return existing, False
            if not record.record_id:
                record.record_id = f"{record.workflow_id}:{record.cause_end_ts_ns}"
            self._keys[key] = record.record_id
            self._records.append(record)
            if self._fh:
                self._fh.write(json.dumps(record.to_dict(),
                                          separators=(",", ":")) + "\n")
                self._fh.flush()
            return record.record_id, True

    def count(self, workflow_id: Optional[str] = None,
              polarity: Optional[str] = None) -> int:
        with self._lock:
            return sum(1 for r in self._records
                       if (workflow_id is None or r.workflow_id == workflow_id)
                       and (polarity is None or r.polarity == polarity))

    def query(self, workflow_id: Optional[str] = None,
              t0_ns: Optional[int] = None,
              t1_ns: Optional[int] = None) -> list[SelfLabelRecord]:
        with self._lock:
            out = []
            for r in self._records:
                if workflow_id is not None and r.workflow_id != workflow_id:
                    continue
                if t0_ns is not None and r.cause_end_ts_ns < t0_ns:
                    continue
                if t1_ns is not None and r.cause_end_ts_ns > t1_ns:
                    continue
                out.append(r)
            return out

    def close(self) -> None:
        if self._fh:
            self._fh.close()


# FIFO entry
@dataclass
class _Pending:
    arrival_ns: int
    event: EffectEvent


@dataclass
class _Parked:
    resolution: CauseResolution
    retries_left: int


class SlbWorkflow:
    """One running self-labeling workflow: a sequential state machine.

    All mutating calls are serialized by an internal lock so the engine
    can drive it from subscription and timer threads, while offline
    pipelines call on_effect_event / scan directly.
    """

    def __init__(self, spec: WorkflowSpec, table: TruthTable, itm,
                 store: SelfLabelStore, broker: Optional[Broker] = None,
                 sample_sink: Optional[Callable[[LabeledSample], None]] = None,
                 epoch_ns: int = 0):
        spec.validate()
        if (table.cause_node != spec.cause_node
                or list(table.effect_nodes) != list(spec.effect_nodes)):
            raise SlbError("truth table does not match workflow node pair")
        self.spec = spec
        self.table = table
        self.itm = itm
        self.store = store
        self.broker = broker
        self.sample_sink = sample_sink
        self.epoch_ns = epoch_ns
        self._lock = threading.RLock()
        self.fifo: list[_Pending] = []
        self.parked: list[_Parked] = []
        self.stats = {
            "emitted": 0, "evicted": 0, "ambiguous": 0, "inconsistent": 0,
            "gated": 0, "negatives": 0, "itm_failed": 0, "duplicates": 0,
        }
        self._out_seq = 0
        self.running = True

    # -- ingestion ---------------------------------------------------

    def on_effect_event(self, event: EffectEvent,
                        arrival_ns: Optional[int] = None) -> None:
        event.validate()
        if event.polarity == NEGATIVE:
            with self._lock:
                self._emit_negative(event)
            return
        if event.node_id not in self.spec.effect_nodes:
            raise SlbError(
                f"event node {event.node_id!r} not in workflow effect nodes")
        with self._lock:
            if event.confidence < self.spec.confidence_threshold:
                self.stats["gated"] += 1
                return
            self.fifo.append(_Pending(
                arrival_ns if arrival_ns is not None else time.time_ns(),
                event))

    # -- causal state mapping ----------------------------------------

    def scan_fifo(self, now_ns: int) -> list[CauseResolution]:
        with self._lock:
            results: list[CauseResolution] = []
            self._retry_parked()
            while True:
                acted = False
                for idx, pending in enumerate(self.fifo):
                    res = self._try_anchor(idx)
                    if res is not None:
                        results.append(res)
                        acted = True
                        break
                    if now_ns - pending.arrival_ns > self.spec.max_wait_ns:
                        self.fifo.pop(idx)
                        self.stats["evicted"] += 1
                        results.append(CauseResolution(
                            outcome="evicted", events=[pending.event]))
                        acted = True
                        break
                if not acted:
                    break
            for pending in self.fifo:
                results.append(CauseResolution(
                    outcome="ambiguous", events=[pending.event],
                    missing_nodes=self._missing_nodes(pending.event)))
                self.stats["ambiguous"] += 1
            return results

    def _retry_parked(self) -> None:
        still: list[_Parked] = []
        for parked in self.parked:
            try:
                self._resolve_emit(parked.resolution)
            except ItmUnavailableError:
                parked.retries_left -= 1
                if parked.retries_left > 0:
                    still.append(parked)
                else:
                    self.stats["itm_failed"] += 1
        self.parked = still

    def _candidate_rows(self, event: EffectEvent) -> list[int]:
        slot = self.spec.effect_nodes.index(event.node_id)
        return [i for i, (tup, _cause) in enumerate(self.table.rows)
                if tup[slot] == event.state]

    def _assignment(self, row_idx: int) -> Optional[list[_Pending]]:
        """Earliest unconsumed event per non-wildcard slot, or None."""
        tup, _cause = self.table.rows[row_idx]
        used: list[_Pending] = []
        for slot, sym in enumerate(tup):
            if sym == WILDCARD:
                continue
            node = self.spec.effect_nodes[slot]
            pick = None
            for pending in self.fifo:
                if pending in used:
                    continue
                if pending.event.node_id == node and pending.event.state == sym:
                    pick = pending
                    break
            if pick is None:
                return None
            used.append(pick)
        return used

    def _try_anchor(self, idx: int) -> Optional[CauseResolution]:
        anchor = self.fifo[idx]
        completable: list[tuple[int, list[_Pending]]] = []
        for row_idx in self._candidate_rows(anchor.event):
            assign = self._assignment(row_idx)
            if assign is not None and anchor in assign:
                completable.append((row_idx, assign))
        if not completable:
            return None
        causes = {self.table.rows[i][1] for i, _ in completable}
        if len(causes) > 1:
            members: list[_Pending] = []
            for _i, assign in completable:
                for p in assign:
                    if p not in members:
                        members.append(p)
            for p in members:
                self.fifo.remove(p)
            self.stats["inconsistent"] += 1
            self.stats["evicted"] += len(members)
            return CauseResolution(outcome="inconsistent",
                                   events=[p.event for p in members])
        row_idx, assign = completable[0]  # first row in table order
        for p in assign:
            self.fifo.remove(p)
        resolution = CauseResolution(
            outcome="resolved", cause_state=self.table.rows[row_idx][1],
            events=[p.event for p in assign])
        try:
            self._resolve_emit(resolution)
        except ItmUnavailableError:
            self.parked.append(_Parked(resolution, self.spec.itm_retry_budget))
        return resolution

    def _missing_nodes(self, event: EffectEvent) -> list[str]:
        missing: set[str] = set()
        cached = {(p.event.node_id, p.event.state) for p in self.fifo}
        for row_idx in self._candidate_rows(event):
            tup, _cause = self.table.rows[row_idx]
            for slot, sym in enumerate(tup):
                if sym == WILDCARD:
                    continue
                node = self.spec.effect_nodes[slot]
                if (node, sym) not in cached:
                    missing.add(node)
        return sorted(missing)

    # -- emission ----------------------------------------------------

    def _resolve_emit(self, resolution: CauseResolution) -> None:
        tau_ns = int(self.itm.infer(resolution.events))
        if tau_ns < 0:
            raise SlbError("ITM returned negative tau")
        if self.spec.tau_anchor == "earliest":
            anchor_ts = min(e.transition_ts_ns for e in resolution.events)
        else:
            anchor_ts = max(e.transition_ts_ns for e in resolution.events)
        _start, end, _clamped = compute_cause_window(
            anchor_ts, tau_ns, self.spec.cause_window_duration_ns,
            self.epoch_ns)
        record = SelfLabelRecord(
            workflow_id=self.spec.workflow_id,
            cause_state=resolution.cause_state,
            cause_end_ts_ns=end,
            duration_ns=self.spec.cause_window_duration_ns,
            tau_ns=tau_ns,
            contributing_effects=[e.event_id for e in resolution.events],
            polarity=POSITIVE,
        )
        self.emit_record(record, effect_ts_ns=anchor_ts)

    def _emit_negative(self, event: EffectEvent) -> None:
        _topic, _t0, t1 = event.feature_ref
        end = t1 - self.spec.negative_tau_ns
        record = SelfLabelRecord(
            workflow_id=self.spec.workflow_id,
            cause_state=self.spec.negative_cause_state,
            cause_end_ts_ns=end,
            duration_ns=self.spec.cause_window_duration_ns,
            tau_ns=self.spec.negative_tau_ns,
            contributing_effects=[event.event_id],
            polarity=NEGATIVE,
        )
        self.stats["negatives"] += 1
        self.emit_record(record)

    def emit_record(self, record: SelfLabelRecord,
                    effect_ts_ns: Optional[int] = None) -> str:
        record.validate(effect_ts_ns)
        record_id, created = self.store.add(record)
        if not created:
            self.stats["duplicates"] += 1
            return record_id
        self.stats["emitted"] += 1
        if self.broker is not None and self.spec.output_topic:
            self._out_seq += 1
            self.broker.publish(SampleEnvelope(
                topic=self.spec.output_topic,
                source_id=self.spec.workflow_id,
                seq=self._out_seq,
                timestamp_ns=max(record.cause_end_ts_ns, 1),
                payload=record.to_dict()))
        if self.spec.mode2_enabled and self.sample_sink is not None:
            sample = self.extract_segment(record)
            if sample is not None:
                self.sample_sink(sample)
        return record_id

    # -- Mode 2 ------------------------------------------------------

    def extract_segment(self, record: SelfLabelRecord) -> Optional[LabeledSample]:
        """Package the cause-stream window behind a record as a sample."""
        if self.broker is None:
            return None
        start, end = record.window()
        start = max(start, self.epoch_ns)
        result = self.broker.query_range(self.spec.cause_stream_topic, start, end)
        feats = pool_envelopes(result.envelopes, self.spec.cause_channels)
        provenance = {"record_id": record.record_id,
                      "window": [start, end],
                      "n_samples": len(result.envelopes)}
        if feats is None:
            return LabeledSample(features=[], label=record.cause_state,
                                 provenance=provenance, empty_window=True)
        return LabeledSample(features=feats, label=record.cause_state,
                             provenance=provenance)

    # -- lifecycle ---------------------------------------------------

    def stop(self, now_ns: Optional[int] = None) -> dict:
        """Drain: resolve what is resolvable now, evict the rest."""
        with self._lock:
            self.scan_fifo(now_ns if now_ns is not None else time.time_ns())
            leftover = len(self.fifo)
            self.stats["evicted"] += leftover
            self.fifo.clear()
            self.running = False
            return dict(self.stats)


class SlbEngine:
    """Registry of workflows plus live wiring onto the broker.

    In serve mode each workflow gets a consumer thread per effect
    topic and a shared scan timer. Offline pipelines construct
    SlbWorkflow directly and drive it synchronously.
    """

    def __init__(self, broker: Broker, kg_store, store: SelfLabelStore,
                 itm_resolver: Callable[[str], object],
                 sample_sink: Optional[Callable[[LabeledSample], None]] = None):
        self.broker = broker
        self.kg = kg_store
        self.store = store
        self.itm_resolver = itm_resolver
        self.sample_sink = sample_sink
        self._lock = threading.Lock()
        self._workflows: dict[str, SlbWorkflow] = {}
        self._threads: dict[str, list[threading.Thread]] = {}
        self._stops: dict[str, threading.Event] = {}

    def start_workflow(self, spec: WorkflowSpec, live: bool = True) -> str:
        with self._lock:
            if spec.workflow_id in self._workflows:
                raise SlbError(f"duplicate workflow id {spec.workflow_id!r}")
            table = self.kg.get_table(spec.truth_table_id)
            itm = self.itm_resolver(spec.itm_ref)
            wf = SlbWorkflow(spec, table, itm, self.store, self.broker,
                             self.sample_sink)
            self._workflows[spec.workflow_id] = wf
            if live:
                self._wire(wf)
            return spec.workflow_id

    def _wire(self, wf: SlbWorkflow) -> None:
        stop = threading.Event()
        threads = []
        for topic in wf.spec.effect_event_topics:
            self.broker.ensure_topic(topic)
            t = threading.Thread(
                target=self._consume, args=(wf, topic, stop), daemon=True)
            t.start()
            threads.append(t)
        interval = min(1.0, wf.spec.max_wait_ns / 4 / 1e9)
        t = threading.Thread(
            target=self._scan_loop, args=(wf, interval, stop), daemon=True)
        t.start()
        threads.append(t)
        self._stops[wf.spec.workflow_id] = stop
        self._threads[wf.spec.workflow_id] = threads

    def _consume(self, wf: SlbWorkflow, topic: str,
                 stop: threading.Event) -> None:
        cursor = StreamCursor(mode="live_tail")
        for env in self.broker.subscribe(topic, cursor,
                                         stop=stop.is_set):
            try:
                wf.on_effect_event(EffectEvent.from_dict(env.payload))
            except SlbError:
                pass  # anomalies are counted/ignored, never fatal

    def _scan_loop(self, wf: SlbWorkflow, interval: float,
                   stop: threading.Event) -> None:
        while not stop.wait(interval):
            wf.scan_fifo(time.time_ns())

    def stop_workflow(self, workflow_id: str) -> dict:
        with self._lock:
            wf = self._workflows.pop(workflow_id, None)
            if wf is None:
                raise SlbError(f"unknown workflow {workflow_id!r}")
            stop = self._stops.pop(workflow_id, None)
            threads = self._threads.pop(workflow_id, [])
        if stop:
            stop.set()
        stats = wf.stop()
        for t in threads:
            t.join(timeout=2.0)
        return stats

    def get(self, workflow_id: str) -> SlbWorkflow:
        with self._lock:
            wf = self._workflows.get(workflow_id)
            if wf is None:
                raise SlbError(f"unknown workflow {workflow_id!r}")
            return wf

    def list_workflows(self) -> list[WorkflowSpec]:
        with self._lock:
            return [wf.spec for wf in self._workflows.values()]

    def shutdown(self) -> None:
        for wid in [w.workflow_id for w in self.list_workflows()]:
            try:
                self.stop_workflow(wid)
            except SlbError:
                pass
