"""Synthetic desk factory: coupled cause/effect streams with ground truth.

Interactions occur at random, well-separated times. Each one produces
a cause-side window (class-conditional channel means over background
noise) and, after a truncated-Gaussian interaction time, a step in the
effect-side level signal (the level toggles between 0 and
effect_step_height, alternating rising/falling). A drift schedule
shifts the interaction-class channel means mid-run to erode a frozen
classifier. Everything is reproducible from the seed; the generator
runs on a simulated clock, as fast as possible.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .broker import Broker
from .envelope import SampleEnvelope
from .slb import EffectEvent, SelfLabelRecord

SEC = 10**9


class SimError(Exception):
    pass


@dataclass
class SimConfig:
    seed: int = 0
    run_duration_s: float = 600.0
    event_rate_per_hour: float = 60.0
    event_count: Optional[int] = None  # overrides the rate when set
    tau_mean_s: float = 2.5
    tau_sigma_s: float = 0.3
    cause_channels: int = 2
    class_means: list[float] = field(default_factory=lambda: [1.0, 0.0])
    class_sigma: float = 0.5
    cause_duration_s: float = 4.0
    effect_step_height: float = 5.0
    effect_noise_sigma: float = 0.0
    drift_schedule: list[tuple[float, list[float]]] = field(default_factory=list)
    cause_hz: float = 20.0
    effect_hz: float = 50.0
    start_ts_ns: int = 1_000_000_000_000  # stream epoch, arbitrary but > 0
    cause_topic: str = "sim.cause"
    effect_topic: str = "sim.effect"
    cause_state: str = "interaction"

    def validate(self) -> None:
        if self.cause_hz <= 0 or self.effect_hz <= 0:
            raise SimError("sample rates must be > 0")
        if self.tau_mean_s <= 0:
            raise SimError("tau_mean must be > 0")
        if self.run_duration_s <= 0:
            raise SimError("run_duration must be > 0")
        if len(self.class_means) != self.cause_channels:
            raise SimError("class_means length must equal cause_channels")
        for t, shift in self.drift_schedule:
            if not 0 <= t <= self.run_duration_s:
                raise SimError(f"drift time {t} outside run duration")
            if len(shift) != self.cause_channels:
                raise SimError("drift shift length must equal cause_channels")

    def channel_names(self) -> list[str]:
        return [f"c{i}" for i in range(self.cause_channels)]


@dataclass
class GroundTruthEvent:
    event_id: str
    cause_state: str
    cause_start_ts_ns: int
    cause_end_ts_ns: int
    true_tau_ns: int
    effect_transition_ts_ns: int
    effect_state: str

    def to_dict(self) -> dict:
        return {
            "event_id": self.event_id, "cause_state": self.cause_state,
            "cause_start_ts_ns": self.cause_start_ts_ns,
            "cause_end_ts_ns": self.cause_end_ts_ns,
            "true_tau_ns": self.true_tau_ns,
            "effect_transition_ts_ns": self.effect_transition_ts_ns,
            "effect_state": self.effect_state,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "GroundTruthEvent":
        return cls(obj["event_id"], obj["cause_state"],
                   int(obj["cause_start_ts_ns"]), int(obj["cause_end_ts_ns"]),
                   int(obj["true_tau_ns"]), int(obj["effect_transition_ts_ns"]),
                   obj["effect_state"])


@dataclass
class GroundTruthLog:
    config: SimConfig
    events: list[GroundTruthEvent]

    def save_jsonl(self, path: Path) -> None:
        with Path(path).open("w", encoding="utf-8") as fh:
            for ev in self.events:
                fh.write(json.dumps(ev.to_dict(), separators=(",", ":")) + "\n")


def _draw_event_times(cfg: SimConfig, rng: np.random.Generator) -> np.ndarray:
    """Event start times (s), separated enough that windows never overlap."""
    min_sep = cfg.cause_duration_s + cfg.tau_mean_s + 4 * cfg.tau_sigma_s + 2.0
    lead = cfg.cause_duration_s + 1.0
    tail = cfg.tau_mean_s + 4 * cfg.tau_sigma_s + 1.0
    usable = cfg.run_duration_s - lead - tail
    if cfg.event_count is not None:
        n = cfg.event_count
    else:
        n = int(cfg.event_rate_per_hour * cfg.run_duration_s / 3600.0)
    if n == 0:
        return np.array([])
    if n * min_sep > usable:
        raise SimError(
            f"{n} events do not fit in {cfg.run_duration_s}s at separation "
            f"{min_sep:.1f}s")
    # place n events on a jittered regular grid to guarantee separation
    slot = usable / n
    starts = lead + np.arange(n) * slot
    jitter = rng.uniform(0.0, max(0.0, slot - min_sep), size=n)
    return starts + jitter


def _draw_tau(cfg: SimConfig, rng: np.random.Generator, n: int) -> np.ndarray:
    """Truncated Gaussian, resampled until positive."""
    tau = rng.normal(cfg.tau_mean_s, cfg.tau_sigma_s, size=n)
    for i in range(n):
        while tau[i] <= 0.05:
            tau[i] = rng.normal(cfg.tau_mean_s, cfg.tau_sigma_s)
    return tau


def _drift_at(cfg: SimConfig, t_s: float) -> np.ndarray:
    shift = np.zeros(cfg.cause_channels)
    for when, vec in cfg.drift_schedule:
        if t_s >= when:
            shift += np.asarray(vec)
    return shift


def run_sim(cfg: SimConfig, broker: Optional[Broker] = None) -> GroundTruthLog:
    """Generate both streams and the ground-truth log.

    When a broker is given the streams are published to cfg.cause_topic
    and cfg.effect_topic; the log is returned either way.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    starts = _draw_event_times(cfg, rng)
    taus = _draw_tau(cfg, rng, len(starts))

    events: list[GroundTruthEvent] = []
    for i, (start, tau) in enumerate(zip(starts, taus)):
        cause_start = cfg.start_ts_ns + int(start * SEC)
        cause_end = cause_start + int(cfg.cause_duration_s * SEC)
        true_tau = int(tau * SEC)
        events.append(GroundTruthEvent(
            event_id=f"ev{i:05d}",
            cause_state=cfg.cause_state,
            cause_start_ts_ns=cause_start,
            cause_end_ts_ns=cause_end,
            true_tau_ns=true_tau,
            effect_transition_ts_ns=cause_end + true_tau,
            effect_state="rising" if i % 2 == 0 else "falling",
        ))

    if broker is not None:
        broker.ensure_topic(cfg.cause_topic)
        broker.ensure_topic(cfg.effect_topic)
        _publish_cause(cfg, broker, events, rng)
        _publish_effect(cfg, broker, events, rng)
    return GroundTruthLog(config=cfg, events=events)


def _publish_cause(cfg: SimConfig, broker: Broker,
                   events: list[GroundTruthEvent],
                   rng: np.random.Generator) -> None:
    n = int(cfg.run_duration_s * cfg.cause_hz)
    ts = cfg.start_ts_ns + (np.arange(n) * (SEC / cfg.cause_hz)).astype(np.int64)
    values = rng.normal(0.0, cfg.class_sigma, size=(n, cfg.cause_channels))
    base_means = np.asarray(cfg.class_means)
    windows = [(e.cause_start_ts_ns, e.cause_end_ts_ns) for e in events]
    wi = 0
    in_window = np.zeros(n, dtype=bool)
    for i in range(n):
        while wi < len(windows) and ts[i] > windows[wi][1]:
            wi += 1
        if wi < len(windows) and windows[wi][0] <= ts[i] <= windows[wi][1]:
            in_window[i] = True
    t_s = (ts - cfg.start_ts_ns) / SEC
    for i in np.nonzero(in_window)[0]:
        values[i] += base_means + _drift_at(cfg, float(t_s[i]))
    names = cfg.channel_names()
    for i in range(n):
        broker.publish(SampleEnvelope(
            topic=cfg.cause_topic, source_id="sim-cause", seq=i,
            timestamp_ns=int(ts[i]),
            payload={name: round(float(values[i, j]), 6)
                     for j, name in enumerate(names)}))


def _publish_effect(cfg: SimConfig, broker: Broker,
                    events: list[GroundTruthEvent],
                    rng: np.random.Generator) -> None:
    n = int(cfg.run_duration_s * cfg.effect_hz)
    ts = cfg.start_ts_ns + (np.arange(n) * (SEC / cfg.effect_hz)).astype(np.int64)
    transitions = np.array([e.effect_transition_ts_ns for e in events])
    level = np.searchsorted(transitions, ts, side="right") % 2
    values = level * cfg.effect_step_height
    if cfg.effect_noise_sigma > 0:
        values = values + rng.normal(0.0, cfg.effect_noise_sigma, size=n)
    for i in range(n):
        broker.publish(SampleEnvelope(
            topic=cfg.effect_topic, source_id="sim-effect", seq=i,
            timestamp_ns=int(ts[i]),
            payload={"level": round(float(values[i]), 6)}))


# ------------------------------------------------------------ oracles


def oracle_esd_events(log: GroundTruthLog, node_id: str = "effect",
                      topic: Optional[str] = None) -> list[EffectEvent]:
    """Perfect effect events straight from the ground truth."""
    topic = topic or log.config.effect_topic
    return [EffectEvent(
        node_id=node_id, state=ev.effect_state,
        transition_ts_ns=ev.effect_transition_ts_ns,
        confidence=1.0,
        feature_ref=(topic, ev.effect_transition_ts_ns - SEC,
                     ev.effect_transition_ts_ns + SEC))
        for ev in log.events]


class OracleItm:
    """Exact interaction time, looked up by the effect transition time."""

    def __init__(self, log: GroundTruthLog):
        self._by_ts = {ev.effect_transition_ts_ns: ev.true_tau_ns
                       for ev in log.events}

    def infer(self, events: list[EffectEvent]) -> int:
        first = min(events, key=lambda e: e.transition_ts_ns)
        try:
            return self._by_ts[first.transition_ts_ns]
        except KeyError:
            raise SimError(
                f"no ground-truth event at ts {first.transition_ts_ns}") from None


# --------------------------------------------------------- evaluation


@dataclass
class EvalReport:
    matched: int
    missed: int
    spurious: int
    label_accuracy: float
    mean_iou: float
    per_record_iou: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"matched": self.matched, "missed": self.missed,
                "spurious": self.spurious,
                "label_accuracy": self.label_accuracy,
                "mean_iou": self.mean_iou}


def interval_iou(a0: int, a1: int, b0: int, b1: int) -> float:
    inter = max(0, min(a1, b1) - max(a0, b0))
    union = max(a1, b1) - min(a0, b0)
    return inter / union if union > 0 else 0.0


def eval_report(records: list[SelfLabelRecord], log: GroundTruthLog,
                tolerance_ns: int) -> EvalReport:
    """Greedy time-proximity matching of positive records to events."""
    positives = [r for r in records if r.polarity == "positive"]
    candidates = []
    for ri, rec in enumerate(positives):
        for gi, ev in enumerate(log.events):
            dist = abs(rec.cause_end_ts_ns - ev.cause_end_ts_ns)
            if dist <= tolerance_ns:
                candidates.append((dist, ri, gi))
    candidates.sort()
    used_r: set[int] = set()
    used_g: set[int] = set()
    pairs: list[tuple[int, int]] = []
    for _dist, ri, gi in candidates:
        if ri in used_r or gi in used_g:
            continue
        used_r.add(ri)
        used_g.add(gi)
        pairs.append((ri, gi))
    ious = []
    correct = 0
    for ri, gi in pairs:
        rec = positives[ri]
        ev = log.events[gi]
        r0, r1 = rec.window()
        ious.append(interval_iou(r0, r1, ev.cause_start_ts_ns,
                                 ev.cause_end_ts_ns))
        if rec.cause_state == ev.cause_state:
            correct += 1
    matched = len(pairs)
    return EvalReport(
        matched=matched,
        missed=len(log.events) - matched,
        spurious=len(positives) - matched,
        label_accuracy=correct / matched if matched else 0.0,
        mean_iou=float(np.mean(ious)) if ious else 0.0,
        per_record_iou=ious,
    )
