"""Reference computational models and the retraining machinery.

- RefEsd: streaming step detector over an effect signal. Compares the
  means of a pre and a post window around a sliding boundary; a margin
  above the threshold raises a rising/falling event. It also keeps a
  buffer of event-free background windows for negative sampling.
- ItmLookup: interaction-time model backed by a lookup table of
  (mu, sigma) per key; point estimates return mu, an optional sampling
  mode draws mu + sigma*z from a seeded RNG for evaluation studies.
- DatasetStore: content-addressed labeled-sample store with versioning;
  identical sample multisets hash to identical version ids.
- Linear task model: multinomial logistic regression over pooled
  window features, trained by full-batch gradient descent. Determinism
  is by seed; weights are content-addressed.
- ModelRegistry / Trainer: atomic weight deployment and the polling
  retrain loop (sample-count threshold, allowed hours, approval gate).
"""

from __future__ import annotations

import hashlib
import json
import logging
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .features import LabeledSample
from .slb import EffectEvent, NEGATIVE, POSITIVE

log = logging.getLogger(__name__)


class ModelError(Exception):
    pass


# ---------------------------------------------------------------- ESD


@dataclass
class EsdConfig:
    input_topic: str
    pre_window_ns: int
    post_window_ns: int
    threshold: float
    min_gap_ns: int
    node_id: str = "effect"
    rising_state: str = "rising"
    falling_state: str = "falling"
    background_buffer_len: int = 64
    negative_rate_per_hour: float = 0.0
    background_window_ns: int = 4 * 10**9
    background_guard_ns: int = 2 * 10**9

    def validate(self) -> None:
        if self.threshold <= 0:
            raise ModelError("threshold must be > 0")
        if self.pre_window_ns <= 0 or self.post_window_ns <= 0:
            raise ModelError("windows must be > 0")
        if self.negative_rate_per_hour < 0:
            raise ModelError("negative_rate must be >= 0")


class RefEsd:
    """Mean-shift step detector with running-sum windows.

    feed() consumes (ts_ns, value) samples in time order and returns
    any events raised. The reported transition timestamp is the window
    boundary plus half the post window, which centers the estimate on
    the true step for a clean edge. Confidence is a logistic of
    (margin - threshold) / threshold.
    """

    def __init__(self, config: EsdConfig, sample_interval_ns: int):
        config.validate()
        self.config = config
        self.dt = sample_interval_ns
        self.n_pre = max(1, config.pre_window_ns // sample_interval_ns)
        self.n_post = max(1, config.post_window_ns // sample_interval_ns)
        self.pre: deque[tuple[int, float]] = deque()
        self.post: deque[tuple[int, float]] = deque()
        self.sum_pre = 0.0
        self.sum_post = 0.0
        self.last_event_ts: Optional[int] = None
        # background bookkeeping
        self.background: deque[tuple[int, int]] = deque(
            maxlen=config.background_buffer_len)
        self._bg_window_start: Optional[int] = None
        self._last_neg_ts: Optional[int] = None
        self.event_times: list[int] = []

    def feed(self, ts_ns: int, value: float) -> list[EffectEvent]:
        cfg = self.config
        self.post.append((ts_ns, value))
        self.sum_post += value
        if len(self.post) > self.n_post:
            cross = self.post.popleft()
            self.sum_post -= cross[1]
            self.pre.append(cross)
            self.sum_pre += cross[1]
            if len(self.pre) > self.n_pre:
                old = self.pre.popleft()
                self.sum_pre -= old[1]
        if len(self.pre) < self.n_pre or len(self.post) < self.n_post:
            self._track_background(ts_ns)
            return []
        mean_pre = self.sum_pre / self.n_pre
        mean_post = self.sum_post / self.n_post
        margin = abs(mean_post - mean_pre)
        events: list[EffectEvent] = []
        if margin > cfg.threshold:
            boundary_ts = self.post[0][0]
            event_ts = boundary_ts + cfg.post_window_ns // 2
            if (self.last_event_ts is None
                    or event_ts - self.last_event_ts >= cfg.min_gap_ns):
                self.last_event_ts = event_ts
                self.event_times.append(event_ts)
                self._purge_background(event_ts)
                state = (cfg.rising_state if mean_post > mean_pre
                         else cfg.falling_state)
                conf = 1.0 / (1.0 + np.exp(-(margin - cfg.threshold)
                                           / cfg.threshold))
                events.append(EffectEvent(
                    node_id=cfg.node_id, state=state,
                    transition_ts_ns=event_ts, confidence=float(conf),
                    feature_ref=(cfg.input_topic,
                                 boundary_ts - cfg.pre_window_ns,
                                 boundary_ts + cfg.post_window_ns)))
            self._bg_window_start = None  # window touched an excursion
        self._track_background(ts_ns)
        return events

    def _purge_background(self, event_ts: int) -> None:
        guard = self.config.background_guard_ns
        kept = [(w0, w1) for w0, w1 in self.background
                if w1 <= event_ts - guard or w0 >= event_ts + guard]
        self.background.clear()
        self.background.extend(kept)

    def _track_background(self, ts_ns: int) -> None:
        cfg = self.config
        if self._bg_window_start is None:
            self._bg_window_start = ts_ns
            return
        if ts_ns - self._bg_window_start >= cfg.background_window_ns:
            w0, w1 = self._bg_window_start, ts_ns
            guard0 = w0 - cfg.background_guard_ns
            guard1 = w1 + cfg.background_guard_ns
            clean = all(not (guard0 <= t <= guard1) for t in self.event_times[-8:])
            if clean and (self.last_event_ts is None
                          or w0 > self.last_event_ts + cfg.background_guard_ns):
                self.background.append((w0, w1))
            self._bg_window_start = ts_ns

    def sample_negative(self, now_ns: int,
                        rng: np.random.Generator) -> Optional[EffectEvent]:
        """Uniform draw from the background buffer, paced to the rate."""
        cfg = self.config
        if cfg.negative_rate_per_hour <= 0 or not self.background:
            return None
        interval_ns = int(3600e9 / cfg.negative_rate_per_hour)
        if self._last_neg_ts is not None \
                and now_ns - self._last_neg_ts < interval_ns:
            return None
        self._last_neg_ts = now_ns
        idx = int(rng.integers(0, len(self.background)))
        w0, w1 = self.background[idx]
        return EffectEvent(
            node_id=cfg.node_id, state="background",
            transition_ts_ns=w1, confidence=1.0, polarity=NEGATIVE,
            feature_ref=(cfg.input_topic, w0, w1))


# ---------------------------------------------------------------- ITM


@dataclass
class ItmLookupEntry:
    key: str
    mu_ns: int
    sigma_ns: int = 0

    def validate(self) -> None:
        if self.mu_ns < 0 or self.sigma_ns < 0:
            raise ModelError("mu and sigma must be >= 0")


class ItmLookup:
    """Lookup-table + Gaussian interaction-time model.

    The key is the effect state of the earliest contributing event.
    Production inference returns the point estimate mu; sampling mode
    (evaluation only) draws mu + sigma * z from the seeded RNG.
    """

    def __init__(self, entries: list[ItmLookupEntry],
                 default_tau_ns: Optional[int] = None,
                 sampling: bool = False, seed: int = 0):
        for e in entries:
            e.validate()
        self.entries = {e.key: e for e in entries}
        self.default_tau_ns = default_tau_ns
        self.sampling = sampling
        self.rng = np.random.default_rng(seed)

    def infer(self, events: list[EffectEvent]) -> int:
        first = min(events, key=lambda e: e.transition_ts_ns)
        entry = self.entries.get(first.state)
        if entry is None:
            if self.default_tau_ns is None:
                raise ModelError(f"no ITM entry for state {first.state!r}")
            log.warning("ITM key %r missing; using default tau", first.state)
            return self.default_tau_ns
        if self.sampling and entry.sigma_ns > 0:
            tau = entry.mu_ns + entry.sigma_ns * float(self.rng.standard_normal())
            return max(0, int(tau))
        return entry.mu_ns


class FlakyItm:
    """Wrapper that fails the first n calls; used for fault injection."""

    def __init__(self, inner, fail_times: int):
        from .slb import ItmUnavailableError
        self.inner = inner
        self.fail_times = fail_times
        self._exc = ItmUnavailableError

    def infer(self, events):
        if self.fail_times > 0:
            self.fail_times -= 1
            raise self._exc("ITM down")
        return self.inner.infer(events)


# ------------------------------------------------------- dataset store


@dataclass
class DatasetVersion:
    version_id: str
    parent: Optional[str]
    sample_count: int
    created_ts: float

    def to_dict(self) -> dict:
        return {"version_id": self.version_id, "parent": self.parent,
                "sample_count": self.sample_count, "created_ts": self.created_ts}


class DatasetStore:
    """Content-addressed sample store with snapshot versioning."""

    def __init__(self, artifacts_dir: Optional[Path] = None):
        self._lock = threading.Lock()
        self.samples: list[LabeledSample] = []
        self.versions: dict[str, DatasetVersion] = {}
        self._version_samples: dict[str, list[LabeledSample]] = {}
        self._last_version: Optional[str] = None
        self.dir = Path(artifacts_dir) if artifacts_dir else None
        if self.dir:
            self.dir.mkdir(parents=True, exist_ok=True)

    def add(self, sample: LabeledSample) -> None:
        sample.validate()
        with self._lock:
            self.samples.append(sample)

    def usable_samples(self) -> list[LabeledSample]:
        with self._lock:
            return [s for s in self.samples if not s.empty_window]

    def count(self) -> int:
        return len(self.usable_samples())

    def snapshot(self) -> DatasetVersion:
        samples = self.usable_samples()
        version_id = dataset_version_id(samples)
        with self._lock:
            if version_id in self.versions:
                return self.versions[version_id]
            version = DatasetVersion(
                version_id=version_id, parent=self._last_version,
                sample_count=len(samples), created_ts=time.time())
            self.versions[version_id] = version
            self._version_samples[version_id] = list(samples)
            self._last_version = version_id
            if self.dir:
                path = self.dir / f"dataset-{version_id}.json"
                path.write_text(json.dumps(
                    {"version": version.to_dict(),
                     "samples": [s.to_dict() for s in samples]}))
            return version

    def get_version(self, version_id: str) -> DatasetVersion:
        with self._lock:
            v = self.versions.get(version_id)
            if v is None:
                raise ModelError(f"unknown dataset version {version_id!r}")
            return v

    def version_samples(self, version_id: str) -> list[LabeledSample]:
        with self._lock:
            if version_id not in self._version_samples:
                raise ModelError(f"unknown dataset version {version_id!r}")
            return list(self._version_samples[version_id])


def dataset_version_id(samples: list[LabeledSample]) -> str:
    """Hash of the sample multiset; order-independent by sorting keys."""
    keys = sorted(s.content_key() for s in samples)
    return hashlib.sha256("\n".join(keys).encode()).hexdigest()[:16]


# ------------------------------------------------------- task model


@dataclass
class TrainConfig:
    learning_rate: float = 0.5
    epochs: int = 300
    l2: float = 1e-4
    seed: int = 0
    val_fraction: float = 0.25
    min_samples_per_label: int = 10
    imbalance_warn_ratio: float = 50.0


@dataclass
class TrainedWeights:
    weights_ref: str
    labels: list[str]
    w: np.ndarray        # (n_features, n_labels)
    b: np.ndarray        # (n_labels,)
    metrics: dict


def softmax_loss_grad(w: np.ndarray, b: np.ndarray, x: np.ndarray,
                      y: np.ndarray, l2: float) -> tuple[float, np.ndarray, np.ndarray]:
    """Mean cross-entropy with L2 on w; returns (loss, dw, db)."""
    n = x.shape[0]
    logits = x @ w + b
    logits -= logits.max(axis=1, keepdims=True)
    expz = np.exp(logits)
    probs = expz / expz.sum(axis=1, keepdims=True)
    loss = -np.log(probs[np.arange(n), y] + 1e-12).mean() + 0.5 * l2 * (w ** 2).sum()
    grad = probs.copy()
    grad[np.arange(n), y] -= 1.0
    grad /= n
    dw = x.T @ grad + l2 * w
    db = grad.sum(axis=0)
    return float(loss), dw, db


def task_train(samples: list[LabeledSample],
               config: Optional[TrainConfig] = None) -> TrainedWeights:
    config = config or TrainConfig()
    if not samples:
        raise ModelError("empty dataset")
    labels = sorted({s.label for s in samples})
    if len(labels) < 2:
        raise ModelError("single-label dataset cannot be trained")
    counts = {lab: sum(1 for s in samples if s.label == lab) for lab in labels}
    for lab, cnt in counts.items():
        if cnt < config.min_samples_per_label:
            raise ModelError(
                f"label {lab!r} has {cnt} samples, need "
                f">= {config.min_samples_per_label}")
    if max(counts.values()) / max(1, min(counts.values())) > config.imbalance_warn_ratio:
        log.warning("label imbalance beyond 1:%s: %s",
                    config.imbalance_warn_ratio, counts)
    dims = {len(s.features) for s in samples}
    if len(dims) != 1:
        raise ModelError(f"inconsistent feature lengths {sorted(dims)}")
    label_idx = {lab: i for i, lab in enumerate(labels)}
    x = np.array([s.features for s in samples], dtype=np.float64)
    y = np.array([label_idx[s.label] for s in samples], dtype=np.int64)

    rng = np.random.default_rng(config.seed)
    perm = rng.permutation(len(samples))
    n_val = max(1, int(len(samples) * config.val_fraction))
    val_idx, train_idx = perm[:n_val], perm[n_val:]
    if len(train_idx) == 0:
        train_idx = perm
    xt, yt = x[train_idx], y[train_idx]
    xv, yv = x[val_idx], y[val_idx]

    w = rng.normal(0.0, 0.01, size=(x.shape[1], len(labels)))
    b = np.zeros(len(labels))
    for _ in range(config.epochs):
        _loss, dw, db = softmax_loss_grad(w, b, xt, yt, config.l2)
        w -= config.learning_rate * dw
        b -= config.learning_rate * db
    loss, _dw, _db = softmax_loss_grad(w, b, xt, yt, config.l2)
    val_pred = (xv @ w + b).argmax(axis=1)
    accuracy = float((val_pred == yv).mean())

    digest = hashlib.sha256()
    digest.update(np.ascontiguousarray(w).tobytes())
    digest.update(np.ascontiguousarray(b).tobytes())
    digest.update(json.dumps(labels).encode())
    ref = digest.hexdigest()[:16]
    return TrainedWeights(
        weights_ref=ref, labels=labels, w=w, b=b,
        metrics={"val_accuracy": accuracy, "train_loss": loss,
                 "n_train": int(len(train_idx)), "n_val": int(len(val_idx))})


def task_predict_weights(weights: TrainedWeights,
                         features: list[float]) -> tuple[str, float]:
    x = np.asarray(features, dtype=np.float64)
    if x.shape[0] != weights.w.shape[0]:
        raise ModelError(
            f"feature length {x.shape[0]} != expected {weights.w.shape[0]}")
    logits = x @ weights.w + weights.b
    logits -= logits.max()
    probs = np.exp(logits)
    probs /= probs.sum()
    # argmax with lowest-label-index tie break (labels are sorted)
    idx = int(np.argmax(probs))
    return weights.labels[idx], float(probs[idx])


# --------------------------------------------------------- registry


@dataclass
class DeploymentEvent:
    model_id: str
    weights_ref: str
    ts_ns: int
    changed: bool


class ModelRegistry:
    """Weight artifacts plus the exactly-one-deployed pointer per model."""

    def __init__(self, artifacts_dir: Optional[Path] = None,
                 broker=None, control_topic: str = "control.deployments"):
        self._lock = threading.Lock()
        self._weights: dict[str, TrainedWeights] = {}
        self._deployed: dict[str, str] = {}
        self.events: list[DeploymentEvent] = []
        self.dir = Path(artifacts_dir) if artifacts_dir else None
        self.broker = broker
        self.control_topic = control_topic
        self._seq = 0
        if self.dir:
            self.dir.mkdir(parents=True, exist_ok=True)
        if broker is not None:
            broker.ensure_topic(control_topic)

    def register_weights(self, weights: TrainedWeights) -> str:
        with self._lock:
            self._weights[weights.weights_ref] = weights
            if self.dir:
                path = self.dir / f"weights-{weights.weights_ref}.npz"
                np.savez(path, w=weights.w, b=weights.b,
                         labels=np.array(weights.labels))
            return weights.weights_ref

    def deploy(self, model_id: str, weights_ref: str,
               approve: bool = True) -> DeploymentEvent:
        with self._lock:
            if weights_ref not in self._weights:
                raise ModelError(f"unknown weights_ref {weights_ref!r}")
            changed = approve and self._deployed.get(model_id) != weights_ref
            if approve:
                self._deployed[model_id] = weights_ref
            event = DeploymentEvent(model_id, weights_ref,
                                    time.time_ns(), changed)
            self.events.append(event)
            if self.broker is not None:
                self._seq += 1
                self.broker.publish_payload(
                    self.control_topic, "model-registry", self._seq,
                    event.ts_ns, {"model_id": model_id,
                                  "weights_ref": weights_ref,
                                  "changed": changed})
            return event

    def deployed_ref(self, model_id: str) -> Optional[str]:
        with self._lock:
            return self._deployed.get(model_id)

    def deployed_weights(self, model_id: str) -> TrainedWeights:
        with self._lock:
            ref = self._deployed.get(model_id)
            if ref is None:
                raise ModelError(f"no deployed weights for {model_id!r}")
            return self._weights[ref]

    def predict(self, model_id: str,
                features: list[float]) -> tuple[str, float, str]:
        # snapshot under the lock, predict outside: in-flight calls
        # finish on the weights that were deployed when they started
        weights = self.deployed_weights(model_id)
        label, score = task_predict_weights(weights, features)
        return label, score, weights.weights_ref


# ---------------------------------------------------------- trainer


@dataclass
class TrainerPolicy:
    min_new_samples: int = 100
    allowed_hours: tuple[int, int] = (0, 6)  # local wall-clock window
    require_approval: bool = False
    ignore_hours: bool = False  # test/bench override
    model_id: str = "task"
    auto_deploy: bool = True


@dataclass
class TrainerAction:
    action: str  # none | pending_approval | trained
    version_id: Optional[str] = None
    weights_ref: Optional[str] = None
    detail: str = ""


class Trainer:
    """Decoupled retrain loop over the dataset store."""

    def __init__(self, dataset: DatasetStore, registry: ModelRegistry,
                 train_config: Optional[TrainConfig] = None):
        self.dataset = dataset
        self.registry = registry
        self.train_config = train_config or TrainConfig()
        self._lock = threading.Lock()
        self._trained_counts: dict[str, int] = {}
        self._approved: set[str] = set()
        self.pending_approval: dict[str, bool] = {}
        self.history: list[TrainerAction] = []

    def _within_hours(self, policy: TrainerPolicy,
                      now: Optional[float]) -> bool:
        if policy.ignore_hours:
            return True
        hour = time.localtime(now if now is not None else time.time()).tm_hour
        lo, hi = policy.allowed_hours
        if lo <= hi:
            return lo <= hour < hi
        return hour >= lo or hour < hi

    def approve(self, model_id: str) -> bool:
        with self._lock:
            if self.pending_approval.get(model_id):
                self.pending_approval[model_id] = False
                self._approved.add(model_id)
                return True
            return False

    def poll(self, policy: TrainerPolicy,
             now: Optional[float] = None) -> TrainerAction:
        with self._lock:
            count = self.dataset.count()
            new = count - self._trained_counts.get(policy.model_id, 0)
            approved = policy.model_id in self._approved
            if new < policy.min_new_samples and not approved:
                return self._done(TrainerAction("none", detail=f"{new} new samples"))
            if not self._within_hours(policy, now):
                return self._done(TrainerAction("none", detail="outside allowed hours"))
            if policy.require_approval and not approved:
                self.pending_approval[policy.model_id] = True
                return self._done(TrainerAction("pending_approval"))
            if approved:
                self._approved.discard(policy.model_id)
            try:
                version = self.dataset.snapshot()
                weights = task_train(
                    self.dataset.version_samples(version.version_id),
                    self.train_config)
                self.registry.register_weights(weights)
                if policy.auto_deploy:
                    self.registry.deploy(policy.model_id, weights.weights_ref)
                self._trained_counts[policy.model_id] = count
                return self._done(TrainerAction(
                    "trained", version_id=version.version_id,
                    weights_ref=weights.weights_ref))
            except ModelError as exc:
                log.error("training failed, prior deployment untouched: %s", exc)
                return self._done(TrainerAction("none", detail=f"training failed: {exc}"))

    def _done(self, action: TrainerAction) -> TrainerAction:
        self.history.append(action)
        return action
