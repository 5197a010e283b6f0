"""End-to-end pipelines: simulate, self-label, retrain, report.

Offline variants drive the workflow synchronously on the simulated
clock, so runs are deterministic and as fast as possible. The serve
path wires the same pieces onto live broker subscriptions instead.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .broker import Broker
from .features import LabeledSample, pool_envelopes
from .kg import KgNode, KgEdge, KgStore, TruthTable
from .models import (DatasetStore, EsdConfig, ItmLookup, ItmLookupEntry,
                     ModelRegistry, RefEsd, Trainer, TrainerPolicy,
                     TrainConfig, task_predict_weights, task_train)
from .simulator import (SEC, EvalReport, GroundTruthLog, OracleItm, SimConfig,
                        eval_report, oracle_esd_events, run_sim)
from .slb import (EffectEvent, SelfLabelStore, SlbWorkflow, WorkflowSpec)

EFFECT_NODE = "machine_power"
CAUSE_NODE = "operator"


def build_sim_kg(cfg: SimConfig, max_wait_ns: int = 10 * SEC) -> KgStore:
    kg = KgStore()
    kg.upsert_node(KgNode(CAUSE_NODE, "Operator",
                          [cfg.cause_state, "background"],
                          bindings={"topic": cfg.cause_topic}))
    kg.upsert_node(KgNode(EFFECT_NODE, "Machine power",
                          ["rising", "falling"],
                          bindings={"topic": cfg.effect_topic}))
    kg.upsert_edge(KgEdge("operator->machine", CAUSE_NODE, EFFECT_NODE))
    kg.put_truth_table(TruthTable(
        table_id="sim_power", cause_node=CAUSE_NODE,
        effect_nodes=[EFFECT_NODE],
        rows=[(("rising",), cfg.cause_state),
              (("falling",), cfg.cause_state)],
        max_wait_ns=max_wait_ns))
    return kg


def build_workflow_spec(cfg: SimConfig, workflow_id: str = "wf-sim",
                        max_wait_ns: int = 10 * SEC,
                        negative_tau_ns: Optional[int] = None) -> WorkflowSpec:
    return WorkflowSpec(
        workflow_id=workflow_id,
        cause_node=CAUSE_NODE,
        effect_nodes=[EFFECT_NODE],
        truth_table_id="sim_power",
        effect_event_topics=[f"{cfg.effect_topic}.events"],
        cause_stream_topic=cfg.cause_topic,
        itm_ref="itm-sim",
        output_topic=f"slb.{workflow_id}",
        cause_window_duration_ns=int(cfg.cause_duration_s * SEC),
        max_wait_ns=max_wait_ns,
        negative_cause_state="background",
        negative_tau_ns=(negative_tau_ns if negative_tau_ns is not None
                         else int(cfg.tau_mean_s * SEC)),
        cause_channels=cfg.channel_names(),
    )


def drive_workflow(workflow: SlbWorkflow, events: list[EffectEvent],
                   end_ns: int) -> None:
    """Feed events in transition order on the simulated clock."""
    for event in sorted(events, key=lambda e: e.transition_ts_ns):
        workflow.on_effect_event(event, arrival_ns=event.transition_ts_ns)
        workflow.scan_fifo(event.transition_ts_ns)
    workflow.stop(end_ns)


def ref_esd_events(cfg: SimConfig, broker: Broker,
                   negative_rate_per_hour: float = 0.0,
                   threshold: Optional[float] = None,
                   seed: int = 1234) -> list[EffectEvent]:
    """Run the reference detector over the persisted effect stream."""
    dt = int(SEC / cfg.effect_hz)
    esd = RefEsd(EsdConfig(
        input_topic=cfg.effect_topic,
        pre_window_ns=int(0.4 * SEC),
        post_window_ns=int(0.4 * SEC),
        threshold=(threshold if threshold is not None
                   else cfg.effect_step_height / 2),
        min_gap_ns=2 * SEC,
        node_id=EFFECT_NODE,
        negative_rate_per_hour=negative_rate_per_hour,
        background_window_ns=int(cfg.cause_duration_s * SEC),
    ), sample_interval_ns=dt)
    rng = np.random.default_rng(seed)
    end = cfg.start_ts_ns + int(cfg.run_duration_s * SEC)
    out: list[EffectEvent] = []
    for env in broker.query_range(cfg.effect_topic, 0, end).envelopes:
        out.extend(esd.feed(env.timestamp_ns, float(env.payload["level"])))
        neg = esd.sample_negative(env.timestamp_ns, rng)
        if neg is not None:
            out.append(neg)
    return out


@dataclass
class PipelineResult:
    report: EvalReport
    stats: dict
    records: list
    log: GroundTruthLog
    extra: dict = field(default_factory=dict)


def run_oracle_pipeline(cfg: SimConfig, broker: Broker) -> PipelineResult:
    """Simulator + oracle ESD/ITM + engine: the exactness path."""
    log = run_sim(cfg, broker)
    kg = build_sim_kg(cfg)
    spec = build_workflow_spec(cfg)
    store = SelfLabelStore()
    broker.ensure_topic(spec.output_topic)
    workflow = SlbWorkflow(spec, kg.get_table(spec.truth_table_id),
                           OracleItm(log), store, broker,
                           epoch_ns=cfg.start_ts_ns)
    end_ns = cfg.start_ts_ns + int(cfg.run_duration_s * SEC)
    drive_workflow(workflow, oracle_esd_events(log, node_id=EFFECT_NODE), end_ns)
    records = store.query(spec.workflow_id)
    report = eval_report(records, log,
                         tolerance_ns=int(cfg.cause_duration_s * SEC))
    return PipelineResult(report, workflow.stats, records, log)


def run_noisy_pipeline(cfg: SimConfig, broker: Broker) -> PipelineResult:
    """Simulator + reference ESD + Gaussian ITM at the true mean."""
    log = run_sim(cfg, broker)
    kg = build_sim_kg(cfg)
    spec = build_workflow_spec(cfg)
    itm = ItmLookup([
        ItmLookupEntry("rising", int(cfg.tau_mean_s * SEC)),
        ItmLookupEntry("falling", int(cfg.tau_mean_s * SEC)),
    ])
    store = SelfLabelStore()
    broker.ensure_topic(spec.output_topic)
    workflow = SlbWorkflow(spec, kg.get_table(spec.truth_table_id),
                           itm, store, broker, epoch_ns=cfg.start_ts_ns)
    events = ref_esd_events(cfg, broker)
    end_ns = cfg.start_ts_ns + int(cfg.run_duration_s * SEC)
    drive_workflow(workflow, events, end_ns)
    records = store.query(spec.workflow_id)
    report = eval_report(records, log,
                         tolerance_ns=int(cfg.cause_duration_s * SEC))
    return PipelineResult(report, workflow.stats, records, log)


def ground_truth_samples(cfg: SimConfig, broker: Broker, log: GroundTruthLog,
                         t0_ns: int, t1_ns: int,
                         seed: int = 7) -> list[LabeledSample]:
    """Oracle-labeled eval samples: true cause windows + background gaps."""
    names = cfg.channel_names()
    samples: list[LabeledSample] = []
    events = [e for e in log.events
              if t0_ns <= e.effect_transition_ts_ns <= t1_ns]
    for ev in events:
        envs = broker.query_range(cfg.cause_topic, ev.cause_start_ts_ns,
                                  ev.cause_end_ts_ns).envelopes
        feats = pool_envelopes(envs, names)
        if feats is not None:
            samples.append(LabeledSample(feats, ev.cause_state,
                                         provenance={"event_id": ev.event_id}))
    # background windows centered between consecutive events
    d_ns = int(cfg.cause_duration_s * SEC)
    for prev, nxt in zip(events, events[1:]):
        mid = (prev.effect_transition_ts_ns + nxt.cause_start_ts_ns) // 2
        envs = broker.query_range(cfg.cause_topic, mid - d_ns, mid).envelopes
        feats = pool_envelopes(envs, names)
        if feats is not None:
            samples.append(LabeledSample(feats, "background",
                                         provenance={"gap_after": prev.event_id}))
    return samples


def oracle_relabel(samples: list[LabeledSample], log: GroundTruthLog,
                   cfg: SimConfig) -> list[LabeledSample]:
    """Same feature windows, ground-truth labels: the supervised twin."""
    out = []
    for s in samples:
        w = s.provenance.get("window")
        label = "background"
        if w:
            w0, w1 = w
            for ev in log.events:
                inter = min(w1, ev.cause_end_ts_ns) - max(w0, ev.cause_start_ts_ns)
                if inter > 0.5 * (w1 - w0):
                    label = ev.cause_state
                    break
        out.append(LabeledSample(list(s.features), label,
                                 provenance=dict(s.provenance)))
    return out


def accuracy(weights, samples: list[LabeledSample]) -> float:
    if not samples:
        return 0.0
    good = sum(1 for s in samples
               if task_predict_weights(weights, s.features)[0] == s.label)
    return good / len(samples)


def run_adaptation_pipeline(cfg: SimConfig, broker: Broker,
                            min_new_samples: int = 100,
                            seed: int = 0) -> dict:
    """Drift study: frozen model degrades, self-label retraining recovers.

    Returns accuracies of the frozen pre-drift model, the retrained
    model, and the oracle-supervised twin, all on a post-drift
    ground-truth eval set.
    """
    if not cfg.drift_schedule:
        raise ValueError("adaptation run needs a drift schedule")
    drift_ns = cfg.start_ts_ns + int(cfg.drift_schedule[0][0] * SEC)
    log = run_sim(cfg, broker)
    kg = build_sim_kg(cfg)
    spec = build_workflow_spec(cfg)
    itm = ItmLookup([
        ItmLookupEntry("rising", int(cfg.tau_mean_s * SEC)),
        ItmLookupEntry("falling", int(cfg.tau_mean_s * SEC)),
    ])
    store = SelfLabelStore()
    dataset = DatasetStore()
    registry = ModelRegistry()
    train_cfg = TrainConfig(seed=seed)
    trainer = Trainer(dataset, registry, train_cfg)
    policy = TrainerPolicy(min_new_samples=min_new_samples,
                           ignore_hours=True, model_id="task")
    broker.ensure_topic(spec.output_topic)
    workflow = SlbWorkflow(spec, kg.get_table(spec.truth_table_id),
                           itm, store, broker,
                           sample_sink=dataset.add, epoch_ns=cfg.start_ts_ns)

    events = ref_esd_events(cfg, broker,
                            negative_rate_per_hour=cfg.event_rate_per_hour,
                            seed=seed + 1)
    events.sort(key=lambda e: e.transition_ts_ns)
    frozen = None
    pre_count = 0
    for event in events:
        if frozen is None and event.transition_ts_ns >= drift_ns:
            # first poll trains the pre-drift model and freezes it
            action = trainer.poll(TrainerPolicy(
                min_new_samples=1, ignore_hours=True, model_id="task"))
            if action.action != "trained":
                raise RuntimeError(f"pre-drift training failed: {action}")
            frozen = registry.deployed_weights("task")
            pre_count = dataset.count()
        workflow.on_effect_event(event, arrival_ns=event.transition_ts_ns)
        workflow.scan_fifo(event.transition_ts_ns)
    end_ns = cfg.start_ts_ns + int(cfg.run_duration_s * SEC)
    workflow.stop(end_ns)
    if frozen is None:
        raise RuntimeError("no events after the drift point")

    post_samples = dataset.count() - pre_count
    action = trainer.poll(policy)
    retrained = registry.deployed_weights("task")

    # oracle-supervised twin on the same windows
    twin_samples = oracle_relabel(dataset.usable_samples(), log, cfg)
    twin = task_train(twin_samples, train_cfg)

    eval_samples = ground_truth_samples(cfg, broker, log, drift_ns, end_ns)
    pre_eval = ground_truth_samples(cfg, broker, log, cfg.start_ts_ns, drift_ns)
    return {
        "frozen_pre_drift_accuracy": accuracy(frozen, pre_eval),
        "frozen_post_drift_accuracy": accuracy(frozen, eval_samples),
        "retrained_accuracy": accuracy(retrained, eval_samples),
        "oracle_twin_accuracy": accuracy(twin, eval_samples),
        "post_drift_samples": post_samples,
        "retrain_action": action.action,
        "retrained_ref": retrained.weights_ref,
        "frozen_ref": frozen.weights_ref,
        "n_eval": len(eval_samples),
        "stats": workflow.stats,
    }
