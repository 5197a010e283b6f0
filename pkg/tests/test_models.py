import threading
import time

import numpy as np
import pytest
from scipy import stats as scistats

from adaptloop.broker import Broker
from adaptloop.features import LabeledSample
from adaptloop.models import (DatasetStore, EsdConfig, ItmLookup,
                              ItmLookupEntry, ModelError, ModelRegistry,
                              RefEsd, TrainConfig, Trainer, TrainerPolicy,
                              dataset_version_id, softmax_loss_grad,
                              task_predict_weights, task_train)
from adaptloop.slb import EffectEvent

SEC = 10**9
BASE_TS = 10**12


def _esd(threshold=2.5, **kw):
    cfg = EsdConfig(input_topic="fx", pre_window_ns=int(0.4 * SEC),
                    post_window_ns=int(0.4 * SEC), threshold=threshold,
                    min_gap_ns=2 * SEC, **kw)
    return RefEsd(cfg, sample_interval_ns=SEC // 50)


def _feed_signal(esd, values, hz=50):
    events = []
    dt = SEC // hz
    for i, v in enumerate(values):
        events.extend(esd.feed(BASE_TS + i * dt, float(v)))
    return events


def test_esd_detects_clean_step_near_true_time():
    step_at = 500  # sample index; 10 s in
    values = [0.0] * step_at + [5.0] * 500
    events = _feed_signal(_esd(), values)
    assert len(events) == 1
    ev = events[0]
    assert ev.state == "rising"
    step_ts = BASE_TS + step_at * (SEC // 50)
    assert step_ts - SEC // 50 <= ev.transition_ts_ns <= step_ts + int(0.4 * SEC)
    assert ev.confidence > 0.5


def test_esd_detects_falling_step():
    values = [5.0] * 500 + [0.0] * 500
    events = _feed_signal(_esd(), values)
    assert len(events) == 1
    assert events[0].state == "falling"


def test_esd_flat_noise_raises_nothing():
    for seed in range(20):
        rng = np.random.default_rng(seed)
        events = _feed_signal(_esd(), rng.normal(0.0, 0.3, size=1500))
        assert events == [], f"false positive with seed {seed}"


def test_esd_min_gap_debounce():
    # second edge 0.5 s after the first: inside the 2 s gap
    values = [0.0] * 500 + [5.0] * 25 + [0.0] * 500
    events = _feed_signal(_esd(), values)
    assert len(events) == 1


def test_esd_steps_beyond_gap_both_fire():
    values = [0.0] * 500 + [5.0] * 250 + [0.0] * 500
    events = _feed_signal(_esd(), values)
    assert [e.state for e in events] == ["rising", "falling"]


def test_esd_background_windows_avoid_events():
    esd = _esd(background_window_ns=2 * SEC, background_guard_ns=2 * SEC)
    values = [0.0] * 1000 + [5.0] * 1000 + [0.0] * 1000
    _feed_signal(esd, values)
    assert esd.background  # flat stretches produced candidate windows
    guard = esd.config.background_guard_ns
    for w0, w1 in esd.background:
        for ev_ts in esd.event_times:
            assert w1 <= ev_ts - guard or w0 >= ev_ts + guard


def test_esd_negative_sampling_is_uniform():
    esd = _esd(negative_rate_per_hour=3.6e6)  # one per millisecond
    windows = [(BASE_TS + i * 10 * SEC, BASE_TS + (i * 10 + 4) * SEC)
               for i in range(8)]
    esd.background.extend(windows)
    rng = np.random.default_rng(7)
    counts = {w: 0 for w in windows}
    now = BASE_TS
    for _ in range(4000):
        now += 2 * 10**6
        ev = esd.sample_negative(now, rng)
        assert ev is not None
        assert ev.polarity == "negative"
        counts[(ev.feature_ref[1], ev.feature_ref[2])] += 1
    _chi, p = scistats.chisquare(list(counts.values()))
    assert p > 0.01


def test_esd_negative_sampling_paced():
    esd = _esd(negative_rate_per_hour=3600)  # one per second
    esd.background.append((BASE_TS, BASE_TS + SEC))
    rng = np.random.default_rng(0)
    assert esd.sample_negative(BASE_TS, rng) is not None
    assert esd.sample_negative(BASE_TS + SEC // 2, rng) is None
    assert esd.sample_negative(BASE_TS + 2 * SEC, rng) is not None


# ------------------------------------------------------------------ ITM


def _events(state="rising", ts=BASE_TS):
    return [EffectEvent(node_id="fx", state=state, transition_ts_ns=ts)]


def test_itm_point_estimate():
    itm = ItmLookup([ItmLookupEntry("rising", 2 * SEC, SEC)])
    assert itm.infer(_events()) == 2 * SEC


def test_itm_uses_earliest_event_state():
    itm = ItmLookup([ItmLookupEntry("rising", 2 * SEC),
                     ItmLookupEntry("falling", 3 * SEC)])
    events = [_events("falling", BASE_TS + SEC)[0], _events("rising", BASE_TS)[0]]
    assert itm.infer(events) == 2 * SEC


def test_itm_missing_key():
    with pytest.raises(ModelError):
        ItmLookup([]).infer(_events())
    assert ItmLookup([], default_tau_ns=7).infer(_events()) == 7


def test_itm_sampling_mode_is_seeded():
    a = ItmLookup([ItmLookupEntry("rising", 2 * SEC, SEC)],
                  sampling=True, seed=3)
    b = ItmLookup([ItmLookupEntry("rising", 2 * SEC, SEC)],
                  sampling=True, seed=3)
    draws_a = [a.infer(_events()) for _ in range(10)]
    draws_b = [b.infer(_events()) for _ in range(10)]
    assert draws_a == draws_b
    assert len(set(draws_a)) > 1
    assert all(d >= 0 for d in draws_a)


# --------------------------------------------------------- dataset store


def _sample(x, label):
    return LabeledSample(features=list(x), label=label)


def test_dataset_version_id_is_order_independent():
    a = [_sample([1.0, 2.0], "p"), _sample([3.0, 4.0], "q"),
         _sample([5.0, 6.0], "p")]
    assert dataset_version_id(a) == dataset_version_id(list(reversed(a)))
    assert dataset_version_id(a) != dataset_version_id(a[:2])


def test_snapshot_determinism_and_parent_chain():
    store = DatasetStore()
    store.add(_sample([1.0], "p"))
    store.add(_sample([2.0], "q"))
    v1 = store.snapshot()
    assert store.snapshot().version_id == v1.version_id  # no new data
    store.add(_sample([3.0], "p"))
    v2 = store.snapshot()
    assert v2.parent == v1.version_id
    assert v2.sample_count == 3
    assert len(store.version_samples(v1.version_id)) == 2
    with pytest.raises(ModelError):
        store.get_version("nope")


def test_empty_window_samples_are_not_usable():
    store = DatasetStore()
    store.add(_sample([1.0], "p"))
    store.add(LabeledSample(features=[], label="p", empty_window=True))
    assert store.count() == 1


# ----------------------------------------------------------- task model


def _separable(n=40, seed=0, shift=0.0):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        out.append(_sample(rng.normal([1.0 + shift, 0.0], 0.2), "active"))
        out.append(_sample(rng.normal([0.0, 1.0], 0.2), "idle"))
    return out


def test_train_separates_gaussian_classes():
    samples = _separable()
    weights = task_train(samples, TrainConfig(seed=1))
    assert weights.metrics["val_accuracy"] >= 0.95
    good = sum(1 for s in samples
               if task_predict_weights(weights, s.features)[0] == s.label)
    assert good / len(samples) >= 0.95


def test_weights_ref_is_deterministic():
    a = task_train(_separable(), TrainConfig(seed=1))
    b = task_train(_separable(), TrainConfig(seed=1))
    assert a.weights_ref == b.weights_ref
    assert np.array_equal(a.w, b.w)
    c = task_train(_separable(shift=0.5), TrainConfig(seed=1))
    assert c.weights_ref != a.weights_ref


@pytest.mark.parametrize("samples", [
    [],
    [_sample([1.0], "only")] * 30,
    [_sample([1.0], "p")] * 30 + [_sample([2.0], "q")] * 3,
    [_sample([1.0], "p")] * 30 + [_sample([2.0, 3.0], "q")] * 30,
])
def test_train_rejects_bad_datasets(samples):
    with pytest.raises(ModelError):
        task_train(samples)


def test_gradient_matches_central_finite_differences():
    rng = np.random.default_rng(5)
    n, d, k = 20, 4, 3
    x = rng.normal(size=(n, d))
    y = rng.integers(0, k, size=n)
    w = rng.normal(size=(d, k))
    b = rng.normal(size=k)
    l2 = 1e-3
    _loss, dw, db = softmax_loss_grad(w, b, x, y, l2)
    h = 1e-6
    for i in range(d):
        for j in range(k):
            wp, wm = w.copy(), w.copy()
            wp[i, j] += h
            wm[i, j] -= h
            num = (softmax_loss_grad(wp, b, x, y, l2)[0]
                   - softmax_loss_grad(wm, b, x, y, l2)[0]) / (2 * h)
            assert abs(num - dw[i, j]) <= 1e-4 * max(1.0, abs(num))
    for j in range(k):
        bp, bm = b.copy(), b.copy()
        bp[j] += h
        bm[j] -= h
        num = (softmax_loss_grad(w, bp, x, y, l2)[0]
               - softmax_loss_grad(w, bm, x, y, l2)[0]) / (2 * h)
        assert abs(num - db[j]) <= 1e-4 * max(1.0, abs(num))


def test_predict_rejects_wrong_length_and_breaks_ties_low():
    weights = task_train(_separable())
    with pytest.raises(ModelError):
        task_predict_weights(weights, [1.0])
    from adaptloop.models import TrainedWeights
    flat = TrainedWeights(weights_ref="x", labels=["a", "b"],
                          w=np.zeros((2, 2)), b=np.zeros(2), metrics={})
    label, score = task_predict_weights(flat, [1.0, 1.0])
    assert label == "a"  # equal scores resolve to the first sorted label
    assert score == pytest.approx(0.5)


# -------------------------------------------------------------- registry


def test_registry_deploy_and_control_events(tmp_path):
    broker = Broker(tmp_path)
    reg = ModelRegistry(artifacts_dir=tmp_path / "artifacts", broker=broker)
    weights = task_train(_separable())
    reg.register_weights(weights)
    with pytest.raises(ModelError):
        reg.deploy("task", "bogus")
    event = reg.deploy("task", weights.weights_ref)
    assert event.changed
    assert reg.deployed_ref("task") == weights.weights_ref
    assert not reg.deploy("task", weights.weights_ref).changed
    assert (tmp_path / "artifacts" /
            f"weights-{weights.weights_ref}.npz").exists()
    control = broker.query_range("control.deployments", 0, 2 * time.time_ns())
    assert len(control.envelopes) == 2
    assert control.envelopes[0].payload["weights_ref"] == weights.weights_ref
    broker.close()


def test_deploy_without_approval_keeps_pointer():
    reg = ModelRegistry()
    w1 = task_train(_separable(seed=1))
    w2 = task_train(_separable(seed=2, shift=0.3))
    reg.register_weights(w1)
    reg.register_weights(w2)
    reg.deploy("task", w1.weights_ref)
    event = reg.deploy("task", w2.weights_ref, approve=False)
    assert not event.changed
    assert reg.deployed_ref("task") == w1.weights_ref


def test_concurrent_predict_during_redeploy():
    reg = ModelRegistry()
    w1 = task_train(_separable(seed=1))
    w2 = task_train(_separable(seed=2, shift=0.3))
    by_ref = {w.weights_ref: w for w in (w1, w2)}
    reg.register_weights(w1)
    reg.register_weights(w2)
    reg.deploy("task", w1.weights_ref)
    stop = threading.Event()
    errors = []

    def worker():
        while not stop.is_set():
            try:
                label, _score, ref = reg.predict("task", [0.9, 0.1])
                expect, _ = task_predict_weights(by_ref[ref], [0.9, 0.1])
                if label != expect:
                    errors.append(f"label {label} from {ref}")
            except Exception as exc:  # noqa: BLE001
                errors.append(repr(exc))

    threads = [threading.Thread(target=worker) for _ in range(4)]
    for t in threads:
        t.start()
    for i in range(200):
        reg.deploy("task", (w1 if i % 2 else w2).weights_ref)
    stop.set()
    for t in threads:
        t.join()
    assert not errors


# --------------------------------------------------------------- trainer


def _loaded_trainer(n=40):
    dataset = DatasetStore()
    for s in _separable(n):
        dataset.add(s)
    reg = ModelRegistry()
    return Trainer(dataset, reg, TrainConfig(seed=0)), dataset, reg


def test_trainer_sample_count_gate():
    trainer, _dataset, reg = _loaded_trainer(n=10)  # 20 samples
    policy = TrainerPolicy(min_new_samples=100, ignore_hours=True)
    assert trainer.poll(policy).action == "none"
    assert reg.deployed_ref("task") is None


def test_trainer_trains_and_deploys():
    trainer, dataset, reg = _loaded_trainer()
    policy = TrainerPolicy(min_new_samples=10, ignore_hours=True)
    action = trainer.poll(policy)
    assert action.action == "trained"
    assert reg.deployed_ref("task") == action.weights_ref
    assert dataset.get_version(action.version_id).sample_count == 80
    # nothing new: the next poll is a no-op
    assert trainer.poll(policy).action == "none"


def test_trainer_respects_allowed_hours():
    trainer, _dataset, _reg = _loaded_trainer()
    policy = TrainerPolicy(min_new_samples=10, allowed_hours=(0, 6))
    noon = time.mktime((2026, 1, 1, 12, 0, 0, 0, 0, -1))
    assert trainer.poll(policy, now=noon).action == "none"
    night = time.mktime((2026, 1, 1, 2, 0, 0, 0, 0, -1))
    assert trainer.poll(policy, now=night).action == "trained"


def test_trainer_hours_wrap_midnight():
    trainer, _dataset, _reg = _loaded_trainer()
    policy = TrainerPolicy(min_new_samples=10, allowed_hours=(22, 4))
    late = time.mktime((2026, 1, 1, 23, 0, 0, 0, 0, -1))
    assert trainer.poll(policy, now=late).action == "trained"


def test_trainer_approval_flow():
    trainer, _dataset, reg = _loaded_trainer()
    policy = TrainerPolicy(min_new_samples=10, ignore_hours=True,
                           require_approval=True)
    assert trainer.poll(policy).action == "pending_approval"
    assert reg.deployed_ref("task") is None
    assert not trainer.approve("other-model")
    assert trainer.approve("task")
    assert trainer.poll(policy).action == "trained"
    assert reg.deployed_ref("task") is not None


def test_training_failure_keeps_prior_deployment():
    dataset = DatasetStore()
    for s in _separable():
        dataset.add(s)
    reg = ModelRegistry()
    trainer = Trainer(dataset, reg, TrainConfig(seed=0))
    policy = TrainerPolicy(min_new_samples=10, ignore_hours=True)
    first = trainer.poll(policy)
    assert first.action == "trained"
    # poison the new increment: too few samples of a fresh label
    for _ in range(15):
        dataset.add(_sample([9.0, 9.0], "rare" + "x"))
    dataset.add(_sample([8.0, 8.0], "tiny"))
    action = trainer.poll(policy)
    assert action.action == "none"
    assert "failed" in action.detail
    assert reg.deployed_ref("task") == first.weights_ref
