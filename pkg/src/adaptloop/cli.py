"""Single entry point: serve, simulate, manage workflows, bench, eval."""

from __future__ import annotations

import json
import os
import sys
import tempfile
from pathlib import Path

import click
import httpx

from .bench import bench_broker, bench_edge, bench_http_publish
from .broker import Broker
from .pipeline import (run_adaptation_pipeline, run_noisy_pipeline,
                       run_oracle_pipeline)
from .http_api import DEFAULT_TOKEN
from .serve import ServerHandle, build_state
from .simulator import SEC, SimConfig, run_sim

DEFAULT_DATA_DIR = os.environ.get("ADAPTLOOP_DATA_DIR", "./adaptloop-data")


def _emit(obj: dict, as_json: bool) -> None:
    if as_json:
        click.echo(json.dumps(obj, indent=2, default=str))
    else:
        for key, value in obj.items():
            click.echo(f"  {key:32} {value}")


def _load_sim_config(path: str | None, **overrides) -> SimConfig:
    obj = {}
    if path:
        obj = json.loads(Path(path).read_text())
    obj.update({k: v for k, v in overrides.items() if v is not None})
    known = set(SimConfig.__dataclass_fields__)
    cfg = SimConfig(**{k: v for k, v in obj.items() if k in known})
    if cfg.drift_schedule:
        cfg.drift_schedule = [(float(t), list(v)) for t, v in cfg.drift_schedule]
    return cfg


@click.group()
def main():
    """Desk-scale self-labeling IoT platform."""


@main.command()
@click.option("--config", "config_path", type=click.Path(exists=True),
              help="JSON file with auth_token / trainer_policy overrides.")
@click.option("--data-dir", default=DEFAULT_DATA_DIR, show_default=True)
@click.option("--listen", default="127.0.0.1:8787", show_default=True)
@click.option("--log-level", default="warning", show_default=True)
def serve(config_path, data_dir, listen, log_level):
    """Run broker, KG, engine, models and the HTTP API."""
    cfg = json.loads(Path(config_path).read_text()) if config_path else {}
    policy = None
    if "trainer_policy" in cfg:
        from .models import TrainerPolicy
        known = set(TrainerPolicy.__dataclass_fields__)
        fields = {k: v for k, v in cfg["trainer_policy"].items() if k in known}
        if "allowed_hours" in fields:
            fields["allowed_hours"] = tuple(fields["allowed_hours"])
        policy = TrainerPolicy(**fields)
    host, port = listen.rsplit(":", 1)
    state = build_state(data_dir,
                        auth_token=cfg.get("auth_token", DEFAULT_TOKEN),
                        trainer_policy=policy)
    if "sse_buffer_cap" in cfg:
        state.sse_buffer_cap = int(cfg["sse_buffer_cap"])
    handle = ServerHandle(state, host=host, port=int(port),
                          log_level=log_level)
    handle.start()
    handle.start_trainer_loop()
    click.echo(f"listening on {handle.base_url} (data dir: {data_dir})")
    try:
        handle.thread.join()
    except KeyboardInterrupt:
        handle.stop()


@main.command()
@click.option("--config", "config_path", type=click.Path(exists=True))
@click.option("--data-dir", default=DEFAULT_DATA_DIR, show_default=True)
@click.option("--seed", type=int)
@click.option("--duration", "run_duration_s", type=float)
@click.option("--ground-truth-out", type=click.Path())
def sim(config_path, data_dir, seed, run_duration_s, ground_truth_out):
    """Generate synthetic cause/effect streams into the local broker."""
    cfg = _load_sim_config(config_path, seed=seed,
                           run_duration_s=run_duration_s)
    broker = Broker(data_dir)
    log = run_sim(cfg, broker)
    broker.close()
    if ground_truth_out:
        log.save_jsonl(Path(ground_truth_out))
    click.echo(f"generated {len(log.events)} events "
               f"over {cfg.run_duration_s}s (seed {cfg.seed})")


@main.group()
def workflow():
    """Manage self-labeling workflows on a running server."""


@workflow.command("start")
@click.option("--server", default="http://127.0.0.1:8787", show_default=True)
@click.option("--spec", "spec_path", type=click.Path(exists=True), required=True)
def workflow_start(server, spec_path):
    body = json.loads(Path(spec_path).read_text())
    r = httpx.post(f"{server}/slb/workflows", json=body, timeout=10.0)
    click.echo(r.text)
    sys.exit(0 if r.status_code == 200 else 1)


@workflow.command("stop")
@click.option("--server", default="http://127.0.0.1:8787", show_default=True)
@click.argument("workflow_id")
def workflow_stop(server, workflow_id):
    r = httpx.delete(f"{server}/slb/workflows/{workflow_id}", timeout=10.0)
    click.echo(r.text)
    sys.exit(0 if r.status_code == 200 else 1)


@workflow.command("stats")
@click.option("--server", default="http://127.0.0.1:8787", show_default=True)
@click.argument("workflow_id")
def workflow_stats(server, workflow_id):
    r = httpx.get(f"{server}/slb/workflows/{workflow_id}/stats", timeout=10.0)
    click.echo(r.text)
    sys.exit(0 if r.status_code == 200 else 1)


@main.group()
def bench():
    """Throughput and latency characterization."""


@bench.command("broker")
@click.option("--duration", default=30.0, show_default=True)
@click.option("--json", "as_json", is_flag=True)
def bench_broker_cmd(duration, as_json):
    """In-process single producer/consumer pair, plus loopback HTTP."""
    with tempfile.TemporaryDirectory(prefix="adaptloop-bench-") as tmp:
        broker = Broker(tmp)
        result = bench_broker(broker, duration_s=duration)
        state = build_state(Path(tmp) / "http", load_demo_kg=False)
        handle = ServerHandle(state, port=_free_port()).start()
        http_result = bench_http_publish(handle.base_url, state.broker,
                                         duration_s=min(duration, 5.0))
        handle.stop()
        broker.close()
    ok = result.throughput_msg_s >= 100_000 and result.mean_latency_ms <= 1000
    _emit({"in_process": result.to_dict(),
           "loopback_http": http_result.to_dict(),
           "reference_server_class": "182k msg/s producer, 679 ms mean delay; "
                                     "single consumer 388k msg/s",
           "pass": ok}, as_json)
    sys.exit(0 if ok else 1)


@bench.command("edge")
@click.option("--duration", default=15.0, show_default=True)
@click.option("--json", "as_json", is_flag=True)
def bench_edge_cmd(duration, as_json):
    """Standard sensor-node mix over loopback HTTP."""
    with tempfile.TemporaryDirectory(prefix="adaptloop-bench-") as tmp:
        state = build_state(tmp, load_demo_kg=False)
        handle = ServerHandle(state, port=_free_port()).start()
        result = bench_edge(handle.base_url, state.broker, duration_s=duration)
        handle.stop()
    ok = (result.throughput_msg_s >= 284 and result.lost == 0
          and result.mean_latency_ms <= 100)
    _emit({"edge_node": result.to_dict(),
           "reference_embedded": "284 msg/s, 250.2 byte, 31 ms mean delay",
           "pass": ok}, as_json)
    sys.exit(0 if ok else 1)


@main.command("eval")
@click.option("--mode", type=click.Choice(["oracle", "noisy", "adaptation"]),
              default="oracle", show_default=True)
@click.option("--config", "config_path", type=click.Path(exists=True))
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--json", "as_json", is_flag=True)
def eval_cmd(mode, config_path, seed, as_json):
    """Run the simulator -> workflow -> trainer -> report pipeline."""
    with tempfile.TemporaryDirectory(prefix="adaptloop-eval-") as tmp:
        broker = Broker(tmp)
        if mode == "oracle":
            cfg = _load_sim_config(config_path, seed=seed) if config_path \
                else SimConfig(seed=seed, run_duration_s=1200.0, event_count=100)
            result = run_oracle_pipeline(cfg, broker)
            out = {**result.report.to_dict(), "stats": result.stats}
            ok = (result.report.label_accuracy == 1.0
                  and result.report.missed == 0 and result.stats["evicted"] == 0)
        elif mode == "noisy":
            cfg = _load_sim_config(config_path, seed=seed) if config_path \
                else SimConfig(seed=seed, run_duration_s=2400.0,
                               event_count=200, tau_sigma_s=0.5,
                               effect_noise_sigma=0.25)
            result = run_noisy_pipeline(cfg, broker)
            out = {**result.report.to_dict(), "stats": result.stats}
            n = len(result.log.events)
            ok = ((result.report.missed + result.report.spurious) <= 0.05 * n
                  and result.report.mean_iou >= 0.7)
        else:
            cfg = _load_sim_config(config_path, seed=seed) if config_path \
                else SimConfig(
                    seed=seed, run_duration_s=2800.0, event_count=200,
                    tau_sigma_s=0.3, effect_noise_sigma=0.25,
                    drift_schedule=[(1400.0, [-1.0, 1.0])])
            out = run_adaptation_pipeline(cfg, broker, seed=seed)
            ok = (out["frozen_pre_drift_accuracy"]
                  - out["frozen_post_drift_accuracy"] >= 0.10
                  and abs(out["retrained_accuracy"]
                          - out["oracle_twin_accuracy"]) <= 0.03)
        broker.close()
    out["pass"] = ok
    _emit(out, as_json)
    sys.exit(0 if ok else 1)


@main.group()
def trainer():
    """Inspect and drive the retraining service."""


@trainer.command("status")
@click.option("--server", default="http://127.0.0.1:8787", show_default=True)
def trainer_status(server):
    r = httpx.get(f"{server}/trainer/status", timeout=10.0)
    click.echo(r.text)
    sys.exit(0 if r.status_code == 200 else 1)


@trainer.command("approve")
@click.option("--server", default="http://127.0.0.1:8787", show_default=True)
@click.option("--model-id", default="task", show_default=True)
def trainer_approve(server, model_id):
    r = httpx.post(f"{server}/trainer/approve",
                   json={"model_id": model_id}, timeout=60.0)
    click.echo(r.text)
    sys.exit(0 if r.status_code == 200 else 1)


def _free_port() -> int:
    import socket
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


if __name__ == "__main__":
    main()
