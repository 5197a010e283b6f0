"""Process wiring: build the full service stack and run the HTTP server."""

from __future__ import annotations

import threading
import time
from pathlib import Path
from typing import Optional

import uvicorn

from .broker import Broker
from .http_api import AppState, DEFAULT_TOKEN, create_app
from .kg import KgStore, printer_demo_graph
from .models import (DatasetStore, ItmLookup, ItmLookupEntry, ModelRegistry,
                     Trainer, TrainerPolicy, TrainConfig)
from .registry import ServiceRegistry
from .slb import SelfLabelStore, SlbEngine, SlbError


def build_state(data_dir: str | Path,
                auth_token: str = DEFAULT_TOKEN,
                trainer_policy: Optional[TrainerPolicy] = None,
                itm_entries: Optional[dict[str, list[ItmLookupEntry]]] = None,
                load_demo_kg: bool = True) -> AppState:
    data_dir = Path(data_dir)
    data_dir.mkdir(parents=True, exist_ok=True)
    broker = Broker(data_dir)
    kg = KgStore(persist_path=data_dir / "kg.json")
    if load_demo_kg and not kg.nodes:
        kg.import_json(printer_demo_graph())
        kg.save()
    services = ServiceRegistry(persist_path=data_dir / "services.json")
    slb_store = SelfLabelStore(persist_path=data_dir / "self_labels.jsonl")
    dataset = DatasetStore(artifacts_dir=data_dir / "artifacts")
    models = ModelRegistry(artifacts_dir=data_dir / "artifacts", broker=broker)
    trainer = Trainer(dataset, models, TrainConfig())
    policy = trainer_policy or TrainerPolicy()

    itms = {"itm-default": ItmLookup([], default_tau_ns=10**9)}
    for ref, entries in (itm_entries or {}).items():
        itms[ref] = ItmLookup(entries)

    def itm_resolver(ref: str):
        itm = itms.get(ref)
        if itm is None:
            raise SlbError(f"unknown ITM {ref!r}")
        return itm

    engine = SlbEngine(broker, kg, slb_store, itm_resolver,
                       sample_sink=dataset.add)
    state = AppState(
        broker=broker, services=services, kg=kg, engine=engine,
        slb_store=slb_store, dataset=dataset, models=models,
        trainer=trainer, trainer_policy=policy, auth_token=auth_token)
    state.itms = itms  # available for later registration
    return state


class ServerHandle:
    """uvicorn in a daemon thread, for serve mode, benches and tests."""

    def __init__(self, state: AppState, host: str = "127.0.0.1",
                 port: int = 8787, log_level: str = "warning"):
        self.state = state
        self.host = host
        self.port = port
        app = create_app(state)
        config = uvicorn.Config(app, host=host, port=port,
                                log_level=log_level, access_log=False)
        self.server = uvicorn.Server(config)
        self.thread = threading.Thread(target=self.server.run, daemon=True)
        self._trainer_stop = threading.Event()
        self._trainer_thread: Optional[threading.Thread] = None

    @property
    def base_url(self) -> str:
        return f"http://{self.host}:{self.port}"

    def start(self, timeout: float = 10.0) -> "ServerHandle":
        self.thread.start()
        deadline = time.time() + timeout
        while not self.server.started:
            if time.time() > deadline:
                raise RuntimeError("server failed to start")
            time.sleep(0.02)
        return self

    def start_trainer_loop(self, interval_s: float = 5.0) -> None:
        def loop():
            while not self._trainer_stop.wait(interval_s):
                self.state.trainer.poll(self.state.trainer_policy)
        self._trainer_thread = threading.Thread(target=loop, daemon=True)
        self._trainer_thread.start()

    def stop(self) -> None:
        self._trainer_stop.set()
        if self._trainer_thread:
            self._trainer_thread.join(timeout=2.0)
        self.state.engine.shutdown()
        self.server.should_exit = True
        self.thread.join(timeout=10.0)
        self.state.broker.close()
