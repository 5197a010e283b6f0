"""HTTP surface: ingestion, SSE streaming, queries, and control APIs.

All timestamps on the wire are integer nanoseconds. The only
authenticated endpoint is POST /ingest (static bearer token); the rest
of the API is open, matching the desk-scale non-goals.
"""

from __future__ import annotations

import json
import threading
import time
from dataclasses import dataclass, field
from typing import Optional

from fastapi import FastAPI, Header, HTTPException, Request
from fastapi.responses import JSONResponse, StreamingResponse

from .broker import Broker, BrokerError, SeqRegressionError, UnknownTopicError
from .kg import KgEdge, KgNode, KgStore, TableConflictError, TruthTable, KgError
from .models import DatasetStore, ModelError, ModelRegistry, Trainer, TrainerPolicy
from .registry import (IllegalTransitionError, RegistryError,
                       ServiceDescriptor, ServiceRegistry)
from .slb import SelfLabelStore, SlbEngine, SlbError, WorkflowSpec

DEFAULT_TOKEN = "adaptloop-dev-token"
DEDUPE_WINDOW_NS = 60 * 10**9
SSE_BUFFER_CAP = 1000


@dataclass
class AppState:
    broker: Broker
    services: ServiceRegistry
    kg: KgStore
    engine: SlbEngine
    slb_store: SelfLabelStore
    dataset: DatasetStore
    models: ModelRegistry
    trainer: Trainer
    trainer_policy: TrainerPolicy
    auth_token: str = DEFAULT_TOKEN
    sse_buffer_cap: int = SSE_BUFFER_CAP
    # (source_id, client_msg_id) -> arrival ns, pruned on a rolling window
    _dedupe: dict[tuple[str, str], int] = field(default_factory=dict)
    _dedupe_lock: threading.Lock = field(default_factory=threading.Lock)

    def seen_recently(self, source_id: str, client_msg_id: str) -> bool:
        now = time.time_ns()
        key = (source_id, client_msg_id)
        with self._dedupe_lock:
            for k in [k for k, ts in self._dedupe.items()
                      if now - ts > DEDUPE_WINDOW_NS]:
                del self._dedupe[k]
            if key in self._dedupe:
                return True
            self._dedupe[key] = now
            return False


def sse_event_stream(state: AppState, topic: str, buffer_cap: int):
    """Yield one SSE frame per published envelope from now on.

    A consumer that falls more than buffer_cap messages behind gets a
    terminal "lagged" event instead of being allowed to stall anything.
    """
    broker = state.broker
    offset = broker.end_offset(topic)
    while True:
        end = broker.end_offset(topic)
        if end - offset > buffer_cap:
            yield "event: lagged\ndata: {}\n\n"
            return
        batch, offset = broker.read_from(topic, offset, max_records=256,
                                         timeout=0.5)
        for _off, _ts, line in batch:
            yield f"data: {line}\n\n"


def create_app(state: AppState) -> FastAPI:
    app = FastAPI(title="adaptloop", docs_url=None, redoc_url=None)
    app.state.adaptloop = state

    # -- streaming core ----------------------------------------------

    @app.post("/ingest")
    async def ingest(request: Request,
                     authorization: Optional[str] = Header(default=None)):
        if authorization != f"Bearer {state.auth_token}":
            raise HTTPException(401, "bad token")
        try:
            body = await request.json()
        except Exception:
            raise HTTPException(400, "body is not valid JSON")
        if not isinstance(body, dict):
            raise HTTPException(400, "body must be an object")
        topic = body.get("topic")
        source_id = body.get("source_id")
        payload = body.get("payload")
        if not topic or not source_id or not isinstance(payload, dict):
            raise HTTPException(400, "topic, source_id and payload required")
        if not state.broker.has_topic(topic):
            raise HTTPException(404, f"unknown topic {topic!r}")
        client_msg_id = body.get("client_msg_id")
        if client_msg_id is not None \
                and state.seen_recently(source_id, str(client_msg_id)):
            raise HTTPException(409, "duplicate message")
        server_timestamped = "timestamp_ns" not in body
        ts = int(body["timestamp_ns"]) if not server_timestamped else time.time_ns()
        try:
            ack, seq = state.broker.publish_auto(topic, source_id, ts, payload)
        except (BrokerError, ValueError) as exc:
            raise HTTPException(400, str(exc))
        return {"seq": seq, "partition": ack.partition, "offset": ack.offset,
                "server_timestamped": server_timestamped}

    @app.get("/stream/{topic}")
    def stream(topic: str):
        if not state.broker.has_topic(topic):
            raise HTTPException(404, f"unknown topic {topic!r}")
        return StreamingResponse(
            sse_event_stream(state, topic, state.sse_buffer_cap),
            media_type="text/event-stream",
            headers={"Cache-Control": "no-cache"})

    @app.get("/query/{topic}")
    def query(topic: str, t0: int, t1: int):
        if not state.broker.has_topic(topic):
            raise HTTPException(404, f"unknown topic {topic!r}")
        if t0 > t1:
            raise HTTPException(400, "t0 > t1")
        result = state.broker.query_range(topic, t0, t1)
        return {"truncated": result.truncated,
                "envelopes": [json.loads(e.to_wire()) for e in result.envelopes]}

    @app.get("/topics")
    def topics():
        return [{"topic": d.topic, "partition_count": d.partition_count,
                 "retention_ns": d.retention_ns}
                for d in state.broker.list_topics()]

    @app.post("/topics")
    def create_topic(body: dict):
        from .broker import TopicDescriptor, DuplicateTopicError
        try:
            state.broker.create_topic(TopicDescriptor(
                topic=body["topic"],
                retention_ns=int(body.get("retention_ns", 24 * 3600 * 10**9)),
                partition_count=int(body.get("partition_count", 1))))
        except DuplicateTopicError:
            raise HTTPException(409, "topic exists")
        except (KeyError, BrokerError) as exc:
            raise HTTPException(400, str(exc))
        return {"ok": True}

    # -- services ----------------------------------------------------

    @app.post("/services")
    def register_service(body: dict):
        try:
            desc = ServiceDescriptor.from_dict(body)
            return {"service_id": state.services.register(desc)}
        except (KeyError, RegistryError) as exc:
            raise HTTPException(400, str(exc))

    @app.get("/services")
    def list_services():
        return [d.to_dict() for d in state.services.list()]

    @app.post("/services/{service_id}/control")
    def control_service(service_id: str, body: dict):
        command = body.get("command")
        if command not in ("start", "stop", "update"):
            raise HTTPException(400, f"unknown command {command!r}")
        try:
            new_state = state.services.control(service_id, command,
                                               body.get("metadata"))
        except IllegalTransitionError as exc:
            raise HTTPException(409, str(exc))
        return {"control_state": new_state}

    # -- knowledge graph ---------------------------------------------

    @app.get("/kg/nodes")
    def kg_nodes():
        return [n.to_dict() for n in state.kg.nodes.values()]

    @app.post("/kg/nodes")
    def kg_put_node(body: dict):
        try:
            return {"node_id": state.kg.upsert_node(KgNode.from_dict(body))}
        except (KeyError, KgError) as exc:
            raise HTTPException(400, str(exc))

    @app.get("/kg/edges")
    def kg_edges():
        return [e.to_dict() for e in state.kg.edges.values()]

    @app.post("/kg/edges")
    def kg_put_edge(body: dict):
        try:
            return {"edge_id": state.kg.upsert_edge(KgEdge.from_dict(body))}
        except (KeyError, KgError) as exc:
            raise HTTPException(400, str(exc))

    @app.get("/kg/tables")
    def kg_tables():
        return [t.to_dict() for t in state.kg.tables.values()]

    @app.post("/kg/tables")
    def kg_put_table(body: dict):
        try:
            return {"table_id": state.kg.put_truth_table(
                TruthTable.from_dict(body))}
        except TableConflictError as exc:
            raise HTTPException(422, str(exc))
        except (KeyError, KgError) as exc:
            raise HTTPException(400, str(exc))

    @app.get("/kg/pairs")
    def kg_pairs():
        return [{"cause_node": c, "effect_nodes": list(e), "table_id": t}
                for c, e, t in state.kg.list_causal_pairs()]

    # -- self-labeling -----------------------------------------------

    @app.post("/slb/workflows")
    def start_workflow(body: dict):
        try:
            spec = WorkflowSpec.from_dict(body)
            state.broker.ensure_topic(spec.output_topic)
            state.broker.ensure_topic(spec.cause_stream_topic)
            return {"workflow_id": state.engine.start_workflow(spec)}
        except (TypeError, KeyError) as exc:
            raise HTTPException(400, f"malformed workflow spec: {exc}")
        except (SlbError, KgError) as exc:
            raise HTTPException(422, str(exc))

    @app.get("/slb/workflows")
    def list_workflows():
        return [s.to_dict() for s in state.engine.list_workflows()]

    @app.delete("/slb/workflows/{workflow_id}")
    def stop_workflow(workflow_id: str):
        try:
            return {"final_stats": state.engine.stop_workflow(workflow_id)}
        except SlbError as exc:
            raise HTTPException(404, str(exc))

    @app.get("/slb/workflows/{workflow_id}/stats")
    def workflow_stats(workflow_id: str):
        try:
            wf = state.engine.get(workflow_id)
        except SlbError as exc:
            raise HTTPException(404, str(exc))
        return {"stats": wf.stats, "fifo_depth": len(wf.fifo),
                "running": wf.running}

    @app.get("/slb/records")
    def slb_records(workflow: Optional[str] = None,
                    t0: Optional[int] = None, t1: Optional[int] = None):
        return [r.to_dict()
                for r in state.slb_store.query(workflow, t0, t1)]

    # -- models / trainer --------------------------------------------

    @app.get("/models/{model_id}")
    def model_info(model_id: str):
        ref = state.models.deployed_ref(model_id)
        if ref is None:
            raise HTTPException(404, f"no deployed weights for {model_id!r}")
        return {"model_id": model_id, "weights_ref": ref}

    @app.post("/models/{model_id}/predict")
    def predict(model_id: str, body: dict):
        try:
            label, score, ref = state.models.predict(
                model_id, body["features"])
        except KeyError:
            raise HTTPException(400, "features required")
        except ModelError as exc:
            raise HTTPException(422, str(exc))
        return {"label": label, "score": score, "weights_ref": ref}

    @app.post("/models/{model_id}/deploy")
    def deploy(model_id: str, body: dict):
        try:
            event = state.models.deploy(model_id, body["weights_ref"],
                                        bool(body.get("approve", True)))
        except KeyError:
            raise HTTPException(400, "weights_ref required")
        except ModelError as exc:
            raise HTTPException(404, str(exc))
        return {"model_id": event.model_id, "weights_ref": event.weights_ref,
                "changed": event.changed}

    @app.get("/trainer/status")
    def trainer_status():
        return {
            "pending_approval": {k: v for k, v in
                                 state.trainer.pending_approval.items() if v},
            "dataset_count": state.dataset.count(),
            "history": [
                {"action": a.action, "version_id": a.version_id,
                 "weights_ref": a.weights_ref, "detail": a.detail}
                for a in state.trainer.history[-20:]],
            "deployed": {state.trainer_policy.model_id:
                         state.models.deployed_ref(
                             state.trainer_policy.model_id)},
        }

    @app.post("/trainer/approve")
    def trainer_approve(body: dict):
        model_id = body.get("model_id", state.trainer_policy.model_id)
        approved = state.trainer.approve(model_id)
        if not approved:
            raise HTTPException(409, f"nothing pending for {model_id!r}")
        action = state.trainer.poll(state.trainer_policy)
        return {"approved": True, "action": action.action,
                "weights_ref": action.weights_ref}

    @app.post("/trainer/poll")
    def trainer_poll():
        action = state.trainer.poll(state.trainer_policy)
        return {"action": action.action, "version_id": action.version_id,
                "weights_ref": action.weights_ref, "detail": action.detail}

    @app.get("/datasets/{version_id}")
    def dataset_version(version_id: str):
        try:
            v = state.dataset.get_version(version_id)
        except ModelError as exc:
            raise HTTPException(404, str(exc))
        return v.to_dict()

    @app.get("/health")
    def health():
        return {"ok": True}

    @app.exception_handler(SeqRegressionError)
    def seq_regression(_request, exc):
        return JSONResponse(status_code=409, content={"detail": str(exc)})

    @app.exception_handler(UnknownTopicError)
    def unknown_topic(_request, exc):
        return JSONResponse(status_code=404, content={"detail": str(exc)})

    return app
