// Typed client for the platform HTTP API. Every mutating dashboard
// action maps to exactly one method here (and one server endpoint).

export interface TopicInfo {
  topic: string;
  partition_count: number;
  retention_ns: number;
}

export interface Envelope {
  topic: string;
  source_id: string;
  seq: number;
  ts_ns: number;
  payload: Record<string, unknown>;
}

export interface IngestAck {
  seq: number;
  partition: number;
  offset: number;
  server_timestamped: boolean;
}

export interface WorkflowSpec {
  workflow_id: string;
  cause_node: string;
  effect_nodes: string[];
  truth_table_id: string;
  effect_event_topics: string[];
  cause_stream_topic: string;
  itm_ref: string;
  output_topic: string;
  cause_window_duration_ns?: number;
  max_wait_ns?: number;
  mode1_enabled?: boolean;
  mode2_enabled?: boolean;
  confidence_threshold?: number;
  negative_cause_state?: string;
  negative_tau_ns?: number;
  tau_anchor?: "earliest" | "latest";
  cause_channels?: string[];
  itm_retry_budget?: number;
}

export interface WorkflowStats {
  stats: Record<string, number>;
  fifo_depth: number;
  running: boolean;
}

export interface SelfLabelRecord {
  workflow_id: string;
  cause_state: string;
  cause_end_ts_ns: number;
  duration_ns: number;
  tau_ns: number;
  contributing_effects: string[];
  polarity: "positive" | "negative";
  record_id: string;
}

export interface TrainerStatus {
  pending_approval: Record<string, boolean>;
  dataset_count: number;
  history: {
    action: string;
    version_id: string | null;
    weights_ref: string | null;
    detail: string;
  }[];
  deployed: Record<string, string | null>;
}

export interface TrainerAction {
  action: string;
  version_id?: string | null;
  weights_ref: string | null;
}

export class ApiError extends Error {
  constructor(public status: number, public detail: string) {
    super(`HTTP ${status}: ${detail}`);
  }
}

async function asJson<T>(resp: Response): Promise<T> {
  if (!resp.ok) {
    let detail = resp.statusText;
    try {
      const body = (await resp.json()) as { detail?: string };
      if (body.detail) detail = body.detail;
    } catch {
      /* non-JSON error body */
    }
    throw new ApiError(resp.status, detail);
  }
  return (await resp.json()) as T;
}

export class ApiClient {
  constructor(
    public baseUrl: string,
    private token = "adaptloop-dev-token",
  ) {}

  private get(path: string): Promise<Response> {
    return fetch(`${this.baseUrl}${path}`);
  }

  private post(path: string, body: unknown, auth = false): Promise<Response> {
    const headers: Record<string, string> = {
      "Content-Type": "application/json",
    };
    if (auth) headers["Authorization"] = `Bearer ${this.token}`;
    return fetch(`${this.baseUrl}${path}`, {
      method: "POST",
      headers,
      body: JSON.stringify(body),
    });
  }

  async health(): Promise<boolean> {
    try {
      const r = await this.get("/health");
      return r.ok;
    } catch {
      return false;
    }
  }

  // -- streaming core ----------------------------------------------

  listTopics(): Promise<TopicInfo[]> {
    return this.get("/topics").then((r) => asJson<TopicInfo[]>(r));
  }

  createTopic(topic: string, opts: Partial<TopicInfo> = {}): Promise<void> {
    return this.post("/topics", { topic, ...opts }).then((r) =>
      asJson<unknown>(r),
    ) as Promise<void>;
  }

  ingest(
    topic: string,
    sourceId: string,
    payload: Record<string, unknown>,
    timestampNs?: number,
  ): Promise<IngestAck> {
    const body: Record<string, unknown> = {
      topic,
      source_id: sourceId,
      payload,
    };
    if (timestampNs !== undefined) body.timestamp_ns = timestampNs;
    return this.post("/ingest", body, true).then((r) => asJson<IngestAck>(r));
  }

  query(topic: string, t0: number, t1: number): Promise<{
    truncated: boolean;
    envelopes: Envelope[];
  }> {
    return this.get(`/query/${topic}?t0=${t0}&t1=${t1}`).then((r) =>
      asJson(r),
    );
  }

  // -- self-labeling -----------------------------------------------

  listWorkflows(): Promise<WorkflowSpec[]> {
    return this.get("/slb/workflows").then((r) => asJson<WorkflowSpec[]>(r));
  }

  startWorkflow(spec: WorkflowSpec): Promise<string> {
    return this.post("/slb/workflows", spec)
      .then((r) => asJson<{ workflow_id: string }>(r))
      .then((b) => b.workflow_id);
  }

  stopWorkflow(workflowId: string): Promise<Record<string, number>> {
    return fetch(`${this.baseUrl}/slb/workflows/${workflowId}`, {
      method: "DELETE",
    })
      .then((r) => asJson<{ final_stats: Record<string, number> }>(r))
      .then((b) => b.final_stats);
  }

  workflowStats(workflowId: string): Promise<WorkflowStats> {
    return this.get(`/slb/workflows/${workflowId}/stats`).then((r) =>
      asJson<WorkflowStats>(r),
    );
  }

  records(workflowId?: string): Promise<SelfLabelRecord[]> {
    const qs = workflowId ? `?workflow=${workflowId}` : "";
    return this.get(`/slb/records${qs}`).then((r) =>
      asJson<SelfLabelRecord[]>(r),
    );
  }

  // -- models / trainer --------------------------------------------

  trainerStatus(): Promise<TrainerStatus> {
    return this.get("/trainer/status").then((r) => asJson<TrainerStatus>(r));
  }

  approveTraining(modelId?: string): Promise<TrainerAction & {
    approved: boolean;
  }> {
    const body = modelId ? { model_id: modelId } : {};
    return this.post("/trainer/approve", body).then((r) => asJson(r));
  }

  pollTrainer(): Promise<TrainerAction> {
    return this.post("/trainer/poll", {}).then((r) => asJson<TrainerAction>(r));
  }

  modelInfo(modelId: string): Promise<{ model_id: string; weights_ref: string }> {
    return this.get(`/models/${modelId}`).then((r) => asJson(r));
  }

  predict(
    modelId: string,
    features: number[],
  ): Promise<{ label: string; score: number; weights_ref: string }> {
    return this.post(`/models/${modelId}/predict`, { features }).then((r) =>
      asJson(r),
    );
  }

  deploy(
    modelId: string,
    weightsRef: string,
  ): Promise<{ model_id: string; weights_ref: string; changed: boolean }> {
    return this.post(`/models/${modelId}/deploy`, {
      weights_ref: weightsRef,
    }).then((r) => asJson(r));
  }

  // -- knowledge graph (read-only browser) -------------------------

  kgNodes(): Promise<Record<string, unknown>[]> {
    return this.get("/kg/nodes").then((r) => asJson(r));
  }

  kgTables(): Promise<Record<string, unknown>[]> {
    return this.get("/kg/tables").then((r) => asJson(r));
  }

  kgPairs(): Promise<
    { cause_node: string; effect_nodes: string[]; table_id: string }[]
  > {
    return this.get("/kg/pairs").then((r) => asJson(r));
  }
}
