// Integration round trips against a real backend process: every UI
// action must be observable through the public HTTP API afterwards.

import { afterAll, beforeAll, describe, expect, it } from "vitest";

import { ApiClient, WorkflowSpec } from "../src/api.js";
import { DashboardStore } from "../src/store.js";
import {
  renderApprovalPanel,
  renderRecordFeed,
  renderWorkflowPanel,
} from "../src/panels.js";
import { startServer, sleep, waitFor, type TestServer } from "./server.js";

const SEC = 1_000_000_000;
const CAUSE_TOPIC = "cause.hand";
const EFFECT_TOPIC = "effects.controller";
const WORKFLOW_ID = "wf-dash";

let server: TestServer;
let api: ApiClient;
let store: DashboardStore;

beforeAll(async () => {
  server = await startServer({
    trainer_policy: {
      min_new_samples: 20,
      require_approval: true,
      ignore_hours: true,
    },
  });
  api = new ApiClient(server.baseUrl);
  store = new DashboardStore(api);
});

afterAll(async () => {
  await server?.stop();
});

function spec(): WorkflowSpec {
  // uses the demo knowledge graph shipped with the server
  return {
    workflow_id: WORKFLOW_ID,
    cause_node: "hand_arm",
    effect_nodes: ["controller"],
    truth_table_id: "printer_power",
    effect_event_topics: [EFFECT_TOPIC],
    cause_stream_topic: CAUSE_TOPIC,
    itm_ref: "itm-default",
    output_topic: `labels.${WORKFLOW_ID}`,
    cause_window_duration_ns: 2 * SEC,
    max_wait_ns: 10 * SEC,
    cause_channels: ["v"],
    negative_tau_ns: 0,
  };
}

describe("dashboard round trips", () => {
  it("start-workflow action shows up in server state and produces records", async () => {
    const id = await store.startWorkflow(spec());
    expect(id).toBe(WORKFLOW_ID);
    expect(store.workflows.map((w) => w.spec.workflow_id)).toContain(WORKFLOW_ID);
    expect(renderWorkflowPanel(store)).toContain(WORKFLOW_ID);
    await sleep(500); // consumer threads attach to the effect topic

    // backdated cause-stream window so effect events have data behind them
    const nowNs = Date.now() * 1e6;
    for (let i = 0; i < 120; i++) {
      const ts = nowNs - (120 - i) * SEC;
      await api.ingest(CAUSE_TOPIC, "hand-sensor", { v: Math.sin(i / 5) }, ts);
    }

    // twelve effect transitions; the truth table maps both power
    // states to the press_button cause
    for (let i = 0; i < 12; i++) {
      await api.ingest(EFFECT_TOPIC, "esd-controller", {
        node_id: "controller",
        state: i % 2 === 0 ? "power_on" : "power_off",
        transition_ts_ns: nowNs - (80 - i * 4) * SEC,
      });
    }

    const positives = await waitFor(async () => {
      const records = await api.records(WORKFLOW_ID);
      const pos = records.filter((r) => r.polarity === "positive");
      return pos.length >= 12 ? pos : undefined;
    });
    for (const r of positives) {
      expect(r.cause_state).toBe("press_button");
      expect(r.duration_ns).toBe(2 * SEC);
    }

    await store.refresh();
    const feed = renderRecordFeed(store, WORKFLOW_ID);
    expect(feed).toContain("press_button");
    const stats = await api.workflowStats(WORKFLOW_ID);
    expect(stats.running).toBe(true);
    expect(stats.stats.emitted).toBeGreaterThanOrEqual(12);
  });

  it("approve-training action drives the trainer to a deployed model", async () => {
    // negative (background) events balance the dataset with a second label
    const nowNs = Date.now() * 1e6;
    for (let i = 0; i < 12; i++) {
      const t1 = nowNs - (30 - i * 2) * SEC;
      await api.ingest(EFFECT_TOPIC, "esd-controller", {
        node_id: "controller",
        state: "power_on",
        polarity: "negative",
        transition_ts_ns: t1,
        feature_ref: [CAUSE_TOPIC, t1 - 2 * SEC, t1],
      });
    }

    await waitFor(async () => {
      const status = await api.trainerStatus();
      return status.dataset_count >= 24 ? status : undefined;
    });

    // gate passes -> trainer surfaces a pending approval instead of
    // training on its own
    await api.pollTrainer();
    await waitFor(async () => {
      await store.refresh();
      return store.pendingApprovals().includes("task") ? true : undefined;
    });
    expect(renderApprovalPanel(store)).toContain("PENDING APPROVAL: task");

    const action = await store.approveTraining("task");
    expect(action).toBe("trained");

    // the result is visible through the primary API, not dashboard state
    const info = await api.modelInfo("task");
    expect(info.weights_ref).toMatch(/^[0-9a-f]{16}$/);
    const status = await api.trainerStatus();
    expect(status.deployed.task).toBe(info.weights_ref);
    expect(status.history.some((h) => h.action === "trained")).toBe(true);

    // redeploying the same weights is a no-op the server reports as such
    const redeploy = await api.deploy("task", info.weights_ref);
    expect(redeploy.changed).toBe(false);
  });

  it("stop-workflow action removes the workflow from server state", async () => {
    const finalStats = await store.stopWorkflow(WORKFLOW_ID);
    expect(finalStats.emitted).toBeGreaterThanOrEqual(12);
    const specs = await api.listWorkflows();
    expect(specs.map((s) => s.workflow_id)).not.toContain(WORKFLOW_ID);
  });
});
