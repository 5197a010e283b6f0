// Text renderers for the console panels. Pure functions of the store
// so they are trivially testable; a browser shell would swap these for
// DOM templates without touching the store.

import type { SelfLabelRecord } from "./api.js";
import type { DashboardStore } from "./store.js";

function pad(s: string, width: number): string {
  return s.length >= width ? s.slice(0, width) : s + " ".repeat(width - s.length);
}

export function renderBanner(store: DashboardStore): string {
  if (store.connected) return "";
  return `!! disconnected from ${store.api.baseUrl} — retrying (${store.lastError})`;
}

export function renderWorkflowPanel(store: DashboardStore): string {
  const lines = ["WORKFLOWS"];
  if (store.workflows.length === 0) {
    lines.push("  (none running)");
  }
  for (const { spec, stats } of store.workflows) {
    const s = stats?.stats ?? {};
    lines.push(
      `  ${pad(spec.workflow_id, 24)} ${spec.cause_node} -> ` +
        `[${spec.effect_nodes.join(",")}]  emitted=${s.emitted ?? 0} ` +
        `evicted=${s.evicted ?? 0} fifo=${stats?.fifo_depth ?? "?"}` +
        (stats?.running === false ? "  STOPPED" : ""),
    );
  }
  return lines.join("\n");
}

export function renderApprovalPanel(store: DashboardStore): string {
  const lines = ["TRAINER"];
  const t = store.trainer;
  if (!t) return "TRAINER\n  (no status yet)";
  lines.push(`  dataset samples: ${t.dataset_count}`);
  for (const [model, ref] of Object.entries(t.deployed)) {
    lines.push(`  deployed ${model}: ${ref ?? "(none)"}`);
  }
  const pending = store.pendingApprovals();
  if (pending.length > 0) {
    lines.push(`  PENDING APPROVAL: ${pending.join(", ")}`);
  }
  for (const h of t.history.slice(-5)) {
    lines.push(`  ${pad(h.action, 18)} ${h.weights_ref ?? ""} ${h.detail}`);
  }
  return lines.join("\n");
}

export function renderRecordFeed(
  store: DashboardStore,
  workflowId: string,
  limit = 10,
): string {
  const records = store.recordsByWorkflow.get(workflowId) ?? [];
  const lines = [`RECORDS ${workflowId} (${records.length} shown)`];
  for (const r of records.slice(-limit)) {
    lines.push(formatRecord(r));
  }
  return lines.join("\n");
}

export function formatRecord(r: SelfLabelRecord): string {
  const endMs = Math.round(r.cause_end_ts_ns / 1e6);
  const durS = (r.duration_ns / 1e9).toFixed(2);
  return (
    `  ${pad(r.polarity, 9)} ${pad(r.cause_state, 16)} ` +
    `end=${endMs}ms dur=${durS}s tau=${(r.tau_ns / 1e9).toFixed(2)}s`
  );
}
