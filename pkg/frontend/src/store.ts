// Dashboard view model. Holds only data obtained from the server;
// refresh() is the 2 s polling round for the non-streaming panels and
// every mutating action is a single API call followed by a refresh.

import {
  ApiClient,
  SelfLabelRecord,
  TopicInfo,
  TrainerStatus,
  WorkflowSpec,
  WorkflowStats,
} from "./api.js";

export interface WorkflowRow {
  spec: WorkflowSpec;
  stats: WorkflowStats | null;
}

export class DashboardStore {
  topics: TopicInfo[] = [];
  workflows: WorkflowRow[] = [];
  trainer: TrainerStatus | null = null;
  recordsByWorkflow = new Map<string, SelfLabelRecord[]>();
  connected = false;
  lastError = "";
  private timer: ReturnType<typeof setInterval> | null = null;

  constructor(
    public api: ApiClient,
    private recordLimit = 50,
  ) {}

  async refresh(): Promise<void> {
    try {
      this.topics = await this.api.listTopics();
      const specs = await this.api.listWorkflows();
      const rows: WorkflowRow[] = [];
      for (const spec of specs) {
        let stats: WorkflowStats | null = null;
        try {
          stats = await this.api.workflowStats(spec.workflow_id);
        } catch {
          /* workflow stopped between list and stats */
        }
        rows.push({ spec, stats });
        const records = await this.api.records(spec.workflow_id);
        this.recordsByWorkflow.set(
          spec.workflow_id,
          records.slice(-this.recordLimit),
        );
      }
      this.workflows = rows;
      this.trainer = await this.api.trainerStatus();
      this.connected = true;
      this.lastError = "";
    } catch (err) {
      this.connected = false;
      this.lastError = String(err);
    }
  }

  startPolling(intervalMs = 2000): void {
    if (this.timer) return;
    this.timer = setInterval(() => void this.refresh(), intervalMs);
  }

  stopPolling(): void {
    if (this.timer) {
      clearInterval(this.timer);
      this.timer = null;
    }
  }

  // -- operator actions (one API call each) ------------------------

  async startWorkflow(spec: WorkflowSpec): Promise<string> {
    const id = await this.api.startWorkflow(spec);
    await this.refresh();
    return id;
  }

  async stopWorkflow(workflowId: string): Promise<Record<string, number>> {
    const stats = await this.api.stopWorkflow(workflowId);
    await this.refresh();
    return stats;
  }

  async approveTraining(modelId?: string): Promise<string> {
    const result = await this.api.approveTraining(modelId);
    await this.refresh();
    return result.action;
  }

  async redeploy(modelId: string, weightsRef: string): Promise<boolean> {
    const result = await this.api.deploy(modelId, weightsRef);
    await this.refresh();
    return result.changed;
  }

  pendingApprovals(): string[] {
    if (!this.trainer) return [];
    return Object.entries(this.trainer.pending_approval)
      .filter(([, pending]) => pending)
      .map(([modelId]) => modelId);
  }
}
