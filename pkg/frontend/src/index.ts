export { ApiClient, ApiError } from "./api.js";
export type {
  Envelope,
  IngestAck,
  SelfLabelRecord,
  TopicInfo,
  TrainerAction,
  TrainerStatus,
  WorkflowSpec,
  WorkflowStats,
} from "./api.js";
export { SseParser, streamTopic, streamTopicWithRetry } from "./sse.js";
export type { SseFrame, StreamHandlers } from "./sse.js";
export { LiveChart } from "./chart.js";
export type { ChartPoint } from "./chart.js";
export { DashboardStore } from "./store.js";
export type { WorkflowRow } from "./store.js";
export {
  formatRecord,
  renderApprovalPanel,
  renderBanner,
  renderRecordFeed,
  renderWorkflowPanel,
} from "./panels.js";
