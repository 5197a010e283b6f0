// Live chart model: a bounded window of points per channel fed from
// the SSE stream, plus transcript accounting so dropped frames are
// detectable (per-source sequence numbers must be contiguous).

import type { Envelope } from "./api.js";
import type { SseFrame } from "./sse.js";

export interface ChartPoint {
  tNs: number;
  value: number;
}

export class LiveChart {
  readonly series = new Map<string, ChartPoint[]>();
  received = 0;
  lagged = false;
  parseErrors = 0;
  private lastSeq = new Map<string, number>();
  private gaps = 0;

  constructor(private windowSize = 600) {}

  onFrame(frame: SseFrame): void {
    if (frame.event === "lagged") {
      this.lagged = true;
      return;
    }
    let env: Envelope;
    try {
      env = JSON.parse(frame.data) as Envelope;
    } catch {
      this.parseErrors += 1;
      return;
    }
    this.received += 1;
    const prev = this.lastSeq.get(env.source_id);
    if (prev !== undefined && env.seq !== prev + 1) {
      this.gaps += env.seq - prev - 1;
    }
    this.lastSeq.set(env.source_id, env.seq);
    for (const [channel, value] of Object.entries(env.payload)) {
      if (typeof value !== "number") continue;
      let points = this.series.get(channel);
      if (!points) {
        points = [];
        this.series.set(channel, points);
      }
      points.push({ tNs: env.ts_ns, value });
      if (points.length > this.windowSize) {
        points.splice(0, points.length - this.windowSize);
      }
    }
  }

  /** Messages missing from the transcript (sequence gaps). */
  dropped(): number {
    return this.gaps;
  }

  complete(): boolean {
    return !this.lagged && this.gaps === 0 && this.parseErrors === 0;
  }
}
