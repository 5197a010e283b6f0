// Server-sent-events client on top of fetch streaming. Node 20 has no
// EventSource, and the browser one cannot set custom retry behavior
// anyway, so we parse the wire format ourselves.

export interface SseFrame {
  event: string; // "message" unless the server named the event
  data: string;
}

/**
 * Incremental parser for the SSE wire format. Feed it arbitrary chunk
 * boundaries; complete frames come out.
 */
export class SseParser {
  private buffer = "";
  private event = "";
  private data: string[] = [];

  push(chunk: string): SseFrame[] {
    this.buffer += chunk;
    const frames: SseFrame[] = [];
    let idx: number;
    while ((idx = this.buffer.indexOf("\n")) >= 0) {
      const line = this.buffer.slice(0, idx).replace(/\r$/, "");
      this.buffer = this.buffer.slice(idx + 1);
      if (line === "") {
        if (this.data.length > 0 || this.event !== "") {
          frames.push({
            event: this.event || "message",
            data: this.data.join("\n"),
          });
        }
        this.event = "";
        this.data = [];
      } else if (line.startsWith("data:")) {
        this.data.push(line.slice(5).replace(/^ /, ""));
      } else if (line.startsWith("event:")) {
        this.event = line.slice(6).trim();
      }
      // comments (":") and other fields are ignored
    }
    return frames;
  }
}

export interface StreamHandlers {
  onFrame: (frame: SseFrame) => void;
  onOpen?: () => void;
  onError?: (err: unknown) => void;
}

/**
 * Stream one topic until the signal aborts or the server ends the
 * response (e.g. after a terminal "lagged" frame).
 */
export async function streamTopic(
  baseUrl: string,
  topic: string,
  handlers: StreamHandlers,
  signal: AbortSignal,
): Promise<void> {
  const resp = await fetch(`${baseUrl}/stream/${topic}`, { signal });
  if (!resp.ok || !resp.body) {
    throw new Error(`stream ${topic}: HTTP ${resp.status}`);
  }
  handlers.onOpen?.();
  const reader = resp.body.getReader();
  const decoder = new TextDecoder();
  const parser = new SseParser();
  try {
    for (;;) {
      const { done, value } = await reader.read();
      if (done) break;
      for (const frame of parser.push(decoder.decode(value, { stream: true }))) {
        handlers.onFrame(frame);
      }
    }
  } catch (err) {
    if (!signal.aborted) {
      handlers.onError?.(err);
      throw err;
    }
  }
}

/**
 * streamTopic with automatic reconnect, for the disconnect-banner
 * behavior: onDown fires when the connection drops, onOpen when it is
 * (re-)established. Stops when the signal aborts.
 */
export async function streamTopicWithRetry(
  baseUrl: string,
  topic: string,
  handlers: StreamHandlers & { onDown?: () => void },
  signal: AbortSignal,
  retryMs = 1000,
): Promise<void> {
  while (!signal.aborted) {
    try {
      await streamTopic(baseUrl, topic, handlers, signal);
      if (!signal.aborted) handlers.onDown?.();
    } catch {
      if (!signal.aborted) handlers.onDown?.();
    }
    if (signal.aborted) return;
    await new Promise((r) => setTimeout(r, retryMs));
  }
}
