/** Server-push stats subscription over fetch streaming, with a polling
 * fallback when the stream cannot be established (design decision: push
 * first, 5 s polling as the degraded mode). EventSource is avoided so the
 * same code runs in browsers and in the test runner. */

import { ApiError, PortalApi, QueueStats } from "./api.js";

export const POLL_FALLBACK_MS = 5000;

/** Incremental parser for text/event-stream `data:` payloads. */
export class SseParser {
  private buffer = "";

  feed(chunk: string): string[] {
    this.buffer += chunk;
    const events: string[] = [];
    let idx: number;
    while ((idx = this.buffer.indexOf("\n\n")) >= 0) {
      const block = this.buffer.slice(0, idx);
      this.buffer = this.buffer.slice(idx + 2);
      const data = block
        .split("\n")
        .filter((line) => line.startsWith("data:"))
        .map((line) => line.slice(5).trimStart())
        .join("\n");
      if (data) events.push(data);
    }
    return events;
  }
}

export interface StatsSubscription {
  close(): void;
}

export function subscribeStats(
  api: PortalApi,
  onSnapshot: (stats: QueueStats) => void,
  onError: (err: unknown) => void,
  pollMs: number = POLL_FALLBACK_MS,
): StatsSubscription {
  const controller = new AbortController();
  let closed = false;
  let pollTimer: ReturnType<typeof setTimeout> | null = null;

  const poll = async () => {
    if (closed) return;
    try {
      onSnapshot(await api.adminStats());
    } catch (err) {
      onError(err);
    }
    if (!closed) pollTimer = setTimeout(poll, pollMs);
  };

  const stream = async () => {
    const headers: Record<string, string> = {};
    if (api.token) headers["Authorization"] = `Bearer ${api.token}`;
    const resp = await fetch(`${api.base}/api/admin/stats/stream`, {
      headers,
      signal: controller.signal,
    });
    if (!resp.ok || !resp.body) {
      let payload: Record<string, unknown> = {};
      try {
        payload = (await resp.json()) as Record<string, unknown>;
      } catch {
        /* not json */
      }
      throw new ApiError(resp.status, payload);
    }
    const reader = resp.body.getReader();
    const decoder = new TextDecoder();
    const parser = new SseParser();
    for (;;) {
      const { done, value } = await reader.read();
      if (done) break;
      for (const data of parser.feed(decoder.decode(value, { stream: true }))) {
        onSnapshot(JSON.parse(data) as QueueStats);
      }
    }
  };

  stream().catch((err) => {
    if (closed) return;
    if (err instanceof ApiError && (err.status === 401 || err.status === 403)) {
      onError(err); // auth problem: do not fall back, surface it
      return;
    }
    onError(err);
    poll(); // degraded mode: poll the snapshot endpoint
  });

  return {
    close() {
      closed = true;
      controller.abort();
      if (pollTimer !== null) clearTimeout(pollTimer);
    },
  };
}
