/** Console session and the rolling live-stats window. */

import { QueueStats } from "./api.js";

export interface Session {
  token: string | null;
  role: "user" | "admin" | null;
  email: string | null;
  /** anonymous retrieval tokens by request id */
  anonTokens: Record<string, string>;
}

const STORAGE_KEY = "jeeva-console-session";

function storage(): Storage | null {
  try {
    return typeof localStorage === "undefined" ? null : localStorage;
  } catch {
    return null;
  }
}

export function loadSession(): Session {
  const raw = storage()?.getItem(STORAGE_KEY);
  if (raw) {
    try {
      return JSON.parse(raw) as Session;
    } catch {
      /* corrupted; start fresh */
    }
  }
  return { token: null, role: null, email: null, anonTokens: {} };
}

export function saveSession(session: Session): void {
  storage()?.setItem(STORAGE_KEY, JSON.stringify(session));
}

export function clearSession(session: Session): void {
  session.token = null;
  session.role = null;
  session.email = null;
  saveSession(session);
}

export function rememberAnonToken(session: Session, ids: string[], token: string): void {
  for (const id of ids) session.anonTokens[id] = token;
  saveSession(session);
}

/** Rolling window of stats snapshots. The rendered counts are always the
 * latest snapshot verbatim; the window only feeds the chart history. */
export class StatsWindow {
  snapshots: QueueStats[] = [];

  constructor(public capacity = 120) {}

  push(stats: QueueStats): void {
    this.snapshots.push(stats);
    if (this.snapshots.length > this.capacity) {
      this.snapshots.splice(0, this.snapshots.length - this.capacity);
    }
  }

  latest(): QueueStats | null {
    return this.snapshots.length ? this.snapshots[this.snapshots.length - 1] : null;
  }

  maxTotal(): number {
    let max = 1;
    for (const s of this.snapshots) {
      max = Math.max(max, s.waiting, s.running, s.finished);
    }
    return max;
  }
}

export function formatElapsed(fromEpochS: number, nowEpochS: number): string {
  const s = Math.max(0, Math.floor(nowEpochS - fromEpochS));
  if (s < 60) return `${s}s`;
  if (s < 3600) return `${Math.floor(s / 60)}m ${s % 60}s`;
  return `${Math.floor(s / 3600)}h ${Math.floor((s % 3600) / 60)}m`;
}
