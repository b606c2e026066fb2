/** Typed client for the portal HTTP API. The console never derives numbers
 * itself: everything rendered comes from these calls. */

export interface QueueStats {
  waiting: number;
  running: number;
  finished: number;
  ts?: number;
  error?: string;
}

export interface NodeInfo {
  node_id: string;
  address: string;
  slot_count: number;
  free_slots: number;
  joined_at: number;
}

export interface ResultView {
  structure: string;
  confidence: number[];
  confidence_digits: string;
  rendering: string;
}

export interface RequestView {
  request_id: string;
  state: "pending" | "dispatched" | "completed" | "failed";
  header: string;
  sequence: string;
  submitted_at: number;
  completed_at: number;
  notify_email: string;
  log_name: string;
  result?: ResultView;
  failure_reason?: string;
}

export interface SubmitReply {
  request_ids: string[];
  token?: string;
}

export interface LoginReply {
  token: string;
  user_id: string;
  role: "user" | "admin";
}

export interface UserInfo {
  user_id: string;
  name: string;
  email: string;
  role: string;
  created_at: number;
}

export class ApiError extends Error {
  constructor(
    public status: number,
    public payload: Record<string, unknown>,
  ) {
    super(`${payload["error"] ?? status}`);
  }

  get code(): string {
    return String(this.payload["error"] ?? this.status);
  }
}

async function parseError(resp: Response): Promise<never> {
  let payload: Record<string, unknown> = {};
  try {
    payload = (await resp.json()) as Record<string, unknown>;
  } catch {
    payload = { error: resp.statusText };
  }
  throw new ApiError(resp.status, payload);
}

export class PortalApi {
  constructor(
    public base: string = "",
    public token: string | null = null,
  ) {}

  private headers(json = false): Record<string, string> {
    const h: Record<string, string> = {};
    if (json) h["Content-Type"] = "application/json";
    if (this.token) h["Authorization"] = `Bearer ${this.token}`;
    return h;
  }

  private async get<T>(path: string): Promise<T> {
    const resp = await fetch(this.base + path, { headers: this.headers() });
    if (!resp.ok) await parseError(resp);
    return (await resp.json()) as T;
  }

  private async post<T>(path: string, body: unknown): Promise<T> {
    const resp = await fetch(this.base + path, {
      method: "POST",
      headers: this.headers(true),
      body: JSON.stringify(body),
    });
    if (!resp.ok) await parseError(resp);
    return (await resp.json()) as T;
  }

  register(name: string, email: string, password: string): Promise<{ user_id: string }> {
    return this.post("/api/auth/register", { name, email, password });
  }

  login(email: string, password: string): Promise<LoginReply> {
    return this.post("/api/auth/login", { email, password });
  }

  submit(fasta: string, notifyEmail = ""): Promise<SubmitReply> {
    return this.post("/api/requests", { fasta, notify_email: notifyEmail });
  }

  getRequest(id: string, anonToken = ""): Promise<RequestView> {
    const q = anonToken ? `?token=${encodeURIComponent(anonToken)}` : "";
    return this.get(`/api/requests/${encodeURIComponent(id)}${q}`);
  }

  async taskLog(id: string, anonToken = ""): Promise<string> {
    const q = anonToken ? `?token=${encodeURIComponent(anonToken)}` : "";
    const resp = await fetch(
      `${this.base}/api/requests/${encodeURIComponent(id)}/log${q}`,
      { headers: this.headers() },
    );
    if (!resp.ok) await parseError(resp);
    return await resp.text();
  }

  async history(forUser = ""): Promise<RequestView[]> {
    const q = forUser ? `?user=${encodeURIComponent(forUser)}` : "";
    const body = await this.get<{ requests: RequestView[] }>(`/api/requests${q}`);
    return body.requests;
  }

  async adminNodes(): Promise<NodeInfo[]> {
    const body = await this.get<{ nodes: NodeInfo[] }>("/api/admin/nodes");
    return body.nodes;
  }

  adminStats(): Promise<QueueStats> {
    return this.get("/api/admin/stats");
  }

  async adminUsers(): Promise<UserInfo[]> {
    const body = await this.get<{ users: UserInfo[] }>("/api/admin/users");
    return body.users;
  }

  async deleteRequest(id: string): Promise<void> {
    const resp = await fetch(
      `${this.base}/api/admin/requests/${encodeURIComponent(id)}`,
      { method: "DELETE", headers: this.headers() },
    );
    if (!resp.ok) await parseError(resp);
  }
}
