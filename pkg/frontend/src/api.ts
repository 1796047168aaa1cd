/** Typed access to the service HTTP API. All state-changing and data
 * endpoints need the bearer token from login; the client keeps it and sends
 * it on every request. Server-side failures become ApiError with the
 * server's own detail string, so callers can show it verbatim. */

import type { SessionListItem } from "./viewstate.js";

export type FetchLike = (input: string, init?: RequestInit) => Promise<Response>;

export class ApiError extends Error {
  constructor(
    public readonly status: number,
    public readonly detail: string,
  ) {
    super(`${status}: ${detail}`);
    this.name = "ApiError";
  }
}

export interface ColumnInfo {
  name: string;
  type: string;
  primary_key: boolean;
  foreign_ref: string | null;
}

export interface TableInfo {
  name: string;
  columns: ColumnInfo[];
}

export interface SchemaView {
  db_id: string;
  schema_text: string;
  tables: TableInfo[];
}

export interface RowsPage {
  columns: string[];
  rows: unknown[][];
}

export interface SessionTranscript {
  session_id: string;
  db_id: string | null;
  created_at: number;
  updated_at: number;
  turns: Record<string, unknown>[];
}

export interface AugmentSummary {
  candidates: number;
  accepted: number;
  rejected: Record<string, number>;
}

export class ApiClient {
  private token: string | null = null;

  constructor(
    private readonly base: string,
    private readonly fetchImpl: FetchLike = (input, init) => fetch(input, init),
  ) {}

  get authenticated(): boolean {
    return this.token !== null;
  }

  private async request(path: string, init: RequestInit = {}): Promise<Response> {
    const headers = new Headers(init.headers);
    if (this.token !== null) {
      headers.set("Authorization", `Bearer ${this.token}`);
    }
    const res = await this.fetchImpl(this.base + path, { ...init, headers });
    if (!res.ok) {
      let detail = res.statusText;
      try {
        const body = (await res.json()) as { detail?: unknown };
        if (body.detail !== undefined) {
          detail = String(body.detail);
        }
      } catch {
        // non-JSON error body; keep the status text
      }
      throw new ApiError(res.status, detail);
    }
    return res;
  }

  private async json<T>(path: string, init: RequestInit = {}): Promise<T> {
    const res = await this.request(path, init);
    return (await res.json()) as T;
  }

  private post(path: string, body: unknown): Promise<Response> {
    return this.request(path, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify(body),
    });
  }

  // -- auth --

  async register(username: string, password: string): Promise<void> {
    await this.post("/auth/register", { username, password });
  }

  async login(username: string, password: string): Promise<void> {
    const res = await this.post("/auth/login", { username, password });
    const body = (await res.json()) as { token: string };
    this.token = body.token;
  }

  logout(): void {
    this.token = null;
  }

  // -- databases --

  listDatabases(): Promise<string[]> {
    return this.json("/databases");
  }

  async uploadDatabase(file: Blob, dbId: string, replace = false): Promise<void> {
    const form = new FormData();
    form.append("file", file, `${dbId}.sqlite`);
    form.append("db_id", dbId);
    const query = replace ? "?replace=true" : "";
    await this.request(`/databases${query}`, { method: "POST", body: form });
  }

  getSchema(dbId: string): Promise<SchemaView> {
    return this.json(`/databases/${encodeURIComponent(dbId)}/schema`);
  }

  getTableRows(dbId: string, table: string, limit = 50): Promise<RowsPage> {
    const path =
      `/databases/${encodeURIComponent(dbId)}/tables/` +
      `${encodeURIComponent(table)}/rows?limit=${limit}`;
    return this.json(path);
  }

  // -- demo pool --

  listDemos(): Promise<Record<string, unknown>[]> {
    return this.json("/demos");
  }

  async uploadDemos(demos: unknown, mode: "merge" | "replace" = "merge"): Promise<number> {
    const res = await this.request(`/demos?mode=${mode}`, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify(demos),
    });
    const body = (await res.json()) as { size: number };
    return body.size;
  }

  async augmentDemos(rounds: number, seed = 0): Promise<AugmentSummary> {
    const res = await this.post("/demos/augment", { rounds, seed });
    return (await res.json()) as AugmentSummary;
  }

  // -- sessions --

  listSessions(): Promise<SessionListItem[]> {
    return this.json("/sessions");
  }

  async createSession(): Promise<string> {
    const res = await this.request("/sessions", { method: "POST" });
    const body = (await res.json()) as { session_id: string };
    return body.session_id;
  }

  getSession(sessionId: string): Promise<SessionTranscript> {
    return this.json(`/sessions/${encodeURIComponent(sessionId)}`);
  }

  /** Open the turn stream; the caller reads the SSE body. */
  streamMessage(sessionId: string, question: string): Promise<Response> {
    return this.request(`/sessions/${encodeURIComponent(sessionId)}/message`, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify({ question }),
    });
  }
}
