// Thin typed client over the service endpoints. The fetch implementation is
// injectable so tests run against an in-memory server.

import type {
  ErrorBody,
  GraphExport,
  HealthView,
  SessionList,
  SessionView,
} from "./types.js";

export interface FetchResponse {
  ok: boolean;
  status: number;
  json(): Promise<unknown>;
}

export type FetchLike = (url: string, init?: RequestInit) => Promise<FetchResponse>;

export class ApiError extends Error {
  constructor(
    public readonly status: number,
    public readonly code: string,
    public readonly detail: string,
    public readonly diagnosticId?: string,
  ) {
    super(`${code}: ${detail}`);
    this.name = "ApiError";
  }
}

export class ApiClient {
  private readonly fetchFn: FetchLike;

  constructor(
    public readonly baseUrl: string = "",
    fetchFn?: FetchLike,
  ) {
    this.fetchFn = fetchFn ?? ((url, init) => globalThis.fetch(url, init));
  }

  private async request<T>(method: string, path: string, body?: unknown): Promise<T> {
    const init: RequestInit = { method };
    if (body !== undefined) {
      init.headers = { "content-type": "application/json" };
      init.body = JSON.stringify(body);
    }
    const response = await this.fetchFn(this.baseUrl + path, init);
    const payload = (await response.json()) as T | ErrorBody;
    if (!response.ok) {
      const err = payload as ErrorBody;
      throw new ApiError(
        response.status,
        err.error ?? `HTTP ${response.status}`,
        err.detail ?? "",
        err.diagnostic_id,
      );
    }
    return payload as T;
  }

  health(): Promise<HealthView> {
    return this.request("GET", "/healthz");
  }

  createSession(): Promise<SessionView> {
    return this.request("POST", "/sessions");
  }

  listSessions(): Promise<SessionList> {
    return this.request("GET", "/sessions");
  }

  // With waitSeq set the server long-polls until the session log grows past
  // it (or its own poll timeout elapses), then returns the current view.
  getSession(sessionId: string, waitSeq?: number, timeoutSeconds?: number): Promise<SessionView> {
    const params = new URLSearchParams();
    if (waitSeq !== undefined) params.set("wait_seq", String(waitSeq));
    if (timeoutSeconds !== undefined) params.set("timeout", String(timeoutSeconds));
    const qs = params.toString();
    return this.request("GET", `/sessions/${sessionId}${qs ? `?${qs}` : ""}`);
  }

  sendMessage(sessionId: string, text: string): Promise<SessionView> {
    return this.request("POST", `/sessions/${sessionId}/messages`, { text });
  }

  sendResult(sessionId: string, text: string): Promise<SessionView> {
    return this.request("POST", `/sessions/${sessionId}/results`, { text });
  }

  advance(sessionId: string, auto = true): Promise<SessionView> {
    return this.request("POST", `/sessions/${sessionId}/advance?auto=${auto}`);
  }

  graph(): Promise<GraphExport> {
    return this.request("GET", "/kb/graph");
  }
}
