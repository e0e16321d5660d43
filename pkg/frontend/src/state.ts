// Session state for the console: one store holding the latest server view,
// plus a long-poll loop that keeps it fresh.
//
// Views are event-log projections, so last_seq totally orders them. The
// store applies a view only if it is strictly newer than what it holds;
// that makes concurrent POST responses and long-poll responses safe to
// apply in any order.

import type { ApiClient } from "./api.js";
import type { SessionView } from "./types.js";

export type Listener = (view: SessionView) => void;

export class ConsoleStore {
  private current: SessionView | null = null;
  private listeners: Listener[] = [];

  get view(): SessionView | null {
    return this.current;
  }

  get lastSeq(): number {
    return this.current?.last_seq ?? 0;
  }

  subscribe(listener: Listener): () => void {
    this.listeners.push(listener);
    if (this.current) listener(this.current);
    return () => {
      this.listeners = this.listeners.filter((l) => l !== listener);
    };
  }

  // Returns true if the view was newer and got applied.
  update(view: SessionView): boolean {
    if (
      this.current &&
      this.current.session_id === view.session_id &&
      view.last_seq <= this.current.last_seq
    ) {
      return false;
    }
    this.current = view;
    for (const listener of [...this.listeners]) listener(view);
    return true;
  }

  reset(): void {
    this.current = null;
  }
}

const RETRY_DELAY_MS = 1000;

function delay(ms: number): Promise<void> {
  return new Promise((resolve) => setTimeout(resolve, ms));
}

// Long-poll driver. Each cycle asks the server to block until the log grows
// past the store's cursor; a timed-out poll returns the unchanged view,
// which the store ignores, and the loop just polls again.
export class SessionPoller {
  private stopped = false;
  private running: Promise<void> | null = null;

  constructor(
    private readonly api: ApiClient,
    private readonly store: ConsoleStore,
    private readonly sessionId: string,
    private readonly timeoutSeconds = 25,
  ) {}

  start(): void {
    if (!this.running) this.running = this.loop();
  }

  stop(): void {
    this.stopped = true;
  }

  private async loop(): Promise<void> {
    while (!this.stopped) {
      try {
        const view = await this.api.getSession(
          this.sessionId,
          this.store.lastSeq,
          this.timeoutSeconds,
        );
        if (this.stopped) return;
        this.store.update(view);
      } catch {
        if (this.stopped) return;
        await delay(RETRY_DELAY_MS);
      }
    }
  }
}
