// Console wiring: builds the layout, connects the store to the renderers,
// and turns operator input into service calls.
//
// Flow: sending a message (or a manual result) posts it, then immediately
// advances the pipeline until the server needs input again, rendering every
// view that comes back. A long-poll keeps the view fresh if anything else
// (another tab, the CLI) touches the session.

import { ApiClient, ApiError } from "./api.js";
import { renderActionCard, renderGraph, renderStatus, renderTimeline, renderTranscript } from "./render.js";
import { ConsoleStore, SessionPoller } from "./state.js";
import { PIPELINE_STATES } from "./types.js";
import type { SessionView } from "./types.js";

const LAYOUT = `
<header>
  <h1>tsgflow console</h1>
  <span id="health" class="muted"></span>
  <span id="state-badge" class="badge"></span>
</header>
<main class="layout">
  <section class="pane chat">
    <h2>Session</h2>
    <div id="transcript" class="transcript"></div>
    <p id="notice" class="notice" hidden></p>
    <form id="chat-form">
      <input id="chat-input" autocomplete="off" placeholder="Describe the incident symptom" />
      <button type="submit">Send</button>
    </form>
  </section>
  <section class="pane plan">
    <h2>Plan <span id="iteration" class="muted"></span></h2>
    <div id="timeline-holder"></div>
    <div id="action-card" class="action-card" hidden>
      <h3>Manual step</h3>
      <p class="card-action"></p>
      <div class="card-outcomes"></div>
      <form id="result-form">
        <input id="result-input" autocomplete="off" placeholder="What happened when you ran it?" />
        <button type="submit">Submit result</button>
      </form>
    </div>
  </section>
  <section class="pane kb">
    <h2>Knowledge graph</h2>
    <p class="muted legend">dashed edges cross document boundaries</p>
    <button id="graph-refresh" type="button">Refresh</button>
    <div id="graph" class="graph"></div>
  </section>
</main>
`;

export class Console {
  readonly store = new ConsoleStore();
  private poller: SessionPoller | null = null;
  private inflight: Promise<void> | null = null;

  private readonly transcript: HTMLElement;
  private readonly timelineHolder: HTMLElement;
  private readonly actionCard: HTMLElement;
  private readonly badge: HTMLElement;
  private readonly notice: HTMLElement;
  private readonly iteration: HTMLElement;
  private readonly health: HTMLElement;
  private readonly graphHolder: HTMLElement;
  private readonly chatInput: HTMLInputElement;
  private readonly resultInput: HTMLInputElement;

  constructor(root: HTMLElement, private readonly api: ApiClient) {
    root.innerHTML = LAYOUT;
    const pick = <T extends HTMLElement>(selector: string): T => {
      const found = root.querySelector<T>(selector);
      if (!found) throw new Error(`console layout is missing ${selector}`);
      return found;
    };
    this.transcript = pick("#transcript");
    this.timelineHolder = pick("#timeline-holder");
    this.actionCard = pick("#action-card");
    this.badge = pick("#state-badge");
    this.notice = pick("#notice");
    this.iteration = pick("#iteration");
    this.health = pick("#health");
    this.graphHolder = pick("#graph");
    this.chatInput = pick<HTMLInputElement>("#chat-input");
    this.resultInput = pick<HTMLInputElement>("#result-input");

    pick<HTMLFormElement>("#chat-form").addEventListener("submit", (event) => {
      event.preventDefault();
      const text = this.chatInput.value.trim();
      if (!text) return;
      this.chatInput.value = "";
      this.track(() => this.sendMessage(text));
    });
    pick<HTMLFormElement>("#result-form").addEventListener("submit", (event) => {
      event.preventDefault();
      const text = this.resultInput.value.trim();
      if (!text) return;
      this.resultInput.value = "";
      this.track(() => this.sendResult(text));
    });
    pick<HTMLButtonElement>("#graph-refresh").addEventListener("click", () => {
      this.track(() => this.refreshGraph());
    });

    this.store.subscribe((view) => this.render(view));
    this.track(() => this.refreshHealth());
    this.track(() => this.refreshGraph());
  }

  // Serializes UI-triggered work and surfaces failures in the notice line,
  // so a rejected call never becomes an unhandled rejection.
  private track(work: () => Promise<void>): Promise<void> {
    const previous = this.inflight ?? Promise.resolve();
    const chained = previous
      .then(work)
      .catch((err) => this.showError(err))
      .finally(() => {
        if (this.inflight === chained) this.inflight = null;
      });
    this.inflight = chained;
    return chained;
  }

  // Test hook: resolves when every queued action has finished.
  async settle(): Promise<void> {
    while (this.inflight) {
      await this.inflight;
    }
  }

  dispose(): void {
    this.poller?.stop();
    this.poller = null;
  }

  private showError(err: unknown): void {
    const text =
      err instanceof ApiError ? `${err.code}: ${err.detail}` : String(err);
    this.notice.textContent = text;
    this.notice.hidden = false;
  }

  private async refreshHealth(): Promise<void> {
    const health = await this.api.health();
    this.health.textContent = `${health.nodes} nodes, ${health.sessions} sessions`;
  }

  private async refreshGraph(): Promise<void> {
    renderGraph(this.graphHolder, await this.api.graph());
  }

  private async ensureSession(): Promise<string> {
    const existing = this.store.view;
    if (existing) return existing.session_id;
    const view = await this.api.createSession();
    this.store.update(view);
    this.poller = new SessionPoller(this.api, this.store, view.session_id);
    this.poller.start();
    return view.session_id;
  }

  private async sendMessage(text: string): Promise<void> {
    const sessionId = await this.ensureSession();
    const view = await this.api.sendMessage(sessionId, text);
    this.store.update(view);
    await this.drain(view);
  }

  private async sendResult(text: string): Promise<void> {
    const view = this.store.view;
    if (!view) return;
    const next = await this.api.sendResult(view.session_id, text);
    this.store.update(next);
    await this.drain(next);
  }

  // Run the pipeline until the server parks on operator input or finishes.
  private async drain(view: SessionView): Promise<void> {
    if (!PIPELINE_STATES.has(view.state)) return;
    const advanced = await this.api.advance(view.session_id, true);
    this.store.update(advanced);
  }

  private render(view: SessionView): void {
    renderTranscript(this.transcript, view.transcript);
    renderTimeline(this.timelineHolder, view);
    renderActionCard(this.actionCard, view);
    renderStatus(this.badge, this.notice, view);
    this.iteration.textContent =
      view.iteration_count > 0 ? `iteration ${view.iteration_count}` : "";
  }
}

export function initConsole(root: HTMLElement, api: ApiClient): Console {
  return new Console(root, api);
}

const mount = typeof document !== "undefined" ? document.getElementById("app") : null;
if (mount) {
  initConsole(mount, new ApiClient(""));
}
