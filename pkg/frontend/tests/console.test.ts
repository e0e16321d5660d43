// End-to-end console behavior against the in-memory service fake: the
// operator round trip (message -> plan timeline -> manual result card ->
// Resolved), the knowledge-graph explorer, live long-poll updates, and the
// error surface.

import { afterEach, beforeEach, describe, expect, test, vi } from "vitest";

import { ApiClient, ApiError } from "../src/api.js";
import { Console, initConsole } from "../src/main.js";
import { ConsoleStore } from "../src/state.js";
import { renderActionCard, renderGraph } from "../src/render.js";
import type { SessionView } from "../src/types.js";
import { CROSS_GRAPH, FakeServer } from "./fake_server.js";

function submit(form: Element): void {
  form.dispatchEvent(new Event("submit", { bubbles: true, cancelable: true }));
}

describe("operator console", () => {
  let server: FakeServer;
  let root: HTMLElement;
  let console_: Console;

  beforeEach(async () => {
    server = new FakeServer();
    root = document.createElement("div");
    document.body.appendChild(root);
    console_ = initConsole(root, new ApiClient("", server.fetch));
    await console_.settle();
  });

  afterEach(() => {
    console_.dispose();
    root.remove();
  });

  function field<T extends HTMLElement>(selector: string): T {
    const found = root.querySelector<T>(selector);
    if (!found) throw new Error(`missing ${selector}`);
    return found;
  }

  test(
    "round trip: send message, watch plan, submit manual result, resolve",
    async () => {
      // send the incident description
      field<HTMLInputElement>("#chat-input").value = "node-12 is almost out of disk";
      submit(field("#chat-form"));
      await console_.settle();

      // the message was echoed into the transcript and the pipeline drained
      // to the manual pause
      expect(field("#transcript").textContent).toContain("node-12 is almost out of disk");
      expect(field("#state-badge").textContent).toBe("AwaitingManualResult");

      // plan timeline shows all three steps with live statuses and the
      // first step's insight
      const steps = [...root.querySelectorAll<HTMLElement>(".timeline .step")];
      expect(steps).toHaveLength(3);
      expect(steps.map((s) => s.dataset.status)).toEqual([
        "done",
        "awaiting_human",
        "pending",
      ]);
      expect(steps[0].textContent).toContain("disk_full");
      expect(steps[0].textContent).toContain("disk usage 97% critical");
      expect(steps[1].textContent).toContain("Archive logs older than seven days");

      // manual action card is visible with the step's action and outcomes
      const card = field<HTMLElement>("#action-card");
      expect(card.hidden).toBe(false);
      expect(field(".card-action").textContent).toBe(
        "Archive logs older than seven days to cold storage",
      );
      expect(field(".card-outcomes").textContent).toContain("space freed");

      // submit the result through the card
      field<HTMLInputElement>("#result-input").value =
        "archived the logs, space freed on the volume";
      submit(field("#result-form"));
      await console_.settle();

      // the console auto-advanced through the final auto step to Resolved
      expect(field("#state-badge").textContent).toBe("Resolved");
      expect(card.hidden).toBe(true);
      const finalSteps = [...root.querySelectorAll<HTMLElement>(".timeline .step")];
      expect(finalSteps.map((s) => s.dataset.status)).toEqual(["done", "done", "done"]);
      expect(finalSteps[2].textContent).toContain("disk_cleared");
      expect(field("#transcript").textContent).toContain(
        "Mitigation complete: confirmed at disk-pressure/S3.",
      );

      // the round trip hit the real endpoints in order
      const posts = server.calls.filter((c) => c.startsWith("POST"));
      expect(posts).toEqual([
        "POST /sessions",
        "POST /sessions/sess-1/messages",
        "POST /sessions/sess-1/advance?auto=true",
        "POST /sessions/sess-1/results",
        "POST /sessions/sess-1/advance?auto=true",
      ]);
    },
    60_000,
  );

  test("KB explorer draws the graph with a dashed cross-document edge", () => {
    const cross = root.querySelector('[data-edge="db-latency/S1->db-failover/S1"]');
    expect(cross).not.toBeNull();
    expect(cross!.classList.contains("cross")).toBe(true);
    expect(cross!.getAttribute("stroke-dasharray")).toBe("6 4");
    expect(cross!.getAttribute("data-outcome")).toBe("lag_high");

    const internal = root.querySelector('[data-edge="db-latency/S1->db-latency/S2"]');
    expect(internal).not.toBeNull();
    expect(internal!.classList.contains("cross")).toBe(false);
    expect(internal!.getAttribute("stroke-dasharray")).toBeNull();

    // every node is drawn; the unresolved edge is not
    for (const node of CROSS_GRAPH.nodes) {
      expect(root.querySelector(`[data-node="${node.node_id}"]`)).not.toBeNull();
    }
    expect(root.querySelectorAll(".graph .edge")).toHaveLength(3);
    expect(field("#health").textContent).toBe("4 nodes, 0 sessions");
  });

  test("long-poll applies an external update without operator input", async () => {
    field<HTMLInputElement>("#chat-input").value = "node-12 is almost out of disk";
    submit(field("#chat-form"));
    await console_.settle();
    expect(field("#state-badge").textContent).toBe("AwaitingManualResult");

    // someone else finishes the session; the parked poll must deliver it
    server.pushResolved();
    await vi.waitFor(() => {
      expect(field("#state-badge").textContent).toBe("Resolved");
    });
    expect(field("#transcript").textContent).toContain("Mitigation complete");
  });

  test("a rejected call surfaces in the notice line instead of vanishing", async () => {
    field<HTMLInputElement>("#chat-input").value = "node-12 is almost out of disk";
    submit(field("#chat-form"));
    await console_.settle();

    // messages are invalid while a manual step is pending
    field<HTMLInputElement>("#chat-input").value = "are you still there?";
    submit(field("#chat-form"));
    await console_.settle();

    const notice = field<HTMLElement>("#notice");
    expect(notice.hidden).toBe(false);
    expect(notice.textContent).toContain("InvalidState");
    expect(field("#state-badge").textContent).toBe("AwaitingManualResult");
  });
});

describe("store", () => {
  const base: SessionView = {
    schema_version: 1,
    session_id: "sess-1",
    state: "Planning",
    iteration_count: 1,
    transcript: [],
    plan: null,
    pending_manual_action: null,
    last_seq: 5,
    created_at: "t000001",
    updated_at: "t000005",
  };

  test("ignores stale and duplicate views for the same session", () => {
    const store = new ConsoleStore();
    let renders = 0;
    store.subscribe(() => {
      renders += 1;
    });
    expect(store.update(base)).toBe(true);
    expect(store.update({ ...base, last_seq: 3 })).toBe(false);
    expect(store.update({ ...base, last_seq: 5 })).toBe(false);
    expect(store.update({ ...base, last_seq: 6 })).toBe(true);
    expect(renders).toBe(2);
    expect(store.lastSeq).toBe(6);
  });

  test("accepts a view for a different session unconditionally", () => {
    const store = new ConsoleStore();
    store.update(base);
    expect(store.update({ ...base, session_id: "sess-2", last_seq: 1 })).toBe(true);
    expect(store.view?.session_id).toBe("sess-2");
  });
});

describe("api client", () => {
  test("maps error bodies to ApiError", async () => {
    const api = new ApiClient("", async () => ({
      ok: false,
      status: 409,
      json: async () => ({
        schema_version: 1,
        error: "InvalidState",
        detail: "session sess-1 does not accept messages in this state",
      }),
    }));
    const err = await api.sendMessage("sess-1", "hi").catch((e: unknown) => e);
    expect(err).toBeInstanceOf(ApiError);
    expect((err as ApiError).status).toBe(409);
    expect((err as ApiError).code).toBe("InvalidState");
    expect((err as ApiError).message).toContain("does not accept messages");
  });

  test("builds long-poll query strings", async () => {
    const urls: string[] = [];
    const api = new ApiClient("", async (url) => {
      urls.push(url);
      return { ok: true, status: 200, json: async () => ({}) };
    });
    await api.getSession("sess-1");
    await api.getSession("sess-1", 7, 25);
    expect(urls).toEqual([
      "/sessions/sess-1",
      "/sessions/sess-1?wait_seq=7&timeout=25",
    ]);
  });
});

describe("renderers", () => {
  test("empty knowledge base gets a placeholder instead of an svg", () => {
    const holder = document.createElement("div");
    renderGraph(holder, { schema_version: 1, nodes: [], edges: [] });
    expect(holder.querySelector("svg")).toBeNull();
    expect(holder.textContent).toContain("empty");
  });

  test("action card hides in every state except AwaitingManualResult", () => {
    const card = document.createElement("div");
    card.innerHTML = '<p class="card-action"></p><div class="card-outcomes"></div>';
    const view: SessionView = {
      schema_version: 1,
      session_id: "sess-1",
      state: "Planning",
      iteration_count: 1,
      transcript: [],
      plan: null,
      pending_manual_action: null,
      last_seq: 4,
      created_at: "t000001",
      updated_at: "t000004",
    };
    renderActionCard(card, view);
    expect(card.hidden).toBe(true);

    renderActionCard(card, {
      ...view,
      state: "AwaitingManualResult",
      pending_manual_action: {
        step_index: 1,
        action: "Archive logs older than seven days to cold storage",
        expected_outcomes: ["space freed"],
      },
    });
    expect(card.hidden).toBe(false);
    expect(card.querySelector(".card-action")?.textContent).toContain("Archive logs");
  });
});
