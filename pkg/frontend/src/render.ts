// DOM rendering. Pure functions from server payloads to elements; no state.

import type {
  GraphExport,
  GraphNode,
  PlanStepView,
  SessionView,
  TranscriptTurn,
} from "./types.js";

const SVG_NS = "http://www.w3.org/2000/svg";

function el<K extends keyof HTMLElementTagNameMap>(
  tag: K,
  className?: string,
  text?: string,
): HTMLElementTagNameMap[K] {
  const node = document.createElement(tag);
  if (className) node.className = className;
  if (text !== undefined) node.textContent = text;
  return node;
}

// -- transcript ---------------------------------------------------------------

export function renderTranscript(container: HTMLElement, turns: TranscriptTurn[]): void {
  container.replaceChildren();
  for (const turn of turns) {
    const row = el("div", `turn ${turn.role}`);
    row.appendChild(el("span", "who", turn.role === "oce" ? "you" : "copilot"));
    row.appendChild(el("span", "text", turn.text));
    row.title = turn.timestamp;
    container.appendChild(row);
  }
  container.scrollTop = container.scrollHeight;
}

// -- plan timeline --------------------------------------------------------------

function renderStep(step: PlanStepView): HTMLElement {
  const item = el("li", `step ${step.status}`);
  item.dataset.status = step.status;
  item.dataset.stepIndex = String(step.step_index);

  const head = el("div", "step-head");
  head.appendChild(el("span", "step-index", String(step.step_index + 1)));
  head.appendChild(el("span", "step-action", step.action));
  head.appendChild(el("span", `chip mode-${step.mode}`, step.mode));
  if (step.plugin) head.appendChild(el("span", "chip plugin", step.plugin));
  head.appendChild(el("span", `chip status-${step.status}`, step.status.replace("_", " ")));
  item.appendChild(head);

  if (step.expected_outcomes.length > 0) {
    const outcomes = el("div", "expected");
    outcomes.appendChild(el("span", "expected-label", "expects:"));
    for (const label of step.expected_outcomes) {
      outcomes.appendChild(el("span", "chip outcome", label));
    }
    item.appendChild(outcomes);
  }

  if (step.insight) {
    const insight = el("div", "insight");
    insight.appendChild(el("span", "chip outcome got", step.insight.outcome_label));
    insight.appendChild(el("span", "insight-summary", step.insight.summary));
    item.appendChild(insight);
  }
  return item;
}

export function renderTimeline(container: HTMLElement, view: SessionView): void {
  container.replaceChildren();
  if (!view.plan) {
    container.appendChild(el("p", "placeholder", "No plan yet."));
    return;
  }
  const meta = el("div", "plan-meta");
  meta.appendChild(el("span", "rationale", view.plan.rationale));
  meta.appendChild(
    el("span", "chip reviewed", view.plan.reviewed ? "expert reviewed" : "unreviewed"),
  );
  meta.appendChild(el("span", "chip nodes", view.plan.source_nodes.join(", ")));
  container.appendChild(meta);

  const list = el("ol", "timeline");
  for (const step of view.plan.steps) list.appendChild(renderStep(step));
  container.appendChild(list);
}

// -- manual action card ---------------------------------------------------------

// The card is visible only while the session waits on a human. The submit
// handler is wired once by the caller; this only fills the card's content.
export function renderActionCard(card: HTMLElement, view: SessionView): void {
  const pending = view.pending_manual_action;
  if (view.state !== "AwaitingManualResult" || !pending) {
    card.hidden = true;
    return;
  }
  card.hidden = false;
  const action = card.querySelector(".card-action");
  if (action) action.textContent = pending.action;
  const outcomes = card.querySelector(".card-outcomes");
  if (outcomes) {
    outcomes.replaceChildren();
    for (const label of pending.expected_outcomes) {
      outcomes.appendChild(el("span", "chip outcome", label));
    }
  }
}

// -- status line -----------------------------------------------------------------

export function renderStatus(badge: HTMLElement, notice: HTMLElement, view: SessionView): void {
  badge.textContent = view.state;
  badge.dataset.state = view.state;
  badge.className = `badge state-${view.state.toLowerCase()}`;

  const parts: string[] = [];
  if (view.escalation_reason) parts.push(`escalated: ${view.escalation_reason}`);
  if (view.error) {
    parts.push(view.diagnostic_id ? `${view.error} [${view.diagnostic_id}]` : view.error);
  }
  notice.textContent = parts.join(" | ");
  notice.hidden = parts.length === 0;
}

// -- knowledge graph explorer -----------------------------------------------------

interface LayoutBox {
  x: number;
  y: number;
}

const BOX_W = 190;
const BOX_H = 54;
const COL_GAP = 80;
const ROW_GAP = 36;
const MARGIN = 24;

// Column per source document, row per node within it. Crude but readable,
// and it makes cross document edges span columns so they stand out.
function layoutNodes(nodes: GraphNode[]): Map<string, LayoutBox> {
  const columns = new Map<string, GraphNode[]>();
  for (const node of nodes) {
    const column = columns.get(node.source_id) ?? [];
    column.push(node);
    columns.set(node.source_id, column);
  }
  const boxes = new Map<string, LayoutBox>();
  let col = 0;
  for (const [, members] of [...columns.entries()].sort()) {
    members.sort((a, b) => (a.node_id < b.node_id ? -1 : 1));
    members.forEach((node, row) => {
      boxes.set(node.node_id, {
        x: MARGIN + col * (BOX_W + COL_GAP),
        y: MARGIN + 28 + row * (BOX_H + ROW_GAP),
      });
    });
    col += 1;
  }
  return boxes;
}

function svgEl(tag: string, attrs: Record<string, string>): SVGElement {
  const node = document.createElementNS(SVG_NS, tag);
  for (const [key, value] of Object.entries(attrs)) node.setAttribute(key, value);
  return node;
}

export function renderGraph(container: HTMLElement, graph: GraphExport): void {
  container.replaceChildren();
  if (graph.nodes.length === 0) {
    container.appendChild(el("p", "placeholder", "Knowledge base is empty."));
    return;
  }

  const boxes = layoutNodes(graph.nodes);
  const sources = [...new Set(graph.nodes.map((n) => n.source_id))].sort();
  const rowsPerSource = new Map<string, number>();
  for (const node of graph.nodes) {
    rowsPerSource.set(node.source_id, (rowsPerSource.get(node.source_id) ?? 0) + 1);
  }
  const maxRows = Math.max(...rowsPerSource.values());
  const width = MARGIN * 2 + sources.length * BOX_W + (sources.length - 1) * COL_GAP;
  const height = MARGIN * 2 + 28 + maxRows * (BOX_H + ROW_GAP);

  const svg = svgEl("svg", {
    viewBox: `0 0 ${width} ${height}`,
    width: String(width),
    height: String(height),
    role: "img",
  }) as SVGSVGElement;

  const defs = svgEl("defs", {});
  const marker = svgEl("marker", {
    id: "arrow",
    viewBox: "0 0 10 10",
    refX: "9",
    refY: "5",
    markerWidth: "7",
    markerHeight: "7",
    orient: "auto-start-reverse",
  });
  marker.appendChild(svgEl("path", { d: "M 0 0 L 10 5 L 0 10 z", class: "arrowhead" }));
  defs.appendChild(marker);
  svg.appendChild(defs);

  sources.forEach((source, index) => {
    const label = svgEl("text", {
      x: String(MARGIN + index * (BOX_W + COL_GAP)),
      y: String(MARGIN + 8),
      class: "column-label",
    });
    label.textContent = source;
    svg.appendChild(label);
  });

  for (const edge of graph.edges) {
    if (!edge.target) continue;
    const from = boxes.get(edge.source);
    const to = boxes.get(edge.target);
    if (!from || !to) continue;
    const x1 = from.x + BOX_W / 2;
    const y1 = from.y + BOX_H;
    const x2 = to.x + BOX_W / 2;
    const y2 = to.y;
    const midY = (y1 + y2) / 2;
    const path = svgEl("path", {
      d: `M ${x1} ${y1} C ${x1} ${midY}, ${x2} ${midY}, ${x2} ${y2}`,
      class: edge.cross_tsg ? "edge cross" : "edge",
      "marker-end": "url(#arrow)",
      "data-edge": `${edge.source}->${edge.target}`,
      "data-cross": String(edge.cross_tsg),
      "data-outcome": edge.outcome_label,
    });
    if (edge.cross_tsg) path.setAttribute("stroke-dasharray", "6 4");
    const title = svgEl("title", {});
    title.textContent = `${edge.outcome_label} (score ${edge.score?.toFixed(2) ?? "?"})`;
    path.appendChild(title);
    svg.appendChild(path);

    const labelEl = svgEl("text", {
      x: String((x1 + x2) / 2),
      y: String(midY - 4),
      class: "edge-label",
      "text-anchor": "middle",
    });
    labelEl.textContent = edge.outcome_label;
    svg.appendChild(labelEl);
  }

  for (const node of graph.nodes) {
    const box = boxes.get(node.node_id);
    if (!box) continue;
    const group = svgEl("g", { class: `node type-${node.node_type}`, "data-node": node.node_id });
    group.appendChild(
      svgEl("rect", {
        x: String(box.x),
        y: String(box.y),
        width: String(BOX_W),
        height: String(BOX_H),
        rx: "8",
      }),
    );
    const idText = svgEl("text", {
      x: String(box.x + 10),
      y: String(box.y + 22),
      class: "node-id",
    });
    idText.textContent = node.node_id;
    group.appendChild(idText);
    const typeText = svgEl("text", {
      x: String(box.x + 10),
      y: String(box.y + 42),
      class: "node-type",
    });
    typeText.textContent = node.node_type;
    group.appendChild(typeText);
    const title = svgEl("title", {});
    title.textContent = node.intent;
    group.appendChild(title);
    svg.appendChild(group);
  }

  container.appendChild(svg);
}
