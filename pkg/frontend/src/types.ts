// Wire types mirroring the tsgflow HTTP service bodies. Every response
// carries schema_version; keep these in sync with the server by hand.

export type SessionState =
  | "AwaitingMessage"
  | "Clarifying"
  | "Retrieving"
  | "Planning"
  | "ExecutingAuto"
  | "AwaitingManualResult"
  | "Escalated"
  | "Resolved"
  | "Failed";

// States where the server is mid-pipeline and an advance call makes progress.
export const PIPELINE_STATES: ReadonlySet<SessionState> = new Set([
  "Retrieving",
  "Planning",
  "ExecutingAuto",
]);

// States that accept no further input of any kind.
export const ABSORBING_STATES: ReadonlySet<SessionState> = new Set([
  "Escalated",
  "Resolved",
  "Failed",
]);

export type StepMode = "auto" | "manual";
export type StepStatus = "done" | "running" | "awaiting_human" | "pending";

export interface Insight {
  step_index: number;
  source: string;
  outcome_label: string;
  raw_output: string;
  summary: string;
  produced_at: string;
}

export interface PlanStepView {
  step_index: number;
  action: string;
  mode: StepMode;
  node_id: string;
  plugin: string | null;
  expected_outcomes: string[];
  status: StepStatus;
  insight: Insight | null;
}

export interface PlanView {
  steps: PlanStepView[];
  rationale: string;
  source_nodes: string[];
  reviewed: boolean;
}

export interface TranscriptTurn {
  role: "oce" | "copilot";
  text: string;
  timestamp: string;
}

export interface PendingManualAction {
  step_index: number;
  action: string;
  expected_outcomes: string[];
}

export interface SessionView {
  schema_version: number;
  session_id: string;
  state: SessionState;
  iteration_count: number;
  transcript: TranscriptTurn[];
  plan: PlanView | null;
  pending_manual_action: PendingManualAction | null;
  last_seq: number;
  created_at: string | null;
  updated_at: string | null;
  escalation_reason?: string;
  error?: string;
  diagnostic_id?: string | null;
}

export interface GraphLinker {
  outcome_label: string;
  target_intent: string;
  resolved_target: string | null;
  resolution_score: number | null;
}

export interface GraphNode {
  kind: "node";
  node_id: string;
  node_type: string;
  intent: string;
  action: string;
  linkers: GraphLinker[];
  source_kind: string;
  source_id: string;
  executable_hint: string | null;
  provenance: string[];
}

export interface GraphEdge {
  source: string;
  target: string | null;
  outcome_label: string;
  target_intent: string;
  score: number | null;
  cross_tsg: boolean;
}

export interface GraphExport {
  schema_version: number;
  nodes: GraphNode[];
  edges: GraphEdge[];
}

export interface HealthView {
  schema_version: number;
  status: string;
  nodes: number;
  sessions: number;
}

export interface SessionList {
  schema_version: number;
  sessions: string[];
}

export interface ErrorBody {
  schema_version: number;
  error: string;
  detail: string;
  diagnostic_id?: string;
}
