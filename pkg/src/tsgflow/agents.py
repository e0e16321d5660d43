"""The four LLM-backed agents: interpret, select, plan, review.

Each agent is a thin recipe: render a prompt template, make one
schema-constrained provider call, then deterministically post-validate the
output. The provider is never trusted with an invariant. Selection must be
a subset of the retrieved candidates, the plugin registry alone decides
whether a step runs automatically, and the reviewing expert can touch only
action text and expected outcomes. Violations are re-prompted with the
rejection message appended, within a fixed retry budget.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, replace
from enum import Enum
from string import Template
from typing import Sequence

from .compiler import KnowledgeNode
from .errors import EmptyPlan, ProviderError, SchemaViolation
from .providers import ChatRequest, LLMProvider, Message, load_prompt
from .store import ScoredNode

logger = logging.getLogger(__name__)

AGENT_RETRY_BUDGET = 2  # re-prompts after the initial attempt
MEMORY_TURN_LIMIT = 20


class StepMode(str, Enum):
    AUTO = "auto"
    MANUAL = "manual"


@dataclass(frozen=True)
class IntentResult:
    kind: str  # "clarified" | "needs_clarification" | "off_topic"
    clarified_intent: str | None = None
    clarification_question: str | None = None


@dataclass(frozen=True)
class PlanStep:
    step_index: int
    action: str
    mode: StepMode
    node_id: str | None = None
    plugin: str | None = None
    expected_outcomes: tuple[str, ...] = ()

    def __post_init__(self):
        if (self.mode is StepMode.AUTO) != (self.plugin is not None):
            raise ValueError(
                f"step {self.step_index}: auto mode and plugin presence must coincide"
            )

    def to_dict(self) -> dict:
        return {
            "step_index": self.step_index,
            "action": self.action,
            "mode": self.mode.value,
            "node_id": self.node_id,
            "plugin": self.plugin,
            "expected_outcomes": list(self.expected_outcomes),
        }


@dataclass(frozen=True)
class ActionPlan:
    steps: tuple[PlanStep, ...]
    rationale: str
    source_nodes: tuple[str, ...]
    reviewed: bool = False

    def to_dict(self) -> dict:
        return {
            "steps": [step.to_dict() for step in self.steps],
            "rationale": self.rationale,
            "source_nodes": list(self.source_nodes),
            "reviewed": self.reviewed,
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "ActionPlan":
        return cls(
            steps=tuple(
                PlanStep(
                    step_index=s["step_index"],
                    action=s["action"],
                    mode=StepMode(s["mode"]),
                    node_id=s.get("node_id"),
                    plugin=s.get("plugin"),
                    expected_outcomes=tuple(s.get("expected_outcomes", [])),
                )
                for s in payload["steps"]
            ),
            rationale=payload.get("rationale", ""),
            source_nodes=tuple(payload.get("source_nodes", [])),
            reviewed=bool(payload.get("reviewed", False)),
        )


@dataclass(frozen=True)
class MemoryView:
    """What an agent may see of the session: recent turns plus insights."""

    turns: tuple[tuple[str, str], ...] = ()  # (role, text), newest last
    insights: tuple[str, ...] = ()

    def render(self) -> str:
        lines = [f"{role}: {text}" for role, text in self.turns]
        lines.extend(f"insight: {text}" for text in self.insights)
        return "\n".join(lines) if lines else "(empty)"


def _chat_with_retry(
    provider: LLMProvider,
    agent: str,
    schema_id: str,
    system_text: str,
    user_text: str,
    validate,
    retries: int = AGENT_RETRY_BUDGET,
):
    """One agent call: chat, post-validate, re-prompt on violation.

    `validate` receives the schema-valid payload and either returns the
    final value or raises SchemaViolation; that message is appended to the
    re-prompt so the provider can correct the specific problem.
    """
    attempt_user = user_text
    last_error: SchemaViolation | None = None
    for _ in range(retries + 1):
        try:
            payload = provider.chat(
                ChatRequest(
                    agent=agent,
                    messages=(
                        Message(role="system", content=system_text),
                        Message(role="user", content=attempt_user),
                    ),
                    output_schema=schema_id,
                )
            )
            return validate(payload)
        except SchemaViolation as exc:
            last_error = exc
            logger.debug("agent %s output rejected: %s", agent, exc)
            attempt_user = (
                f"{user_text}\n\nYour previous reply was rejected: {exc}. "
                f"Reply again, following the output schema exactly."
            )
    assert last_error is not None
    raise last_error


def interpret_intent(
    message: str,
    memory: MemoryView,
    provider: LLMProvider,
    retries: int = AGENT_RETRY_BUDGET,
) -> IntentResult:
    """Clarify what the operator wants, ask back, or flag off-topic chatter."""
    if not message.strip():
        raise ValueError("message is empty")
    system = Template(load_prompt("intent_interpreter")).substitute(memory=memory.render())

    def validate(payload: dict) -> IntentResult:
        kind = payload["kind"]
        clarified = payload.get("clarified_intent")
        question = payload.get("clarification_question")
        if kind == "clarified":
            if not clarified or not clarified.strip() or question:
                raise SchemaViolation(
                    "kind=clarified requires clarified_intent and nothing else",
                    json.dumps(payload),
                    "intent_result.v1",
                )
        elif kind == "needs_clarification":
            if not question or not question.strip() or clarified:
                raise SchemaViolation(
                    "kind=needs_clarification requires clarification_question and nothing else",
                    json.dumps(payload),
                    "intent_result.v1",
                )
        else:  # off_topic
            if clarified or question:
                raise SchemaViolation(
                    "kind=off_topic must not carry intent or question text",
                    json.dumps(payload),
                    "intent_result.v1",
                )
        return IntentResult(
            kind=kind, clarified_intent=clarified, clarification_question=question
        )

    return _chat_with_retry(
        provider, "intent_interpreter", "intent_result.v1", system, message, validate, retries
    )


def select_nodes(
    clarified_intent: str,
    candidates: Sequence[ScoredNode],
    provider: LLMProvider,
    retries: int = AGENT_RETRY_BUDGET,
) -> list[KnowledgeNode]:
    """Keep the relevant subset of retrieved candidates, in retrieval order.

    An empty selection is a meaningful answer (the incident is out of
    scope), and empty candidates short-circuit without a provider call.
    """
    if not candidates:
        return []
    candidate_ids = [scored.node.node_id for scored in candidates]
    rendered = "\n".join(
        f"- {s.node.node_id} (score {s.score:.4f}): intent={s.node.intent!r} "
        f"action={s.node.action!r}"
        for s in candidates
    )
    system = Template(load_prompt("node_selector")).substitute(candidates=rendered)

    def validate(payload: dict) -> list[KnowledgeNode]:
        selected = payload["selected_node_ids"]
        unknown = [nid for nid in selected if nid not in candidate_ids]
        if unknown:
            raise SchemaViolation(
                f"selection must be a subset of the candidates; unknown ids {unknown}",
                json.dumps(payload),
                "node_selection.v1",
            )
        if len(set(selected)) != len(selected):
            raise SchemaViolation(
                "selection contains duplicate ids", json.dumps(payload), "node_selection.v1"
            )
        chosen = set(selected)
        return [s.node for s in candidates if s.node.node_id in chosen]

    return _chat_with_retry(
        provider,
        "node_selector",
        "node_selection.v1",
        system,
        clarified_intent,
        validate,
        retries,
    )


def plan_actions(
    selected: Sequence[KnowledgeNode],
    memory: MemoryView,
    registry,
    provider: LLMProvider,
    retries: int = AGENT_RETRY_BUDGET,
) -> ActionPlan:
    """Turn selected nodes into an ordered plan of auto and manual steps.

    The provider proposes plugins; the registry decides. A proposed plugin
    that is not registered demotes the step to manual rather than erroring,
    and a schema-valid plan with zero steps raises EmptyPlan, which the
    orchestrator treats as an escalation signal, so it is not retried.
    """
    if not selected:
        raise ValueError("plan_actions requires at least one selected node")
    source_ids = [node.node_id for node in selected]
    rendered_nodes = "\n".join(
        f"- {n.node_id}: intent={n.intent!r} action={n.action!r} "
        f"executable_hint={n.executable_hint!r} outcomes={[l.outcome_label for l in n.linkers]}"
        for n in selected
    )
    system = Template(load_prompt("action_planner")).substitute(
        nodes=rendered_nodes, plugins=registry.describe(), memory=memory.render()
    )
    by_id = {node.node_id: node for node in selected}

    def validate(payload: dict) -> ActionPlan:
        steps: list[PlanStep] = []
        for i, raw in enumerate(payload["steps"]):
            node_id = raw.get("node_id")
            if node_id is not None and node_id not in by_id:
                raise SchemaViolation(
                    f"step {i} references node {node_id!r} outside the selected set",
                    json.dumps(payload),
                    "action_plan.v1",
                )
            proposed = raw.get("plugin")
            if proposed and registry.has(proposed):
                mode, plugin = StepMode.AUTO, proposed
            else:
                mode, plugin = StepMode.MANUAL, None
            expected = tuple(raw.get("expected_outcomes", []))
            if not expected and node_id is not None:
                expected = tuple(l.outcome_label for l in by_id[node_id].linkers)
            steps.append(
                PlanStep(
                    step_index=i,
                    action=raw["action"],
                    mode=mode,
                    node_id=node_id,
                    plugin=plugin,
                    expected_outcomes=expected,
                )
            )
        return ActionPlan(
            steps=tuple(steps),
            rationale=payload.get("rationale", ""),
            source_nodes=tuple(source_ids),
        )

    plan = _chat_with_retry(
        provider,
        "action_planner",
        "action_plan.v1",
        system,
        "nodes=" + ",".join(source_ids),
        validate,
        retries,
    )
    if not plan.steps:
        raise EmptyPlan("planner returned a schema-valid plan with zero steps")
    return plan


def plan_editable_view(plan: ActionPlan) -> dict:
    """The only plan fields a reviewing expert may touch."""
    return {
        "steps": [
            {
                "step_index": step.step_index,
                "action": step.action,
                "expected_outcomes": list(step.expected_outcomes),
            }
            for step in plan.steps
        ]
    }


def post_process(
    plan: ActionPlan,
    expert_provider: LLMProvider | None,
    retries: int = AGENT_RETRY_BUDGET,
) -> ActionPlan:
    """Let a domain-expert provider revise action text and expected outcomes.

    Step count, ordering, node provenance, modes, and plugins are rebuilt
    from the original plan, so they cannot change no matter what the expert
    replies. An unreachable or persistently invalid expert degrades to the
    original plan flagged unreviewed.
    """
    if expert_provider is None:
        return replace(plan, reviewed=False)
    view = json.dumps(plan_editable_view(plan), sort_keys=True, separators=(",", ":"))
    system = Template(load_prompt("plan_reviewer")).substitute(rationale=plan.rationale)

    def validate(payload: dict) -> ActionPlan:
        revisions: dict[int, dict] = {}
        for entry in payload["steps"]:
            idx = entry["step_index"]
            if idx >= len(plan.steps):
                raise SchemaViolation(
                    f"review entry for nonexistent step_index {idx}",
                    json.dumps(payload),
                    "plan_review.v1",
                )
            if idx in revisions:
                raise SchemaViolation(
                    f"two review entries for step_index {idx}",
                    json.dumps(payload),
                    "plan_review.v1",
                )
            revisions[idx] = entry
        steps = []
        for step in plan.steps:
            entry = revisions.get(step.step_index)
            if entry is None:
                steps.append(step)
                continue
            steps.append(
                replace(
                    step,
                    action=entry["action"],
                    expected_outcomes=tuple(
                        entry.get("expected_outcomes", list(step.expected_outcomes))
                    ),
                )
            )
        return replace(plan, steps=tuple(steps), reviewed=True)

    try:
        return _chat_with_retry(
            expert_provider, "post_processor", "plan_review.v1", system, view, validate, retries
        )
    except (ProviderError, SchemaViolation) as exc:
        logger.warning("plan review unavailable, passing plan through unreviewed: %s", exc)
        return replace(plan, reviewed=False)
