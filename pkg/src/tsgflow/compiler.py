"""Lower structured TSGs into knowledge nodes and resolve the linker graph.

Compilation is deterministic and per-document: one node per flow step,
internal outcome references becoming resolved linkers immediately.
Resolution is a separate corpus-wide pass that matches the remaining
external intents against every node intent by embedding similarity, which
is how mitigation flows spanning several documents get stitched together.
A third path mines (intent, action, outcome) triples out of past incident
discussions and stages them as patches for review before anything touches
the knowledge base.
"""

from __future__ import annotations

import hashlib
import logging
import re
from dataclasses import dataclass, replace
from enum import Enum
from typing import Callable, Sequence

import numpy as np

from .errors import CompileError
from .providers import ChatRequest, LLMProvider, Message, load_prompt
from .tsg import StructuredTSG, validate_quality

logger = logging.getLogger(__name__)

RESOLUTION_THRESHOLD = 0.75
DUPLICATE_THRESHOLD = 0.9

_CHECK_PATTERN = re.compile(r"^(check|verify|confirm)\b", re.IGNORECASE)


class NodeType(str, Enum):
    ACTION = "action"
    DECISION = "decision"
    CHECK = "check"
    TERMINAL = "terminal"


@dataclass(frozen=True)
class Linker:
    """One labeled outcome edge: from an action result to a successor intent."""

    outcome_label: str
    target_intent: str
    resolved_target: str | None = None
    resolution_score: float | None = None


@dataclass(frozen=True)
class KnowledgeNode:
    node_id: str
    node_type: NodeType
    intent: str
    action: str
    linkers: tuple[Linker, ...]
    source_kind: str  # "tsg" | "history"
    source_id: str
    executable_hint: str | None = None
    provenance: tuple[str, ...] = ()

    def __post_init__(self):
        if not self.intent.strip():
            raise ValueError(f"node {self.node_id}: intent must be non-empty")
        if (self.node_type is NodeType.TERMINAL) != (not self.linkers):
            raise ValueError(
                f"node {self.node_id}: terminal type and empty linkers must coincide"
            )
        labels = [l.outcome_label for l in self.linkers]
        if len(labels) != len(set(labels)):
            raise ValueError(f"node {self.node_id}: duplicate outcome labels")


@dataclass(frozen=True)
class HistoryPatch:
    patch_id: str
    kind: str  # "new_node" | "update_action"
    provenance: str
    similarity_to_existing: float
    node: KnowledgeNode | None = None  # new_node
    node_id: str | None = None  # update_action
    new_action: str | None = None  # update_action


@dataclass(frozen=True)
class HistoryRecord:
    record_id: str
    text: str


@dataclass(frozen=True)
class ResolvedLink:
    node_id: str
    outcome_label: str
    target: str
    score: float


@dataclass(frozen=True)
class UnresolvedLink:
    node_id: str
    outcome_label: str
    target_intent: str
    best_score: float


@dataclass(frozen=True)
class ResolutionReport:
    resolved: tuple[ResolvedLink, ...] = ()
    unresolved: tuple[UnresolvedLink, ...] = ()

    def to_dict(self) -> dict:
        return {
            "resolved": [
                {
                    "node_id": r.node_id,
                    "outcome_label": r.outcome_label,
                    "target": r.target,
                    "score": r.score,
                }
                for r in self.resolved
            ],
            "unresolved": [
                {
                    "node_id": u.node_id,
                    "outcome_label": u.outcome_label,
                    "target_intent": u.target_intent,
                    "best_score": u.best_score,
                }
                for u in self.unresolved
            ],
        }


def classify_node(action: str, linker_count: int) -> NodeType:
    """Deterministic node typing from linker fan-out and action phrasing."""
    if linker_count == 0:
        return NodeType.TERMINAL
    if linker_count >= 2:
        return NodeType.DECISION
    if _CHECK_PATTERN.match(action.strip()):
        return NodeType.CHECK
    return NodeType.ACTION


def compile_tsg(tsg: StructuredTSG) -> list[KnowledgeNode]:
    """Produce exactly one KnowledgeNode per flow step.

    Internal outcome targets become linkers resolved at score 1.0; external
    intents stay unresolved until the corpus-wide resolution pass. Outcomes
    marked terminal carry no successor and therefore produce no linker.
    """
    report = validate_quality(tsg)
    if not report.passed:
        raise CompileError(f"TSG {tsg.tsg_id} fails quality checks: {report.describe()}")

    intents = {step.step_id: step.intent for step in tsg.flow}
    nodes: list[KnowledgeNode] = []
    for step in tsg.flow:
        linkers: list[Linker] = []
        for label in sorted(step.outcomes):
            target = step.outcomes[label]
            if target.kind == "terminal":
                continue
            if target.kind == "step":
                linkers.append(
                    Linker(
                        outcome_label=label,
                        target_intent=intents[target.step_id],
                        resolved_target=f"{tsg.tsg_id}/{target.step_id}",
                        resolution_score=1.0,
                    )
                )
            else:
                linkers.append(
                    Linker(outcome_label=label, target_intent=target.external_intent or "")
                )
        try:
            nodes.append(
                KnowledgeNode(
                    node_id=f"{tsg.tsg_id}/{step.step_id}",
                    node_type=classify_node(step.action, len(linkers)),
                    intent=step.intent,
                    action=step.action,
                    linkers=tuple(linkers),
                    source_kind="tsg",
                    source_id=tsg.tsg_id,
                    executable_hint=step.executable_hint,
                )
            )
        except ValueError as exc:
            # Unreachable for quality-validated input; indicates a validator bug.
            raise CompileError(str(exc)) from exc
    return nodes


def resolve_linkers(
    nodes: Sequence[KnowledgeNode],
    embed_text: Callable[[str], np.ndarray],
    tau: float = RESOLUTION_THRESHOLD,
) -> tuple[list[KnowledgeNode], ResolutionReport]:
    """Match unresolved linker intents against every node intent in the corpus.

    A linker resolves to the most similar foreign node when that similarity
    reaches tau, ties broken by lexicographically smallest node_id. Returns
    the rewritten node list plus a report covering the whole graph (all
    edges currently resolved, all still dangling), so running the pass
    twice yields the same nodes and the same report.
    """
    by_id = {node.node_id: node for node in nodes}
    ordered_ids = sorted(by_id)
    matrix = np.stack([embed_text(by_id[nid].intent) for nid in ordered_ids]) if ordered_ids else None

    resolved_entries: list[ResolvedLink] = []
    unresolved_entries: list[UnresolvedLink] = []
    out_nodes: list[KnowledgeNode] = []
    for node in nodes:
        new_linkers: list[Linker] = []
        changed = False
        for linker in node.linkers:
            if linker.resolved_target is not None and linker.resolved_target in by_id:
                new_linkers.append(linker)
                resolved_entries.append(
                    ResolvedLink(
                        node.node_id,
                        linker.outcome_label,
                        linker.resolved_target,
                        float(linker.resolution_score or 0.0),
                    )
                )
                continue
            # Unresolved, or resolved against a node that no longer exists.
            if linker.resolved_target is not None:
                linker = replace(linker, resolved_target=None, resolution_score=None)
                changed = True
            scores = matrix @ embed_text(linker.target_intent) if matrix is not None else None
            best_id, best_score = None, 0.0
            if scores is not None:
                for idx, candidate_id in enumerate(ordered_ids):
                    if candidate_id == node.node_id:
                        continue
                    score = float(scores[idx])
                    if score > best_score:
                        best_id, best_score = candidate_id, score
            if best_id is not None and by_id[best_id].intent == linker.target_intent:
                # Identical text is similarity 1 by definition; do not let
                # float rounding in the dot product say otherwise.
                best_score = 1.0
            if best_id is not None and best_score >= tau:
                linker = replace(linker, resolved_target=best_id, resolution_score=best_score)
                changed = True
                resolved_entries.append(
                    ResolvedLink(node.node_id, linker.outcome_label, best_id, best_score)
                )
            else:
                unresolved_entries.append(
                    UnresolvedLink(
                        node.node_id, linker.outcome_label, linker.target_intent, best_score
                    )
                )
            new_linkers.append(linker)
        out_nodes.append(replace(node, linkers=tuple(new_linkers)) if changed else node)
    return out_nodes, ResolutionReport(tuple(resolved_entries), tuple(unresolved_entries))


def history_node_id(intent: str, action: str) -> str:
    digest = hashlib.blake2b(f"{intent}\x1f{action}".encode("utf-8"), digest_size=6).hexdigest()
    return f"hist/{digest}"


def enhance_from_history(
    discussions: Sequence[HistoryRecord],
    kb,
    provider: LLMProvider,
    dup_threshold: float = DUPLICATE_THRESHOLD,
) -> list[HistoryPatch]:
    """Mine mitigation triples from incident discussions and stage patches.

    Nothing is applied here: a triple whose intent is a near-duplicate of an
    existing node (similarity >= dup_threshold) becomes an update_action
    patch against that node, anything else becomes a new_node proposal. An
    empty patch list is a valid outcome, not a failure.
    """
    system = Message(role="system", content=load_prompt("history_extractor"))
    patches: list[HistoryPatch] = []
    for record in discussions:
        payload = provider.chat(
            ChatRequest(
                agent="history_extractor",
                messages=(system, Message(role="user", content=record.text)),
                output_schema="history_extraction.v1",
            )
        )
        for i, triple in enumerate(payload["triples"]):
            intent = triple["intent"]
            action = triple["action"]
            outcome = triple.get("outcome")
            best_id, best_score = kb.best_intent_match(intent)
            patch_id = f"hp-{record.record_id}-{i}"
            provenance = f"discussion {record.record_id}"
            if best_id is not None and best_score >= dup_threshold:
                patches.append(
                    HistoryPatch(
                        patch_id=patch_id,
                        kind="update_action",
                        provenance=provenance,
                        similarity_to_existing=best_score,
                        node_id=best_id,
                        new_action=action,
                    )
                )
            else:
                node_provenance = [provenance]
                if outcome:
                    node_provenance.append(f"observed outcome: {outcome}")
                patches.append(
                    HistoryPatch(
                        patch_id=patch_id,
                        kind="new_node",
                        provenance=provenance,
                        similarity_to_existing=best_score,
                        node=KnowledgeNode(
                            node_id=history_node_id(intent, action),
                            node_type=NodeType.TERMINAL,
                            intent=intent,
                            action=action,
                            linkers=(),
                            source_kind="history",
                            source_id=record.record_id,
                            provenance=tuple(node_provenance),
                        ),
                    )
                )
    if not patches:
        logger.info("history extraction produced no candidate triples")
    return patches


def apply_patches(patches: Sequence[HistoryPatch], kb) -> None:
    """Apply staged history patches to the knowledge base atomically."""
    kb.apply_patches(patches)
