"""Knowledge-base store: nodes, the intent embedding index, retrieval, persistence.

Retrieval is exact brute-force cosine over an in-memory matrix. Corpora
here are hundreds to a few thousand nodes, so exactness is cheap and buys
full determinism: retrieval must agree with an independent brute-force
oracle to 1e-9 on every corpus. Mutations follow a build-then-swap
discipline under a single writer lock, so readers only ever observe a
complete store and a failed operation leaves everything untouched.
"""

from __future__ import annotations

import json
import logging
import threading
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .compiler import (
    DUPLICATE_THRESHOLD,
    RESOLUTION_THRESHOLD,
    HistoryPatch,
    KnowledgeNode,
    Linker,
    NodeType,
    ResolutionReport,
    resolve_linkers,
)
from .errors import (
    EmbedderMismatch,
    EmptyIndex,
    FormatError,
    PatchConflict,
    UnknownNode,
    UnknownOutcome,
    UnknownTarget,
)
from .providers import LLMProvider

logger = logging.getLogger(__name__)

DEFAULT_TOP_K = 5


@dataclass(frozen=True)
class ScoredNode:
    node: KnowledgeNode
    score: float


def node_to_record(node: KnowledgeNode) -> dict:
    return {
        "kind": "node",
        "node_id": node.node_id,
        "node_type": node.node_type.value,
        "intent": node.intent,
        "action": node.action,
        "linkers": [
            {
                "outcome_label": l.outcome_label,
                "target_intent": l.target_intent,
                "resolved_target": l.resolved_target,
                "resolution_score": l.resolution_score,
            }
            for l in node.linkers
        ],
        "source_kind": node.source_kind,
        "source_id": node.source_id,
        "executable_hint": node.executable_hint,
        "provenance": list(node.provenance),
    }


def node_from_record(record: dict) -> KnowledgeNode:
    try:
        return KnowledgeNode(
            node_id=record["node_id"],
            node_type=NodeType(record["node_type"]),
            intent=record["intent"],
            action=record["action"],
            linkers=tuple(
                Linker(
                    outcome_label=l["outcome_label"],
                    target_intent=l["target_intent"],
                    resolved_target=l.get("resolved_target"),
                    resolution_score=l.get("resolution_score"),
                )
                for l in record["linkers"]
            ),
            source_kind=record["source_kind"],
            source_id=record["source_id"],
            executable_hint=record.get("executable_hint"),
            provenance=tuple(record.get("provenance", [])),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"bad node record: {exc}") from exc


class KnowledgeBase:
    """Node store plus intent index bound to one embedding provider."""

    def __init__(
        self,
        provider: LLMProvider,
        tau: float = RESOLUTION_THRESHOLD,
        dup_threshold: float = DUPLICATE_THRESHOLD,
    ):
        self.provider = provider
        self.tau = tau
        self.dup_threshold = dup_threshold
        self._lock = threading.RLock()
        self._nodes: dict[str, KnowledgeNode] = {}
        self._vectors: dict[str, np.ndarray] = {}
        self._ids: tuple[str, ...] = ()
        self._matrix: np.ndarray | None = None
        self._embed_cache: dict[str, np.ndarray] = {}

    # -- embedding ----------------------------------------------------------

    def embed_text(self, text: str) -> np.ndarray:
        """Embed text through the provider, cached per exact string."""
        cached = self._embed_cache.get(text)
        if cached is not None:
            return cached
        vec = self.provider.embed(text).values
        self._embed_cache[text] = vec
        return vec

    # -- snapshot helpers ----------------------------------------------------

    def _swap(self, nodes: dict[str, KnowledgeNode], vectors: dict[str, np.ndarray]) -> None:
        ids = tuple(sorted(nodes))
        matrix = np.stack([vectors[nid] for nid in ids]) if ids else None
        with self._lock:
            self._nodes = nodes
            self._vectors = vectors
            self._ids = ids
            self._matrix = matrix

    def _snapshot(self):
        with self._lock:
            return self._nodes, self._ids, self._matrix

    def __len__(self) -> int:
        return len(self._nodes)

    def node_ids(self) -> list[str]:
        nodes, _, _ = self._snapshot()
        return sorted(nodes)

    def node(self, node_id: str) -> KnowledgeNode:
        nodes, _, _ = self._snapshot()
        found = nodes.get(node_id)
        if found is None:
            raise UnknownNode(f"no node {node_id!r}")
        return found

    def all_nodes(self) -> list[KnowledgeNode]:
        nodes, ids, _ = self._snapshot()
        return [nodes[nid] for nid in ids]

    # -- mutation ------------------------------------------------------------

    def upsert_nodes(self, new_nodes: Sequence[KnowledgeNode]) -> int:
        """Insert or replace nodes by node_id, embedding intents first.

        Embedding happens before any state changes, so a provider failure
        leaves the store and index exactly as they were.
        """
        embedded = {node.node_id: self.embed_text(node.intent) for node in new_nodes}
        with self._lock:
            nodes = dict(self._nodes)
            vectors = dict(self._vectors)
            for node in new_nodes:
                nodes[node.node_id] = node
                vectors[node.node_id] = embedded[node.node_id]
            self._swap(nodes, vectors)
        return len(new_nodes)

    def resolve_all(self) -> ResolutionReport:
        """Run corpus-wide linker resolution and store the rewritten nodes."""
        with self._lock:
            current = [self._nodes[nid] for nid in self._ids]
            resolved, report = resolve_linkers(current, self.embed_text, self.tau)
            self._swap({n.node_id: n for n in resolved}, dict(self._vectors))
        return report

    def apply_patches(self, patches: Sequence[HistoryPatch]) -> ResolutionReport:
        """Apply staged history patches, then re-resolve; atomic.

        All validation and embedding precede the swap: a rejected or failing
        patch set leaves the serialized store bit-identical to before.
        """
        update_targets: set[str] = set()
        new_ids: set[str] = set()
        with self._lock:
            for patch in patches:
                if patch.kind == "update_action":
                    if patch.node_id in update_targets:
                        raise PatchConflict(
                            f"two update_action patches target node {patch.node_id!r}"
                        )
                    update_targets.add(patch.node_id)
                    if patch.node_id not in self._nodes:
                        raise UnknownTarget(f"patch targets unknown node {patch.node_id!r}")
                elif patch.kind == "new_node":
                    assert patch.node is not None
                    if patch.node.node_id in new_ids:
                        raise PatchConflict(
                            f"two new_node patches share node id {patch.node.node_id!r}"
                        )
                    new_ids.add(patch.node.node_id)
                else:
                    raise PatchConflict(f"unknown patch kind {patch.kind!r}")

            nodes = dict(self._nodes)
            vectors = dict(self._vectors)
            for patch in patches:
                if patch.kind == "new_node":
                    assert patch.node is not None
                    nodes[patch.node.node_id] = patch.node
                    vectors[patch.node.node_id] = self.embed_text(patch.node.intent)
                else:
                    old = nodes[patch.node_id]
                    nodes[patch.node_id] = replace(
                        old,
                        action=patch.new_action or old.action,
                        provenance=old.provenance + (patch.provenance,),
                    )
            resolved, report = resolve_linkers(
                [nodes[nid] for nid in sorted(nodes)], self.embed_text, self.tau
            )
            self._swap({n.node_id: n for n in resolved}, vectors)
        return report

    def remove_source(self, source_id: str) -> int:
        """Drop every TSG-sourced node of one document; unresolve edges into it."""
        with self._lock:
            removed = {
                nid
                for nid, node in self._nodes.items()
                if node.source_kind == "tsg" and node.source_id == source_id
            }
            if not removed:
                return 0
            nodes: dict[str, KnowledgeNode] = {}
            vectors: dict[str, np.ndarray] = {}
            for nid, node in self._nodes.items():
                if nid in removed:
                    continue
                if any(l.resolved_target in removed for l in node.linkers):
                    node = replace(
                        node,
                        linkers=tuple(
                            replace(l, resolved_target=None, resolution_score=None)
                            if l.resolved_target in removed
                            else l
                            for l in node.linkers
                        ),
                    )
                nodes[nid] = node
                vectors[nid] = self._vectors[nid]
            self._swap(nodes, vectors)
        return len(removed)

    # -- retrieval -----------------------------------------------------------

    def retrieve_top_k(self, query_intent: str, k: int = DEFAULT_TOP_K) -> list[ScoredNode]:
        """Exact top-k by cosine similarity; ties broken by node_id ascending."""
        if k < 1:
            raise ValueError("k must be >= 1")
        nodes, ids, matrix = self._snapshot()
        if matrix is None:
            raise EmptyIndex("knowledge base has no indexed nodes")
        query = self.embed_text(query_intent)
        scores = matrix @ query
        order = sorted(range(len(ids)), key=lambda i: (-scores[i], ids[i]))[:k]
        results = [ScoredNode(node=nodes[ids[i]], score=float(scores[i])) for i in order]
        if __debug__:
            assert all(
                results[i].score > results[i + 1].score
                or (
                    results[i].score == results[i + 1].score
                    and results[i].node.node_id < results[i + 1].node.node_id
                )
                for i in range(len(results) - 1)
            ), "retrieval results out of order"
        return results

    def best_intent_match(self, intent: str) -> tuple[str | None, float]:
        """Highest-similarity node for an intent, or (None, 0.0) on empty KB."""
        try:
            top = self.retrieve_top_k(intent, k=1)
        except EmptyIndex:
            return None, 0.0
        return top[0].node.node_id, top[0].score

    def neighbors(
        self, node_id: str, outcome_label: str | None = None
    ) -> list[tuple[Linker, KnowledgeNode | None]]:
        """Successors of a node; unresolved linkers pair with None."""
        nodes, _, _ = self._snapshot()
        node = nodes.get(node_id)
        if node is None:
            raise UnknownNode(f"no node {node_id!r}")
        linkers = node.linkers
        if outcome_label is not None:
            linkers = tuple(l for l in linkers if l.outcome_label == outcome_label)
            if not linkers:
                raise UnknownOutcome(f"node {node_id!r} has no outcome {outcome_label!r}")
        return [
            (l, nodes.get(l.resolved_target) if l.resolved_target else None) for l in linkers
        ]

    # -- persistence ---------------------------------------------------------

    def save(self, path: str | Path) -> None:
        """Write kb.jsonl: meta record, then nodes, then vectors, sorted by id."""
        nodes, ids, _ = self._snapshot()
        with self._lock:
            vectors = dict(self._vectors)
        lines = [
            json.dumps(
                {
                    "kind": "meta",
                    "embedder_id": self.provider.embedder_id,
                    "dim": int(vectors[ids[0]].shape[0]) if ids else 0,
                },
                sort_keys=True,
                separators=(",", ":"),
            )
        ]
        for nid in ids:
            lines.append(
                json.dumps(node_to_record(nodes[nid]), sort_keys=True, separators=(",", ":"))
            )
        for nid in ids:
            lines.append(
                json.dumps(
                    {"kind": "vec", "node_id": nid, "v": [float(x) for x in vectors[nid]]},
                    sort_keys=True,
                    separators=(",", ":"),
                )
            )
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    def load(self, path: str | Path) -> None:
        """Replace store contents from a kb.jsonl file; store unchanged on failure."""
        text = Path(path).read_text(encoding="utf-8")
        lines = [line for line in text.splitlines() if line.strip()]
        if not lines:
            raise FormatError("empty knowledge base file")
        records = []
        for i, line in enumerate(lines):
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise FormatError(f"line {i + 1}: not valid JSON: {exc}") from exc
        meta = records[0]
        if meta.get("kind") != "meta":
            raise FormatError("first record must be the meta header")
        if meta.get("embedder_id") != self.provider.embedder_id:
            raise EmbedderMismatch(
                f"file embeddings come from {meta.get('embedder_id')!r}, "
                f"store is configured for {self.provider.embedder_id!r}"
            )
        dim = meta.get("dim")
        nodes: dict[str, KnowledgeNode] = {}
        vectors: dict[str, np.ndarray] = {}
        for record in records[1:]:
            kind = record.get("kind")
            if kind == "node":
                node = node_from_record(record)
                nodes[node.node_id] = node
            elif kind == "vec":
                nid = record.get("node_id")
                values = record.get("v")
                if not isinstance(nid, str) or not isinstance(values, list):
                    raise FormatError("bad vec record")
                vec = np.asarray(values, dtype=np.float64)
                if vec.shape != (dim,):
                    raise FormatError(f"vec for {nid!r} has dimension {vec.shape}, want {dim}")
                vectors[nid] = vec
            else:
                raise FormatError(f"unknown record kind {kind!r}")
        if set(nodes) != set(vectors):
            raise FormatError("node and vec records do not match one-to-one")
        self._swap(nodes, vectors)
        logger.info("loaded %d nodes from %s", len(nodes), path)

    # -- graph export --------------------------------------------------------

    def graph_export(self) -> dict:
        nodes, ids, _ = self._snapshot()
        edges = []
        for nid in ids:
            for linker in nodes[nid].linkers:
                target_node = nodes.get(linker.resolved_target) if linker.resolved_target else None
                edges.append(
                    {
                        "source": nid,
                        "target": linker.resolved_target,
                        "outcome_label": linker.outcome_label,
                        "target_intent": linker.target_intent,
                        "score": linker.resolution_score,
                        "cross_tsg": bool(
                            target_node is not None
                            and target_node.source_id != nodes[nid].source_id
                        ),
                    }
                )
        return {
            "nodes": [node_to_record(nodes[nid]) for nid in ids],
            "edges": edges,
        }

    def to_dot(self) -> str:
        graph = self.graph_export()
        out = ["digraph knowledge_base {", "  rankdir=LR;"]
        for record in graph["nodes"]:
            label = f"{record['node_id']}\\n[{record['node_type']}]"
            out.append(f'  "{record["node_id"]}" [label="{label}"];')
        for edge in graph["edges"]:
            if edge["target"]:
                style = " style=dashed color=blue" if edge["cross_tsg"] else ""
                out.append(
                    f'  "{edge["source"]}" -> "{edge["target"]}" '
                    f'[label="{edge["outcome_label"]}"{style}];'
                )
            else:
                ghost = f'unresolved::{edge["source"]}::{edge["outcome_label"]}'
                out.append(f'  "{ghost}" [label="{edge["target_intent"]}" shape=plaintext];')
                out.append(
                    f'  "{edge["source"]}" -> "{ghost}" '
                    f'[label="{edge["outcome_label"]}" style=dotted];'
                )
        out.append("}")
        return "\n".join(out) + "\n"
