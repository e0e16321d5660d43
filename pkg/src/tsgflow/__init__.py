"""Incident-mitigation copilot engine.

Compiles troubleshooting guides into a linked knowledge graph and drives
semi-automated mitigation sessions: retrieval by intent similarity,
LLM-assisted planning under hard deterministic validation, plugin
execution with human delegation for everything else.
"""

from .agents import (
    ActionPlan,
    IntentResult,
    MemoryView,
    PlanStep,
    StepMode,
    interpret_intent,
    plan_actions,
    post_process,
    select_nodes,
)
from .compiler import (
    HistoryPatch,
    HistoryRecord,
    KnowledgeNode,
    Linker,
    NodeType,
    ResolutionReport,
    apply_patches,
    compile_tsg,
    enhance_from_history,
    resolve_linkers,
)
from .errors import TsgflowError
from .execution import (
    Insight,
    Plugin,
    PluginRegistry,
    execute_step,
    ingest_manual_result,
    load_plugin_manifest,
)
from .orchestrator import (
    LogicalClock,
    MitigationEngine,
    MitigationSession,
    SessionEvent,
    SessionState,
    SystemClock,
    replay,
    sequential_ids,
)
from .providers import (
    ChatRequest,
    EmbeddingVector,
    HttpProvider,
    LLMProvider,
    Message,
    MockProvider,
    hash_embed,
    prompt_key,
)
from .store import KnowledgeBase, ScoredNode
from .tsg import (
    QualityReport,
    StructuredTSG,
    normalize_raw_tsg,
    parse_structured_tsg,
    serialize_structured_tsg,
    validate_quality,
)

__version__ = "0.1.0"

__all__ = [
    "ActionPlan",
    "ChatRequest",
    "EmbeddingVector",
    "HistoryPatch",
    "HistoryRecord",
    "HttpProvider",
    "Insight",
    "IntentResult",
    "KnowledgeBase",
    "KnowledgeNode",
    "LLMProvider",
    "Linker",
    "LogicalClock",
    "MemoryView",
    "Message",
    "MitigationEngine",
    "MitigationSession",
    "MockProvider",
    "NodeType",
    "PlanStep",
    "Plugin",
    "PluginRegistry",
    "QualityReport",
    "ResolutionReport",
    "ScoredNode",
    "SessionEvent",
    "SessionState",
    "StepMode",
    "StructuredTSG",
    "SystemClock",
    "TsgflowError",
    "apply_patches",
    "compile_tsg",
    "enhance_from_history",
    "execute_step",
    "hash_embed",
    "ingest_manual_result",
    "interpret_intent",
    "load_plugin_manifest",
    "normalize_raw_tsg",
    "parse_structured_tsg",
    "plan_actions",
    "post_process",
    "prompt_key",
    "replay",
    "resolve_linkers",
    "select_nodes",
    "sequential_ids",
    "serialize_structured_tsg",
    "validate_quality",
]
