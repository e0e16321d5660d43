"""Exception taxonomy shared across the engine."""

from __future__ import annotations


class TsgflowError(Exception):
    """Base class for every error raised by this package."""


# --- TSG parsing and normalization ---------------------------------------

class DocumentSyntaxError(TsgflowError):
    """Malformed TSG serialization. Carries line/column when known."""

    def __init__(self, message: str, line: int | None = None, column: int | None = None):
        self.line = line
        self.column = column
        if line is not None:
            message = f"{message} (line {line}, column {column})"
        super().__init__(message)


class SchemaError(TsgflowError):
    """Structurally invalid TSG document; names the offending location."""

    def __init__(self, message: str, location: str):
        self.location = location
        super().__init__(f"{location}: {message}")


class NormalizationFailed(TsgflowError):
    """Raw-TSG normalization exhausted its retry budget."""

    def __init__(self, message: str, report=None):
        self.report = report
        super().__init__(message)


# --- providers ------------------------------------------------------------

class ProviderError(TsgflowError):
    """Transport or provider failure (timeout, missing script entry, bad status)."""


class SchemaViolation(TsgflowError):
    """Provider output failed schema or post-validation; keeps the raw text for re-prompts."""

    def __init__(self, message: str, raw_text: str = "", schema_id: str = ""):
        self.raw_text = raw_text
        self.schema_id = schema_id
        super().__init__(message)


# --- knowledge base -------------------------------------------------------

class CompileError(TsgflowError):
    """A compiled node would violate its invariants; signals a validator bug."""


class PatchConflict(TsgflowError):
    """Two history patches contend for the same node."""


class UnknownTarget(TsgflowError):
    """A history patch targets a node that does not exist."""


class EmptyIndex(TsgflowError):
    """Retrieval attempted against an empty intent index."""


class UnknownNode(TsgflowError):
    """node_id not present in the knowledge base."""


class UnknownOutcome(TsgflowError):
    """outcome_label not declared by the node's linkers."""


class FormatError(TsgflowError):
    """Persisted knowledge-base file is corrupt or truncated."""


class EmbedderMismatch(TsgflowError):
    """Persisted vectors come from a different embedder than the store is configured for."""


# --- execution ------------------------------------------------------------

class DuplicatePlugin(TsgflowError):
    """Plugin name already registered."""


class PluginNotFound(TsgflowError):
    """Step names a plugin the registry does not hold, or the step is not auto-executable."""


# --- agents ---------------------------------------------------------------

class EmptyPlan(TsgflowError):
    """Planner produced no steps; the orchestrator treats this as an escalation signal."""


# --- orchestrator / service -----------------------------------------------

class InvalidState(TsgflowError):
    """Operation not permitted in the session's current state."""


class Busy(TsgflowError):
    """A concurrent mutation already holds the session's writer slot."""


class CorruptLog(TsgflowError):
    """Session event log failed integrity checks (bad JSON, sequence gap)."""


class UnknownSession(TsgflowError):
    """session_id not present in memory or on disk."""
