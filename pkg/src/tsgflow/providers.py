"""LLM provider abstraction: schema-validated chat plus text embeddings.

Two built-in providers ship with the engine: a deterministic scripted mock
(with a hashing embedder) that makes every other module testable offline,
and an OpenAI-compatible HTTP client. Providers fill two named slots in a
deployment, ``planner_provider`` and ``expert_provider``; either slot may
be backed by either implementation.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
from dataclasses import dataclass
from importlib import resources
from typing import Any, Iterable

import jsonschema
import numpy as np

from .errors import ProviderError, SchemaViolation

logger = logging.getLogger(__name__)

HASH_EMBEDDER_ID = "hash-v1"
HASH_DIM = 256
DEFAULT_DEADLINE_SECONDS = 60.0


# ---------------------------------------------------------------------------
# Output schemas
# ---------------------------------------------------------------------------

OUTPUT_SCHEMAS: dict[str, dict] = {
    "intent_result.v1": {
        "type": "object",
        "properties": {
            "kind": {"enum": ["clarified", "needs_clarification", "off_topic"]},
            "clarified_intent": {"type": "string"},
            "clarification_question": {"type": "string"},
        },
        "required": ["kind"],
        "additionalProperties": False,
    },
    "node_selection.v1": {
        "type": "object",
        "properties": {
            "selected_node_ids": {"type": "array", "items": {"type": "string"}},
        },
        "required": ["selected_node_ids"],
        "additionalProperties": False,
    },
    "action_plan.v1": {
        "type": "object",
        "properties": {
            "steps": {
                "type": "array",
                "items": {
                    "type": "object",
                    "properties": {
                        "node_id": {"type": ["string", "null"]},
                        "action": {"type": "string", "minLength": 1},
                        "plugin": {"type": ["string", "null"]},
                        "expected_outcomes": {"type": "array", "items": {"type": "string"}},
                    },
                    "required": ["action"],
                    "additionalProperties": False,
                },
            },
            "rationale": {"type": "string"},
        },
        "required": ["steps"],
        "additionalProperties": False,
    },
    "plan_review.v1": {
        "type": "object",
        "properties": {
            "steps": {
                "type": "array",
                "items": {
                    "type": "object",
                    "properties": {
                        "step_index": {"type": "integer", "minimum": 0},
                        "action": {"type": "string", "minLength": 1},
                        "expected_outcomes": {"type": "array", "items": {"type": "string"}},
                    },
                    "required": ["step_index", "action"],
                    "additionalProperties": False,
                },
            },
            "notes": {"type": "string"},
        },
        "required": ["steps"],
        "additionalProperties": False,
    },
    # Normalized TSG documents are fully validated by the TSG parser; at the
    # provider boundary we only require a JSON object.
    "structured_tsg.v1": {"type": "object"},
    "history_extraction.v1": {
        "type": "object",
        "properties": {
            "triples": {
                "type": "array",
                "items": {
                    "type": "object",
                    "properties": {
                        "intent": {"type": "string", "minLength": 1},
                        "action": {"type": "string", "minLength": 1},
                        "outcome": {"type": "string"},
                    },
                    "required": ["intent", "action"],
                    "additionalProperties": False,
                },
            },
        },
        "required": ["triples"],
        "additionalProperties": False,
    },
}


def register_schema(schema_id: str, schema: dict) -> None:
    """Register (or replace) an output schema by id."""
    OUTPUT_SCHEMAS[schema_id] = schema


def validate_output(schema_id: str, payload: Any, raw_text: str = "") -> Any:
    """Validate an already-parsed payload against a registered schema."""
    schema = OUTPUT_SCHEMAS.get(schema_id)
    if schema is None:
        raise SchemaViolation(f"unknown output schema {schema_id!r}", raw_text, schema_id)
    try:
        jsonschema.validate(payload, schema)
    except jsonschema.ValidationError as exc:
        raise SchemaViolation(
            f"output does not conform to {schema_id}: {exc.message}", raw_text, schema_id
        ) from exc
    return payload


def parse_structured_output(text: str, schema_id: str) -> Any:
    """Parse provider text as JSON and validate it against the schema."""
    try:
        payload = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaViolation(
            f"output is not valid JSON for schema {schema_id}: {exc}", text, schema_id
        ) from exc
    return validate_output(schema_id, payload, raw_text=text)


# ---------------------------------------------------------------------------
# Requests and vectors
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Message:
    role: str  # "system" | "user" | "assistant"
    content: str


@dataclass(frozen=True)
class ChatRequest:
    """One schema-constrained chat call on behalf of a named agent."""

    agent: str
    messages: tuple[Message, ...]
    output_schema: str
    deterministic: bool = True

    def __post_init__(self):
        if not any(m.role == "user" for m in self.messages):
            raise ValueError("ChatRequest requires at least one user message")
        if self.output_schema not in OUTPUT_SCHEMAS:
            raise ValueError(f"output schema {self.output_schema!r} is not registered")

    def last_user_message(self) -> str:
        for message in reversed(self.messages):
            if message.role == "user":
                return message.content
        raise ValueError("no user message")  # unreachable given __post_init__


@dataclass(frozen=True, eq=False)
class EmbeddingVector:
    values: np.ndarray
    embedder_id: str

    def __post_init__(self):
        norm = float(np.linalg.norm(self.values))
        if abs(norm - 1.0) > 1e-6:
            raise ValueError(f"embedding is not unit-normalized (norm={norm})")


def prompt_key(agent: str, schema_id: str, last_user_message: str) -> str:
    """Stable key identifying a mock-scriptable chat call.

    Only the last user message participates, so scripts survive tweaks to
    system-side prompt templates.
    """
    digest = hashlib.sha256(
        f"{agent}\x1f{schema_id}\x1f{last_user_message}".encode("utf-8")
    ).hexdigest()
    return digest[:16]


def load_prompt(name: str) -> str:
    """Load a prompt template shipped with the package."""
    return resources.files("tsgflow").joinpath("prompts", f"{name}.txt").read_text("utf-8")


# ---------------------------------------------------------------------------
# Hash embedder
# ---------------------------------------------------------------------------

def hash_embed(text: str, dim: int = HASH_DIM) -> np.ndarray:
    """Feature-hash character 3-grams into signed buckets, then L2-normalize.

    Deterministic across runs and platforms (keyed on blake2b, not the
    interpreter's randomized ``hash``).
    """
    if not text:
        raise ProviderError("cannot embed empty text")
    if len(text) >= 3:
        grams: Iterable[str] = (text[i : i + 3] for i in range(len(text) - 2))
    else:
        grams = (text,)
    vec = np.zeros(dim, dtype=np.float64)
    for gram in grams:
        n = int.from_bytes(hashlib.blake2b(gram.encode("utf-8"), digest_size=8).digest(), "big")
        vec[n % dim] += 1.0 if (n >> 8) % 2 == 0 else -1.0
    norm = float(np.linalg.norm(vec))
    if norm < 1e-12:
        # All grams cancelled; fall back to a single deterministic bucket.
        n = int.from_bytes(hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest(), "big")
        vec[:] = 0.0
        vec[n % dim] = 1.0
        norm = 1.0
    return vec / norm


# ---------------------------------------------------------------------------
# Providers
# ---------------------------------------------------------------------------

class LLMProvider:
    """Interface both built-in providers implement."""

    embedder_id: str

    def chat(self, request: ChatRequest) -> Any:
        raise NotImplementedError

    def embed(self, text: str) -> EmbeddingVector:
        raise NotImplementedError


class MockProvider(LLMProvider):
    """Deterministic scripted provider.

    Chat lookup order:

    1. exact prompt key (``prompt_key(agent, schema, last user message)``)
    2. FIFO sequence registered under ``"agent:schema"`` (for retry scripts)
    3. behavior registered under ``"agent:schema"`` (``"echo_user"`` returns
       the last user message verbatim)
    4. default response registered under ``"agent:schema"``

    A miss on all four raises ProviderError. Embeddings use the hash
    embedder, so identical inputs give byte-identical vectors on every run.
    """

    def __init__(
        self,
        responses: dict[str, str] | None = None,
        sequences: dict[str, list[str]] | None = None,
        defaults: dict[str, str] | None = None,
        behaviors: dict[str, str] | None = None,
        embed_dim: int = HASH_DIM,
    ):
        self.embedder_id = HASH_EMBEDDER_ID
        self._responses = dict(responses or {})
        self._sequences = {key: list(vals) for key, vals in (sequences or {}).items()}
        self._defaults = dict(defaults or {})
        self._behaviors = dict(behaviors or {})
        self._embed_dim = embed_dim

    @classmethod
    def from_script(cls, script: dict | str | os.PathLike) -> "MockProvider":
        """Build from a script dict or a path to a script JSON file."""
        if not isinstance(script, dict):
            with open(script, "r", encoding="utf-8") as fh:
                script = json.load(fh)
        return cls(
            responses=script.get("responses"),
            sequences=script.get("sequences"),
            defaults=script.get("defaults"),
            behaviors=script.get("behaviors"),
        )

    def script_response(self, agent: str, schema_id: str, last_user: str, response: str) -> None:
        """Convenience for tests: script one exact-key response."""
        self._responses[prompt_key(agent, schema_id, last_user)] = response

    def chat(self, request: ChatRequest) -> Any:
        last_user = request.last_user_message()
        key = prompt_key(request.agent, request.output_schema, last_user)
        slot = f"{request.agent}:{request.output_schema}"
        text: str | None = None
        if key in self._responses:
            text = self._responses[key]
        elif self._sequences.get(slot):
            text = self._sequences[slot].pop(0)
        elif self._behaviors.get(slot) == "echo_user":
            text = last_user
        elif slot in self._defaults:
            text = self._defaults[slot]
        if text is None:
            raise ProviderError(
                f"mock provider has no scripted response for agent={request.agent!r} "
                f"schema={request.output_schema!r} key={key}"
            )
        return parse_structured_output(text, request.output_schema)

    def embed(self, text: str) -> EmbeddingVector:
        return EmbeddingVector(hash_embed(text, self._embed_dim), self.embedder_id)


class HttpProvider(LLMProvider):
    """OpenAI-compatible chat-completions and embeddings client."""

    def __init__(
        self,
        endpoint: str,
        model: str,
        embed_model: str = "text-embedding-3-small",
        api_key_env: str = "TSGFLOW_API_KEY",
        deadline: float = DEFAULT_DEADLINE_SECONDS,
        embedder_id: str | None = None,
        transport=None,
    ):
        import httpx

        self.model = model
        self.embed_model = embed_model
        self.embedder_id = embedder_id or embed_model
        headers = {}
        api_key = os.environ.get(api_key_env, "")
        if api_key:
            headers["Authorization"] = f"Bearer {api_key}"
        self._client = httpx.Client(
            base_url=endpoint, headers=headers, timeout=deadline, transport=transport
        )

    def chat(self, request: ChatRequest) -> Any:
        import httpx

        body = {
            "model": self.model,
            "messages": [{"role": m.role, "content": m.content} for m in request.messages],
            "temperature": 0.0 if request.deterministic else 0.7,
            "response_format": {"type": "json_object"},
        }
        try:
            response = self._client.post("/chat/completions", json=body)
            response.raise_for_status()
            content = response.json()["choices"][0]["message"]["content"]
        except httpx.HTTPError as exc:
            raise ProviderError(f"chat transport failure: {exc}") from exc
        except (KeyError, IndexError, ValueError) as exc:
            raise ProviderError(f"malformed chat completion response: {exc}") from exc
        return parse_structured_output(content, request.output_schema)

    def embed(self, text: str) -> EmbeddingVector:
        import httpx

        if not text:
            raise ProviderError("cannot embed empty text")
        try:
            response = self._client.post(
                "/embeddings", json={"model": self.embed_model, "input": [text]}
            )
            response.raise_for_status()
            values = response.json()["data"][0]["embedding"]
        except httpx.HTTPError as exc:
            raise ProviderError(f"embedding transport failure: {exc}") from exc
        except (KeyError, IndexError, ValueError) as exc:
            raise ProviderError(f"malformed embeddings response: {exc}") from exc
        vec = np.asarray(values, dtype=np.float64)
        norm = float(np.linalg.norm(vec))
        if norm < 1e-12:
            raise ProviderError("provider returned a zero embedding")
        return EmbeddingVector(vec / norm, self.embedder_id)


def provider_from_config(config: dict, base_dir: os.PathLike | str | None = None) -> LLMProvider:
    """Construct a provider from its config mapping.

    ``{"kind": "mock", "script": <path or inline dict>}`` or
    ``{"kind": "http", "endpoint": ..., "model": ..., ...}``.
    """
    kind = config.get("kind")
    if kind == "mock":
        script = config.get("script", {})
        if isinstance(script, str) and base_dir is not None and not os.path.isabs(script):
            script = os.path.join(base_dir, script)
        return MockProvider.from_script(script)
    if kind == "http":
        return HttpProvider(
            endpoint=config["endpoint"],
            model=config["model"],
            embed_model=config.get("embed_model", "text-embedding-3-small"),
            api_key_env=config.get("api_key_env", "TSGFLOW_API_KEY"),
            deadline=float(config.get("deadline", DEFAULT_DEADLINE_SECONDS)),
            embedder_id=config.get("embedder_id"),
        )
    raise ValueError(f"unknown provider kind {kind!r}")
