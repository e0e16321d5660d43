"""Deployment configuration and engine assembly."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

from .compiler import DUPLICATE_THRESHOLD, RESOLUTION_THRESHOLD
from .execution import PluginRegistry, load_plugin_manifest
from .orchestrator import DEFAULT_MAX_ITERATIONS, MitigationEngine
from .providers import LLMProvider, provider_from_config
from .store import DEFAULT_TOP_K, KnowledgeBase

logger = logging.getLogger(__name__)

KB_FILENAME = "kb.jsonl"
SESSIONS_DIRNAME = "sessions"

_CONFIG_FIELDS = frozenset(
    {
        "data_dir",
        "host",
        "port",
        "top_k",
        "tau",
        "dup_threshold",
        "max_iterations",
        "planner_provider",
        "expert_provider",
        "plugin_manifests",
        "poll_timeout",
        "console_dir",
    }
)


@dataclass
class AppConfig:
    data_dir: str = "data"
    host: str = "127.0.0.1"
    port: int = 8000
    top_k: int = DEFAULT_TOP_K
    tau: float = RESOLUTION_THRESHOLD
    dup_threshold: float = DUPLICATE_THRESHOLD
    max_iterations: int = DEFAULT_MAX_ITERATIONS
    planner_provider: dict = field(default_factory=lambda: {"kind": "mock", "script": {}})
    expert_provider: dict | None = None
    plugin_manifests: list[str] = field(default_factory=list)
    poll_timeout: float = 25.0
    console_dir: str | None = None
    # resolved relative paths are anchored at the config file's directory
    base_dir: str = "."

    @classmethod
    def load(cls, path: str | Path) -> "AppConfig":
        path = Path(path)
        raw = json.loads(path.read_text(encoding="utf-8"))
        if not isinstance(raw, dict):
            raise ValueError("config root must be a JSON object")
        unknown = set(raw) - _CONFIG_FIELDS
        if unknown:
            raise ValueError(f"unknown config fields {sorted(unknown)}")
        return cls(base_dir=str(path.parent), **raw)

    def resolve(self, relative: str) -> Path:
        p = Path(relative)
        return p if p.is_absolute() else Path(self.base_dir) / p

    @property
    def kb_path(self) -> Path:
        return self.resolve(self.data_dir) / KB_FILENAME

    @property
    def sessions_dir(self) -> Path:
        return self.resolve(self.data_dir) / SESSIONS_DIRNAME


def build_registry(config: AppConfig) -> PluginRegistry:
    registry = PluginRegistry()
    for manifest in config.plugin_manifests:
        count = load_plugin_manifest(config.resolve(manifest), registry)
        logger.info("loaded %d plugins from %s", count, manifest)
    return registry


def build_engine(
    config: AppConfig,
    planner_provider: LLMProvider | None = None,
    expert_provider: LLMProvider | None = None,
    registry: PluginRegistry | None = None,
) -> MitigationEngine:
    """Assemble KB, registry, and engine from config; load kb.jsonl if present."""
    planner = planner_provider or provider_from_config(
        config.planner_provider, base_dir=config.base_dir
    )
    expert = expert_provider
    if expert is None and config.expert_provider is not None:
        expert = provider_from_config(config.expert_provider, base_dir=config.base_dir)
    kb = KnowledgeBase(planner, tau=config.tau, dup_threshold=config.dup_threshold)
    if config.kb_path.exists():
        kb.load(config.kb_path)
    return MitigationEngine(
        kb=kb,
        planner_provider=planner,
        expert_provider=expert,
        registry=registry if registry is not None else build_registry(config),
        max_iterations=config.max_iterations,
        top_k=config.top_k,
        sessions_dir=config.sessions_dir,
    )
