"""Plugin registry and execution: turning plan steps into Insights.

An Insight is the engine's only currency for "what happened": auto steps
produce one from a plugin run, manual steps produce one from the text the
operator reports back. Execution failure is data, not an exception: a
crashed or timed-out handler still yields an Insight (outcome "unmatched",
diagnostics in raw_output) so the mitigation loop can replan instead of
dying. Outcome labels are assigned by per-plugin ordered substring tables;
nothing model-driven decides an outcome_label.
"""

from __future__ import annotations

import concurrent.futures
import json
import logging
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

from .agents import PlanStep, StepMode
from .errors import DuplicatePlugin, PluginNotFound

logger = logging.getLogger(__name__)

DEFAULT_PLUGIN_DEADLINE = 120.0
UNMATCHED = "unmatched"
MANUAL_SOURCE = "manual"

_SUMMARY_LIMIT = 160


@dataclass(frozen=True)
class Plugin:
    """An executable action: handler(params) -> (raw output text, exit status)."""

    name: str
    description: str
    handler: Callable[[dict], tuple[str, int]]
    params: tuple[str, ...] = ()
    outcome_patterns: tuple[tuple[str, str], ...] = ()  # ordered (substring, label)
    deadline: float = DEFAULT_PLUGIN_DEADLINE


@dataclass(frozen=True)
class Insight:
    step_index: int
    source: str  # plugin name, or "manual"
    outcome_label: str
    raw_output: str
    summary: str
    produced_at: str

    def to_dict(self) -> dict:
        return {
            "step_index": self.step_index,
            "source": self.source,
            "outcome_label": self.outcome_label,
            "raw_output": self.raw_output,
            "summary": self.summary,
            "produced_at": self.produced_at,
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "Insight":
        return cls(
            step_index=payload["step_index"],
            source=payload["source"],
            outcome_label=payload["outcome_label"],
            raw_output=payload["raw_output"],
            summary=payload["summary"],
            produced_at=payload["produced_at"],
        )


class PluginRegistry:
    def __init__(self, plugins: Sequence[Plugin] = ()):
        self._plugins: dict[str, Plugin] = {}
        for plugin in plugins:
            self.register(plugin)

    def register(self, plugin: Plugin) -> None:
        if plugin.name in self._plugins:
            raise DuplicatePlugin(f"plugin {plugin.name!r} is already registered")
        self._plugins[plugin.name] = plugin

    def get(self, name: str) -> Plugin:
        plugin = self._plugins.get(name)
        if plugin is None:
            raise PluginNotFound(f"no plugin {name!r}")
        return plugin

    def has(self, name: str) -> bool:
        return name in self._plugins

    def names(self) -> list[str]:
        return sorted(self._plugins)

    def __len__(self) -> int:
        return len(self._plugins)

    def snapshot(self) -> "PluginRegistry":
        """Frozen copy: a plan validated against it executes against it."""
        return PluginRegistry(list(self._plugins.values()))

    def describe(self) -> str:
        if not self._plugins:
            return "(none)"
        return "\n".join(
            f"- {name}: {self._plugins[name].description}" for name in self.names()
        )


def _summarize(source: str, label: str, raw: str) -> str:
    excerpt = " ".join(raw.split())
    if len(excerpt) > _SUMMARY_LIMIT:
        excerpt = excerpt[: _SUMMARY_LIMIT - 3] + "..."
    return f"[{source}] {label}: {excerpt}" if excerpt else f"[{source}] {label}"


def match_outcome(
    raw_output: str,
    expected_outcomes: Sequence[str],
    patterns: Sequence[tuple[str, str]],
) -> str:
    """First pattern whose substring hits and whose label the step expects."""
    haystack = raw_output.lower()
    for pattern, label in patterns:
        if label in expected_outcomes and pattern.lower() in haystack:
            return label
    return UNMATCHED


def execute_step(
    step: PlanStep, registry: PluginRegistry, session_id: str, now: str
) -> Insight:
    """Run one auto step to completion, timeout, or crash; always one Insight."""
    if step.mode is not StepMode.AUTO or step.plugin is None:
        raise PluginNotFound(f"step {step.step_index} is manual, nothing to execute")
    plugin = registry.get(step.plugin)
    params = {"action": step.action, "step_index": step.step_index, "session_id": session_id}
    pool = concurrent.futures.ThreadPoolExecutor(max_workers=1)
    try:
        future = pool.submit(plugin.handler, params)
        try:
            raw_output, status = future.result(timeout=plugin.deadline)
        except concurrent.futures.TimeoutError:
            future.cancel()
            raw_output = f"plugin {plugin.name!r} exceeded its {plugin.deadline:g}s deadline"
            return Insight(
                step_index=step.step_index,
                source=plugin.name,
                outcome_label=UNMATCHED,
                raw_output=raw_output,
                summary=_summarize(plugin.name, UNMATCHED, raw_output),
                produced_at=now,
            )
        except Exception as exc:  # handler crash is data, not control flow
            raw_output = f"{type(exc).__name__}: {exc}"
            return Insight(
                step_index=step.step_index,
                source=plugin.name,
                outcome_label=UNMATCHED,
                raw_output=raw_output,
                summary=_summarize(plugin.name, UNMATCHED, raw_output),
                produced_at=now,
            )
    finally:
        pool.shutdown(wait=False)
    label = match_outcome(raw_output, step.expected_outcomes, plugin.outcome_patterns)
    if status != 0:
        raw_output = f"{raw_output}\n(exit status {status})"
    return Insight(
        step_index=step.step_index,
        source=plugin.name,
        outcome_label=label,
        raw_output=raw_output,
        summary=_summarize(plugin.name, label, raw_output),
        produced_at=now,
    )


def ingest_manual_result(step: PlanStep, text: str, now: str) -> Insight:
    """Wrap an operator-reported result; label by normalized containment."""
    normalized = re.sub(r"\s+", " ", text.strip().lower())
    label = UNMATCHED
    if normalized:
        for expected in step.expected_outcomes:
            if re.sub(r"\s+", " ", expected.strip().lower()) in normalized:
                label = expected
                break
    return Insight(
        step_index=step.step_index,
        source=MANUAL_SOURCE,
        outcome_label=label,
        raw_output=text,
        summary=_summarize(MANUAL_SOURCE, label, text),
        produced_at=now,
    )


# ---------------------------------------------------------------------------
# Built-in plugins and manifest loading
# ---------------------------------------------------------------------------

def echo_plugin(
    patterns: Sequence[tuple[str, str]] = (), deadline: float = DEFAULT_PLUGIN_DEADLINE
) -> Plugin:
    return Plugin(
        name="echo",
        description="returns the step's action text unchanged; wiring smoke test",
        handler=lambda params: (params["action"], 0),
        params=("action",),
        outcome_patterns=tuple(patterns),
        deadline=deadline,
    )


def http_probe_plugin(
    url: str,
    patterns: Sequence[tuple[str, str]] = (("status=200", "ok"),),
    deadline: float = DEFAULT_PLUGIN_DEADLINE,
) -> Plugin:
    def handler(params: dict) -> tuple[str, int]:
        import httpx

        try:
            response = httpx.get(url, timeout=deadline)
        except httpx.HTTPError as exc:
            return f"probe failed: {exc}", 1
        return f"status={response.status_code}", 0

    return Plugin(
        name="http_probe",
        description=f"GET {url} and report the HTTP status",
        handler=handler,
        outcome_patterns=tuple(patterns),
        deadline=deadline,
    )


def shell_stub_plugin(
    table: dict[str, tuple[str, int]],
    patterns: Sequence[tuple[str, str]] = (),
    name: str = "shell_stub",
    description: str = "scripted command table standing in for real shell access",
    deadline: float = DEFAULT_PLUGIN_DEADLINE,
) -> Plugin:
    """Test-only plugin: maps the step's action text to scripted output."""

    def handler(params: dict) -> tuple[str, int]:
        entry = table.get(params["action"])
        if entry is None:
            return f"no scripted output for action: {params['action']}", 1
        return entry[0], entry[1]

    return Plugin(
        name=name,
        description=description,
        handler=handler,
        params=("action",),
        outcome_patterns=tuple(patterns),
        deadline=deadline,
    )


def load_plugin_manifest(path: str | Path, registry: PluginRegistry) -> int:
    """Register the plugins declared in a manifest file.

    Manifest: {"plugins": [{"name", "kind", "description"?, "config"?,
    "outcome_patterns"?, "deadline"?}]} with kind one of echo | http_probe |
    shell_stub.
    """
    manifest = json.loads(Path(path).read_text(encoding="utf-8"))
    count = 0
    for entry in manifest.get("plugins", []):
        kind = entry.get("kind")
        patterns = tuple((p, l) for p, l in entry.get("outcome_patterns", []))
        deadline = float(entry.get("deadline", DEFAULT_PLUGIN_DEADLINE))
        config = entry.get("config", {})
        if kind == "echo":
            plugin = echo_plugin(patterns, deadline)
        elif kind == "http_probe":
            plugin = http_probe_plugin(config["url"], patterns, deadline)
        elif kind == "shell_stub":
            table = {
                action: (str(out[0]), int(out[1]))
                for action, out in config.get("table", {}).items()
            }
            plugin = shell_stub_plugin(
                table,
                patterns,
                name=entry.get("name", "shell_stub"),
                description=entry.get("description", "scripted command table"),
                deadline=deadline,
            )
        else:
            raise ValueError(f"unknown plugin kind {kind!r} in manifest {path}")
        if entry.get("name") and plugin.name != entry["name"]:
            plugin = Plugin(
                name=entry["name"],
                description=entry.get("description", plugin.description),
                handler=plugin.handler,
                params=plugin.params,
                outcome_patterns=plugin.outcome_patterns,
                deadline=plugin.deadline,
            )
        registry.register(plugin)
        count += 1
    return count
