"""Shared fixtures, scripted providers, and oracles for the test suite."""

from __future__ import annotations

import json
from pathlib import Path

from tsgflow.compiler import compile_tsg
from tsgflow.execution import PluginRegistry, shell_stub_plugin
from tsgflow.orchestrator import LogicalClock, MitigationEngine, sequential_ids
from tsgflow.providers import MockProvider, prompt_key
from tsgflow.store import KnowledgeBase
from tsgflow.tsg import parse_structured_tsg

FIXTURES = Path(__file__).parent / "fixtures"
CROSS_CORPUS = ("db_latency", "db_failover", "storage_quota")


def fixture_text(name: str) -> str:
    return (FIXTURES / f"{name}.tsg.json").read_text(encoding="utf-8")


def fixture_tsg(name: str):
    return parse_structured_tsg(fixture_text(name))


def build_kb(names, provider=None) -> KnowledgeBase:
    kb = KnowledgeBase(provider or MockProvider())
    for name in names:
        kb.upsert_nodes(compile_tsg(fixture_tsg(name)))
    kb.resolve_all()
    return kb


# -- independent retrieval oracle (pure Python, no shared ranking code) -------

def oracle_top_k(entries: dict[str, list[float]], query_vec: list[float], k: int):
    """Brute-force cosine ranking over unit vectors; ties by id ascending."""
    scored = []
    for node_id, vec in entries.items():
        dot = 0.0
        for a, b in zip(vec, query_vec):
            dot += a * b
        scored.append((node_id, dot))
    scored.sort(key=lambda pair: (-pair[1], pair[0]))
    return scored[:k]


# -- scripted mock helpers -----------------------------------------------------

def script_clarified(mock: MockProvider, message: str, intent: str) -> None:
    mock.script_response(
        "intent_interpreter",
        "intent_result.v1",
        message,
        json.dumps({"kind": "clarified", "clarified_intent": intent}),
    )


def script_selection(mock: MockProvider, query: str, node_ids) -> None:
    mock.script_response(
        "node_selector",
        "node_selection.v1",
        query,
        json.dumps({"selected_node_ids": list(node_ids)}),
    )


def script_plan(mock: MockProvider, node_ids, steps, rationale: str = "") -> None:
    mock.script_response(
        "action_planner",
        "action_plan.v1",
        "nodes=" + ",".join(node_ids),
        json.dumps({"steps": steps, "rationale": rationale}),
    )


def echo_expert() -> MockProvider:
    return MockProvider(behaviors={"post_processor:plan_review.v1": "echo_user"})


def make_engine(kb, planner, registry=None, expert=None, tmp=None, **kwargs) -> MitigationEngine:
    return MitigationEngine(
        kb=kb,
        planner_provider=planner,
        expert_provider=expert,
        registry=registry if registry is not None else PluginRegistry(),
        clock=LogicalClock(),
        id_factory=sequential_ids(),
        sessions_dir=tmp,
        **kwargs,
    )


# -- plugin registries for the fixture corpus ----------------------------------

def cross_registry() -> PluginRegistry:
    registry = PluginRegistry()
    registry.register(
        shell_stub_plugin(
            {
                "Check replication lag on the primary database": (
                    "replication lag 1200ms exceeds threshold",
                    0,
                )
            },
            patterns=[("exceeds threshold", "lag_high"), ("within threshold", "lag_normal")],
            name="lag_check",
            description="measure primary-replica replication lag",
        )
    )
    registry.register(
        shell_stub_plugin(
            {"Verify database health endpoints report healthy status": ("status=healthy", 0)},
            patterns=[("status=healthy", "healthy"), ("status=", "unhealthy")],
            name="health_probe",
            description="probe the database health endpoint",
        )
    )
    return registry


def disk_registry() -> PluginRegistry:
    registry = PluginRegistry()
    registry.register(
        shell_stub_plugin(
            {
                "Check current disk usage on the affected node": ("disk usage 97% critical", 0),
                "Verify disk usage is back under the safe threshold": (
                    "disk usage 41% nominal",
                    0,
                ),
            },
            patterns=[("97%", "disk_full"), ("41%", "disk_cleared"), ("usage", "disk_ok")],
            name="disk_check",
            description="report disk usage for the affected node",
        )
    )
    return registry


def bounce_registry() -> PluginRegistry:
    registry = PluginRegistry()
    registry.register(
        shell_stub_plugin(
            {
                "Restart the worker process on the affected host": (
                    "restart done but worker is still flapping",
                    0,
                ),
                "Drain traffic away from the affected worker": (
                    "drained traffic yet it is flapping again",
                    0,
                ),
            },
            patterns=[("still flapping", "still flapping"), ("again", "again")],
            name="bounce",
            description="restart or drain the affected worker",
        )
    )
    return registry


# -- full scripted sessions ------------------------------------------------------

CROSS_MESSAGE = "We are seeing high latency on the orders database"
CROSS_INTENT = "diagnose high database latency"
FAILOVER_INTENT = "mitigate database failover"
HEALTH_INTENT = "confirm database health after failover"

CROSS_PLAN_STEPS = {
    "db-latency/S1": {
        "node_id": "db-latency/S1",
        "action": "Check replication lag on the primary database",
        "plugin": "lag_check",
        "expected_outcomes": ["lag_high", "lag_normal"],
    },
    "db-failover/S1": {
        "node_id": "db-failover/S1",
        "action": "Promote the standby replica to primary using the failover runbook",
        "plugin": None,
        "expected_outcomes": ["failover completed", "failover blocked"],
    },
    "db-failover/S2": {
        "node_id": "db-failover/S2",
        "action": "Verify database health endpoints report healthy status",
        "plugin": "health_probe",
        "expected_outcomes": ["healthy"],
    },
}


def cross_session_providers() -> tuple[MockProvider, MockProvider]:
    planner = MockProvider()
    script_clarified(planner, CROSS_MESSAGE, CROSS_INTENT)
    script_selection(planner, CROSS_INTENT, ["db-latency/S1"])
    script_selection(planner, FAILOVER_INTENT, ["db-failover/S1"])
    script_selection(planner, HEALTH_INTENT, ["db-failover/S2"])
    for node_id, step in CROSS_PLAN_STEPS.items():
        script_plan(
            planner, [node_id], [step], rationale=f"follow the guide step behind {node_id}"
        )
    return planner, echo_expert()


def run_cross_session(tmp=None) -> tuple[MitigationEngine, str]:
    """Scripted end-to-end mitigation that traverses from one TSG into another."""
    kb = build_kb(CROSS_CORPUS)
    planner, expert = cross_session_providers()
    engine = make_engine(kb, planner, registry=cross_registry(), expert=expert, tmp=tmp)
    session = engine.start_session()
    sid = session.session_id
    engine.submit_message(sid, CROSS_MESSAGE)
    engine.advance(sid, auto=True)
    engine.submit_manual_result(sid, "failover completed")
    engine.advance(sid, auto=True)
    return engine, sid


DISK_MESSAGE = "node-12 is almost out of disk"
DISK_INTENT = "diagnose disk pressure on the node"

DISK_PLAN_STEPS = [
    {
        "node_id": "disk-pressure/S1",
        "action": "Check current disk usage on the affected node",
        "plugin": "disk_check",
        "expected_outcomes": ["disk_full", "disk_ok"],
    },
    {
        "node_id": "disk-pressure/S2",
        "action": "Archive logs older than seven days to cold storage",
        "plugin": None,
        "expected_outcomes": ["space freed"],
    },
    {
        "node_id": "disk-pressure/S3",
        "action": "Verify disk usage is back under the safe threshold",
        "plugin": "disk_check",
        "expected_outcomes": ["disk_cleared"],
    },
]

DISK_STUB_TABLE = {
    "Check current disk usage on the affected node": ["disk usage 97% critical", 0],
    "Verify disk usage is back under the safe threshold": ["disk usage 41% nominal", 0],
}

DISK_STUB_PATTERNS = [["97%", "disk_full"], ["41%", "disk_cleared"], ["usage", "disk_ok"]]


def _disk_selection(kb: KnowledgeBase) -> list[str]:
    candidates = [s.node.node_id for s in kb.retrieve_top_k(DISK_INTENT, 5)]
    return [nid for nid in candidates if nid.startswith("disk-pressure/")]


def disk_session_providers(kb: KnowledgeBase) -> tuple[MockProvider, MockProvider]:
    planner = MockProvider()
    script_clarified(planner, DISK_MESSAGE, DISK_INTENT)
    selected = _disk_selection(kb)
    script_selection(planner, DISK_INTENT, selected)
    script_plan(
        planner,
        selected,
        DISK_PLAN_STEPS,
        rationale="clear the volume, then confirm usage dropped",
    )
    return planner, echo_expert()


def make_disk_engine(tmp=None) -> MitigationEngine:
    kb = build_kb(["disk_pressure"])
    planner, expert = disk_session_providers(kb)
    return make_engine(kb, planner, registry=disk_registry(), expert=expert, tmp=tmp)


OUT_OF_SCOPE_MESSAGE = "satellite uplink is degraded over the pacific"
OUT_OF_SCOPE_INTENT = "mitigate solar flare interference on the satellite uplink"


def out_of_scope_providers() -> MockProvider:
    planner = MockProvider()
    script_clarified(planner, OUT_OF_SCOPE_MESSAGE, OUT_OF_SCOPE_INTENT)
    script_selection(planner, OUT_OF_SCOPE_INTENT, [])
    return planner


FLAP_MESSAGE = "checkout worker keeps crash-looping"
FLAP_S1_INTENT = "restart the flapping service worker"
FLAP_S2_INTENT = "drain traffic from the flapping worker"


def flapping_providers() -> tuple[MockProvider, MockProvider]:
    planner = MockProvider()
    script_clarified(planner, FLAP_MESSAGE, FLAP_S1_INTENT)
    script_selection(planner, FLAP_S1_INTENT, ["flapping/S1"])
    script_selection(planner, FLAP_S2_INTENT, ["flapping/S2"])
    script_plan(
        planner,
        ["flapping/S1"],
        [
            {
                "node_id": "flapping/S1",
                "action": "Restart the worker process on the affected host",
                "plugin": "bounce",
                "expected_outcomes": ["still flapping"],
            }
        ],
        rationale="bounce the worker first",
    )
    script_plan(
        planner,
        ["flapping/S2"],
        [
            {
                "node_id": "flapping/S2",
                "action": "Drain traffic away from the affected worker",
                "plugin": "bounce",
                "expected_outcomes": ["again"],
            }
        ],
        rationale="drain while it settles",
    )
    return planner, echo_expert()


# -- on-disk workspace: config, script files, manifests -------------------------

def write_disk_workspace(tmp_path, **config_overrides) -> Path:
    """Write a self-contained deployment for the disk scenario.

    Produces config.json (returned), scripted provider files, a plugin
    manifest, and two chat scripts: resolve.chat.json reaches Resolved,
    oos.chat.json escalates out of scope.
    """
    kb = build_kb(["disk_pressure"])
    selected = _disk_selection(kb)
    responses = {
        prompt_key("intent_interpreter", "intent_result.v1", DISK_MESSAGE): json.dumps(
            {"kind": "clarified", "clarified_intent": DISK_INTENT}
        ),
        prompt_key("node_selector", "node_selection.v1", DISK_INTENT): json.dumps(
            {"selected_node_ids": selected}
        ),
        prompt_key(
            "action_planner", "action_plan.v1", "nodes=" + ",".join(selected)
        ): json.dumps(
            {
                "steps": DISK_PLAN_STEPS,
                "rationale": "clear the volume, then confirm usage dropped",
            }
        ),
        prompt_key(
            "intent_interpreter", "intent_result.v1", OUT_OF_SCOPE_MESSAGE
        ): json.dumps({"kind": "clarified", "clarified_intent": OUT_OF_SCOPE_INTENT}),
        prompt_key(
            "node_selector", "node_selection.v1", OUT_OF_SCOPE_INTENT
        ): json.dumps({"selected_node_ids": []}),
    }
    (tmp_path / "providers.json").write_text(json.dumps({"responses": responses}))
    (tmp_path / "expert.json").write_text(
        json.dumps({"behaviors": {"post_processor:plan_review.v1": "echo_user"}})
    )
    (tmp_path / "plugins.json").write_text(
        json.dumps(
            {
                "plugins": [
                    {
                        "name": "disk_check",
                        "kind": "shell_stub",
                        "description": "report disk usage for a node",
                        "config": {"table": DISK_STUB_TABLE},
                        "outcome_patterns": DISK_STUB_PATTERNS,
                    }
                ]
            }
        )
    )
    (tmp_path / "resolve.chat.json").write_text(
        json.dumps(
            {
                "turns": [
                    {"kind": "message", "text": DISK_MESSAGE},
                    {"kind": "result", "text": "archived the logs, space freed on the volume"},
                ]
            }
        )
    )
    (tmp_path / "oos.chat.json").write_text(
        json.dumps({"turns": [{"kind": "message", "text": OUT_OF_SCOPE_MESSAGE}]})
    )
    config = {
        "data_dir": "data",
        "planner_provider": {"kind": "mock", "script": "providers.json"},
        "expert_provider": {"kind": "mock", "script": "expert.json"},
        "plugin_manifests": ["plugins.json"],
        **config_overrides,
    }
    config_path = tmp_path / "config.json"
    config_path.write_text(json.dumps(config))
    return config_path
