"""Session state machine: event sourcing, the mitigation loop, locks, replay."""

import json
import time

import pytest

import support
from tsgflow.errors import Busy, CorruptLog, InvalidState, UnknownSession
from tsgflow.execution import PluginRegistry
from tsgflow.orchestrator import (
    OFF_TOPIC_REPLY,
    LogicalClock,
    MitigationSession,
    SessionEvent,
    SessionState,
    SystemClock,
    replay,
    sequential_ids,
)
from tsgflow.providers import MockProvider
from tsgflow.store import KnowledgeBase


def state_seq(session):
    return [e.payload["state"] for e in session.events if e.kind == "state_change"]


class TestSessionEvent:
    def test_canonical_json_line(self):
        event = SessionEvent(seq=3, kind="user_message", payload={"ts": "t1", "text": "hi"})
        line = event.to_json_line()
        assert line == '{"kind":"user_message","payload":{"text":"hi","ts":"t1"},"seq":3}'
        assert SessionEvent.from_json_line(line) == event

    @pytest.mark.parametrize(
        "line",
        [
            "not json",
            "{}",
            '{"seq": "one", "kind": "user_message", "payload": {}}',
            '{"seq": 1, "kind": "mystery", "payload": {}}',
            '{"seq": 1, "kind": "user_message", "payload": []}',
        ],
    )
    def test_corrupt_lines(self, line):
        with pytest.raises(CorruptLog):
            SessionEvent.from_json_line(line)


class TestClocksAndIds:
    def test_logical_clock(self):
        clock = LogicalClock()
        assert [clock.now() for _ in range(3)] == ["t000001", "t000002", "t000003"]

    def test_sequential_ids(self):
        ids = sequential_ids("sess-")
        assert [ids(), ids()] == ["sess-1", "sess-2"]

    def test_system_clock_is_iso(self):
        from datetime import datetime

        stamp = SystemClock().now()
        assert datetime.fromisoformat(stamp).tzinfo is not None


class TestReducer:
    def test_sequence_gap_rejected(self):
        session = MitigationSession("x")
        session.apply(SessionEvent(1, "user_message", {"text": "a", "ts": "t1"}))
        with pytest.raises(CorruptLog):
            session.apply(SessionEvent(3, "user_message", {"text": "b", "ts": "t2"}))

    def test_replay_empty_log(self):
        session = replay([])
        assert session.state is SessionState.AWAITING_MESSAGE
        assert session.last_seq == 0
        assert session.events == []

    def test_memory_view_limits_turns_keeps_all_insights(self):
        session = MitigationSession("x")
        for i in range(25):
            session.apply(
                SessionEvent(i + 1, "user_message", {"text": f"m{i}", "ts": f"t{i}"})
            )
        view = session.memory_view()
        assert len(view.turns) == 20
        assert view.turns[0] == ("oce", "m5")
        assert view.turns[-1] == ("oce", "m24")


class TestCrossTsgFlow:
    def test_full_session(self):
        engine, sid = support.run_cross_session()
        session = engine.get_session(sid)
        assert session.state is SessionState.RESOLVED
        assert session.iteration_count == 3
        assert [(i.source, i.outcome_label) for i in session.insights] == [
            ("lag_check", "lag_high"),
            ("manual", "failover completed"),
            ("health_probe", "healthy"),
        ]
        selected = [
            e.payload["selected_node_ids"]
            for e in session.events
            if e.kind == "state_change" and "selected_node_ids" in e.payload
        ]
        assert selected == [["db-latency/S1"], ["db-failover/S1"], ["db-failover/S2"]]

    def test_manual_result_follows_the_linker(self):
        engine, sid = support.run_cross_session()
        session = engine.get_session(sid)
        queries = [
            e.payload["query"]
            for e in session.events
            if e.kind == "state_change" and e.payload.get("state") == "Retrieving"
        ]
        assert queries == [
            support.CROSS_INTENT,
            support.FAILOVER_INTENT,
            support.HEALTH_INTENT,
        ]

    def test_resolution_names_terminal_node(self):
        engine, sid = support.run_cross_session()
        session = engine.get_session(sid)
        resolution = [e for e in session.events if e.kind == "resolution"]
        assert len(resolution) == 1
        assert resolution[0].payload["node_id"] == "db-failover/S2"
        assert session.view()["transcript"][-1]["role"] == "copilot"

    def test_plans_reviewed_by_expert(self):
        engine, sid = support.run_cross_session()
        session = engine.get_session(sid)
        plans = [
            e.payload["plan"] for e in session.events
            if e.kind == "state_change" and "plan" in e.payload
        ]
        assert len(plans) == 3
        assert all(p["reviewed"] for p in plans)

    def test_logs_reproducible_across_engines(self):
        first_engine, first_sid = support.run_cross_session()
        second_engine, second_sid = support.run_cross_session()
        assert first_sid == second_sid
        first_log = "\n".join(
            e.to_json_line() for e in first_engine.get_session(first_sid).events
        )
        second_log = "\n".join(
            e.to_json_line() for e in second_engine.get_session(second_sid).events
        )
        assert first_log == second_log

    def test_replay_equals_live_fold(self):
        engine, sid = support.run_cross_session()
        live = engine.get_session(sid)
        replayed = replay(live.events)
        assert replayed.state is live.state
        assert replayed.view() == live.view()


class TestDiskFlow:
    def test_single_step_advance(self):
        engine = support.make_disk_engine()
        sid = engine.start_session().session_id
        engine.submit_message(sid, support.DISK_MESSAGE)
        session = engine.get_session(sid)
        assert session.state is SessionState.PLANNING  # one stage per call
        engine.advance(sid)
        assert session.state is SessionState.EXECUTING_AUTO
        engine.advance(sid)
        assert session.state is SessionState.AWAITING_MANUAL_RESULT
        assert [i.outcome_label for i in session.insights] == ["disk_full"]

    def test_view_statuses_mid_plan(self):
        engine = support.make_disk_engine()
        sid = engine.start_session().session_id
        engine.submit_message(sid, support.DISK_MESSAGE)
        engine.advance(sid, auto=True)
        view = engine.get_session(sid).view()
        statuses = [s["status"] for s in view["plan"]["steps"]]
        assert statuses == ["done", "awaiting_human", "pending"]
        assert view["plan"]["steps"][0]["insight"]["outcome_label"] == "disk_full"
        assert view["pending_manual_action"] == {
            "step_index": 1,
            "action": "Archive logs older than seven days to cold storage",
            "expected_outcomes": ["space freed"],
        }

    def test_completes_after_manual_result(self):
        engine = support.make_disk_engine()
        sid = engine.start_session().session_id
        engine.submit_message(sid, support.DISK_MESSAGE)
        engine.advance(sid, auto=True)
        engine.submit_manual_result(sid, "archived old logs, space freed on the volume")
        session = engine.get_session(sid)
        assert session.state is SessionState.EXECUTING_AUTO
        engine.advance(sid, auto=True)
        assert session.state is SessionState.RESOLVED
        assert [i.outcome_label for i in session.insights] == [
            "disk_full",
            "space freed",
            "disk_cleared",
        ]

    def test_execution_uses_registry_snapshot_from_plan_time(self):
        engine = support.make_disk_engine()
        sid = engine.start_session().session_id
        engine.submit_message(sid, support.DISK_MESSAGE)
        engine.advance(sid)  # plan posted; registry snapshot taken
        engine.registry = PluginRegistry()  # live registry loses every plugin
        engine.advance(sid)  # step 0 still executes against the snapshot
        assert engine.get_session(sid).insights[0].outcome_label == "disk_full"


class TestConversationalPaths:
    def test_off_topic_reply_keeps_waiting(self):
        kb = support.build_kb(support.CROSS_CORPUS)
        planner = MockProvider()
        planner.script_response(
            "intent_interpreter", "intent_result.v1", "nice weather today",
            json.dumps({"kind": "off_topic"}),
        )
        engine = support.make_engine(kb, planner)
        sid = engine.start_session().session_id
        engine.submit_message(sid, "nice weather today")
        session = engine.get_session(sid)
        assert session.state is SessionState.AWAITING_MESSAGE
        assert session.iteration_count == 0
        assert session.view()["transcript"][-1] == {
            "role": "copilot",
            "text": OFF_TOPIC_REPLY,
            "timestamp": session.updated_at,
        }

    def test_clarification_round_trip(self):
        kb = support.build_kb(support.CROSS_CORPUS)
        planner = MockProvider()
        planner.script_response(
            "intent_interpreter", "intent_result.v1", "something is broken",
            json.dumps(
                {"kind": "needs_clarification", "clarification_question": "Which service?"}
            ),
        )
        support.script_clarified(planner, "the orders database", "diagnose high database latency")
        support.script_selection(planner, "diagnose high database latency", [])
        engine = support.make_engine(kb, planner)
        sid = engine.start_session().session_id
        engine.submit_message(sid, "something is broken")
        session = engine.get_session(sid)
        assert session.state is SessionState.CLARIFYING
        assert ("copilot", "Which service?", session.updated_at) in session.turns
        engine.submit_message(sid, "the orders database")
        assert session.state is SessionState.ESCALATED  # empty selection afterwards
        assert session.clarified_intent == "diagnose high database latency"


class TestEscalations:
    def test_out_of_scope(self):
        kb = support.build_kb(support.CROSS_CORPUS)
        engine = support.make_engine(kb, support.out_of_scope_providers())
        sid = engine.start_session().session_id
        engine.submit_message(sid, support.OUT_OF_SCOPE_MESSAGE)
        session = engine.get_session(sid)
        assert session.state is SessionState.ESCALATED
        assert session.escalation_reason == "out_of_scope"
        assert session.current_plan is None
        assert session.view()["escalation_reason"] == "out_of_scope"

    def test_empty_knowledge_base(self):
        planner = MockProvider()
        support.script_clarified(planner, "db is slow", "diagnose high database latency")
        engine = support.make_engine(KnowledgeBase(MockProvider()), planner)
        sid = engine.start_session().session_id
        engine.submit_message(sid, "db is slow")
        session = engine.get_session(sid)
        assert session.state is SessionState.ESCALATED
        assert session.escalation_reason == "out_of_scope"

    def test_empty_plan(self):
        kb = support.build_kb(support.CROSS_CORPUS)
        planner = MockProvider()
        support.script_clarified(planner, "db is slow", support.CROSS_INTENT)
        support.script_selection(planner, support.CROSS_INTENT, ["db-latency/S1"])
        support.script_plan(planner, ["db-latency/S1"], [])
        engine = support.make_engine(kb, planner)
        sid = engine.start_session().session_id
        engine.submit_message(sid, "db is slow")
        engine.advance(sid)
        session = engine.get_session(sid)
        assert session.state is SessionState.ESCALATED
        assert session.escalation_reason == "empty_plan"

    def test_budget_exhausted_after_max_iterations(self):
        kb = support.build_kb(["flapping"])
        planner, expert = support.flapping_providers()
        engine = support.make_engine(
            kb, planner, registry=support.bounce_registry(), expert=expert
        )
        sid = engine.start_session().session_id
        engine.submit_message(sid, support.FLAP_MESSAGE)
        engine.advance(sid, auto=True)
        session = engine.get_session(sid)
        assert session.state is SessionState.ESCALATED
        assert session.escalation_reason == "budget_exhausted"
        assert session.iteration_count == 20
        retrievals = [s for s in state_seq(session) if s == "Retrieving"]
        assert len(retrievals) == 20

    def test_unmatched_manual_outcome_replans_from_summary(self):
        kb = support.build_kb(["flapping"])
        planner = MockProvider()
        support.script_clarified(planner, support.FLAP_MESSAGE, support.FLAP_S1_INTENT)
        support.script_selection(planner, support.FLAP_S1_INTENT, ["flapping/S1"])
        support.script_plan(
            planner,
            ["flapping/S1"],
            [
                {
                    "node_id": "flapping/S1",
                    "action": "Restart the worker by hand",
                    "plugin": None,
                    "expected_outcomes": ["still flapping"],
                }
            ],
        )
        summary_query = "[manual] unmatched: no idea what happened"
        support.script_selection(planner, summary_query, [])
        engine = support.make_engine(kb, planner, expert=support.echo_expert())
        sid = engine.start_session().session_id
        engine.submit_message(sid, support.FLAP_MESSAGE)
        engine.advance(sid)
        assert engine.get_session(sid).state is SessionState.AWAITING_MANUAL_RESULT
        engine.submit_manual_result(sid, "no idea what happened")
        session = engine.get_session(sid)
        assert session.state is SessionState.RETRIEVING
        assert session.pending_query == summary_query
        assert session.iteration_count == 2
        engine.advance(sid)
        assert session.state is SessionState.ESCALATED
        assert session.escalation_reason == "out_of_scope"


class TestFailures:
    def test_provider_miss_fails_session_with_diagnostic(self):
        kb = support.build_kb(support.CROSS_CORPUS)
        planner = MockProvider()
        support.script_clarified(planner, "db is slow", support.CROSS_INTENT)
        # node_selector response missing -> ProviderError inside the pipeline
        engine = support.make_engine(kb, planner)
        sid = engine.start_session().session_id
        engine.submit_message(sid, "db is slow")
        session = engine.get_session(sid)
        assert session.state is SessionState.FAILED
        view = session.view()
        assert "ProviderError" in view["error"]
        assert view["diagnostic_id"]  # stamped by the id factory
        with pytest.raises(InvalidState):
            engine.advance(sid)


class TestInvalidTransitions:
    def _mid_manual_engine(self):
        engine = support.make_disk_engine()
        sid = engine.start_session().session_id
        engine.submit_message(sid, support.DISK_MESSAGE)
        engine.advance(sid, auto=True)
        assert engine.get_session(sid).state is SessionState.AWAITING_MANUAL_RESULT
        return engine, sid

    def test_message_rejected_while_awaiting_manual(self):
        engine, sid = self._mid_manual_engine()
        with pytest.raises(InvalidState):
            engine.submit_message(sid, "another message")

    def test_advance_rejected_in_input_states(self):
        engine, sid = self._mid_manual_engine()
        with pytest.raises(InvalidState):
            engine.advance(sid)

    def test_manual_result_rejected_without_pending_step(self):
        engine = support.make_disk_engine()
        sid = engine.start_session().session_id
        with pytest.raises(InvalidState):
            engine.submit_manual_result(sid, "done")

    def test_absorbing_states_reject_everything(self):
        engine, sid = support.run_cross_session()
        with pytest.raises(InvalidState):
            engine.advance(sid)
        with pytest.raises(InvalidState):
            engine.submit_message(sid, "more")
        with pytest.raises(InvalidState):
            engine.submit_manual_result(sid, "more")

    def test_unknown_session(self):
        engine = support.make_disk_engine()
        with pytest.raises(UnknownSession):
            engine.get_session("ghost")
        with pytest.raises(UnknownSession):
            engine.submit_message("ghost", "hi")


class TestConcurrency:
    def test_busy_while_locked(self):
        engine = support.make_disk_engine()
        sid = engine.start_session().session_id
        engine._locks[sid].acquire()
        try:
            with pytest.raises(Busy):
                engine.submit_message(sid, support.DISK_MESSAGE)
        finally:
            engine._locks[sid].release()
        # lock released: the same call now goes through
        engine.submit_message(sid, support.DISK_MESSAGE)
        assert engine.get_session(sid).state is SessionState.PLANNING

    def test_wait_for_seq_returns_immediately_when_past(self):
        engine, sid = support.run_cross_session()
        started = time.monotonic()
        session = engine.wait_for_seq(sid, after_seq=0, timeout=5.0)
        assert time.monotonic() - started < 1.0
        assert session.last_seq > 0

    def test_wait_for_seq_times_out(self):
        engine, sid = support.run_cross_session()
        started = time.monotonic()
        engine.wait_for_seq(sid, after_seq=10**6, timeout=0.15)
        elapsed = time.monotonic() - started
        assert 0.1 <= elapsed < 2.0


class TestPersistence:
    def test_log_written_and_lazily_reloaded(self, tmp_path):
        engine, sid = support.run_cross_session(tmp=tmp_path)
        live_view = engine.get_session(sid).view()
        log_path = tmp_path / f"{sid}.jsonl"
        assert log_path.exists()

        fresh = support.make_engine(
            support.build_kb(support.CROSS_CORPUS), MockProvider(), tmp=tmp_path
        )
        reloaded = fresh.get_session(sid)
        assert reloaded.view() == live_view
        assert reloaded.state is SessionState.RESOLVED

    def test_log_lines_are_canonical_json(self, tmp_path):
        engine, sid = support.run_cross_session(tmp=tmp_path)
        for line in (tmp_path / f"{sid}.jsonl").read_text().splitlines():
            event = SessionEvent.from_json_line(line)
            assert event.to_json_line() == line

    def test_sequence_gap_detected_on_reload(self, tmp_path):
        engine, sid = support.run_cross_session(tmp=tmp_path)
        path = tmp_path / f"{sid}.jsonl"
        lines = path.read_text().splitlines()
        del lines[1]
        path.write_text("\n".join(lines) + "\n")
        fresh = support.make_engine(
            support.build_kb(support.CROSS_CORPUS), MockProvider(), tmp=tmp_path
        )
        with pytest.raises(CorruptLog):
            fresh.get_session(sid)

    def test_renamed_log_detected(self, tmp_path):
        engine, sid = support.run_cross_session(tmp=tmp_path)
        source = tmp_path / f"{sid}.jsonl"
        (tmp_path / "zz.jsonl").write_text(source.read_text())
        fresh = support.make_engine(
            support.build_kb(support.CROSS_CORPUS), MockProvider(), tmp=tmp_path
        )
        with pytest.raises(CorruptLog):
            fresh.get_session("zz")

    def test_session_ids_lists_disk_sessions(self, tmp_path):
        engine, sid = support.run_cross_session(tmp=tmp_path)
        fresh = support.make_engine(
            support.build_kb(support.CROSS_CORPUS), MockProvider(), tmp=tmp_path
        )
        assert fresh.session_ids() == [sid]
