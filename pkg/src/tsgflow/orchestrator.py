"""Mitigation sessions: the interpret/retrieve/plan/execute loop as a state machine.

A session is event-sourced. Every fact about it (transcript, plan, cursor,
iteration count, even its current state) is a fold over an append-only
event log, applied by one reducer. That buys three things at once: crash
recovery is replay, the audit trail is complete by construction, and with
scripted providers plus an injected clock and id factory the whole log is
byte-identical across runs.

The loop itself: a clarified intent enters Retrieving; retrieval plus
selection feed Planning; the plan executes step by step, automatic steps
through plugins and manual steps through the operator; a finished plan
either resolves (its last node is terminal), continues into a new retrieval
round steered by the last insight's linker, or escalates when the
iteration budget runs out. Empty selection and empty plans escalate
immediately: the engine reports what it cannot do instead of inventing
steps.
"""

from __future__ import annotations

import json
import logging
import threading
import uuid
from dataclasses import dataclass
from datetime import datetime, timezone
from enum import Enum
from pathlib import Path
from typing import Callable, Iterable

from .agents import (
    MEMORY_TURN_LIMIT,
    ActionPlan,
    MemoryView,
    StepMode,
    interpret_intent,
    plan_actions,
    post_process,
    select_nodes,
)
from .compiler import NodeType
from .errors import (
    Busy,
    CorruptLog,
    EmptyIndex,
    EmptyPlan,
    InvalidState,
    ProviderError,
    SchemaViolation,
    TsgflowError,
    UnknownSession,
)
from .execution import Insight, PluginRegistry, execute_step, ingest_manual_result
from .providers import LLMProvider
from .store import KnowledgeBase

logger = logging.getLogger(__name__)

DEFAULT_MAX_ITERATIONS = 20

OFF_TOPIC_REPLY = (
    "This assistant handles incident troubleshooting. Describe the incident "
    "symptom you are working on and I can help."
)


class SessionState(str, Enum):
    AWAITING_MESSAGE = "AwaitingMessage"
    CLARIFYING = "Clarifying"
    RETRIEVING = "Retrieving"
    PLANNING = "Planning"
    EXECUTING_AUTO = "ExecutingAuto"
    AWAITING_MANUAL_RESULT = "AwaitingManualResult"
    ESCALATED = "Escalated"
    RESOLVED = "Resolved"
    FAILED = "Failed"


ABSORBING_STATES = frozenset(
    {SessionState.ESCALATED, SessionState.RESOLVED, SessionState.FAILED}
)
INPUT_STATES = frozenset(
    {
        SessionState.AWAITING_MESSAGE,
        SessionState.CLARIFYING,
        SessionState.AWAITING_MANUAL_RESULT,
    }
)
PIPELINE_STATES = frozenset(
    {SessionState.RETRIEVING, SessionState.PLANNING, SessionState.EXECUTING_AUTO}
)

EVENT_KINDS = frozenset(
    {"user_message", "manual_result", "auto_insight", "state_change", "escalation", "resolution"}
)


@dataclass(frozen=True)
class SessionEvent:
    seq: int
    kind: str
    payload: dict

    def to_json_line(self) -> str:
        return json.dumps(
            {"seq": self.seq, "kind": self.kind, "payload": self.payload},
            sort_keys=True,
            separators=(",", ":"),
        )

    @classmethod
    def from_json_line(cls, line: str) -> "SessionEvent":
        try:
            raw = json.loads(line)
            seq = raw["seq"]
            kind = raw["kind"]
            payload = raw["payload"]
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise CorruptLog(f"unreadable event line: {exc}") from exc
        if not isinstance(seq, int) or kind not in EVENT_KINDS or not isinstance(payload, dict):
            raise CorruptLog(f"malformed event (seq={seq!r}, kind={kind!r})")
        return cls(seq=seq, kind=kind, payload=payload)


class Clock:
    def now(self) -> str:
        raise NotImplementedError


class SystemClock(Clock):
    def now(self) -> str:
        return datetime.now(timezone.utc).isoformat(timespec="milliseconds")


class LogicalClock(Clock):
    """Deterministic counter clock for reproducible logs in tests."""

    def __init__(self):
        self._tick = 0

    def now(self) -> str:
        self._tick += 1
        return f"t{self._tick:06d}"


def default_id_factory() -> str:
    return uuid.uuid4().hex


def sequential_ids(prefix: str = "s") -> Callable[[], str]:
    counter = iter(range(1, 10**9))
    return lambda: f"{prefix}{next(counter)}"


class MitigationSession:
    """Session state as a pure fold over its event log."""

    def __init__(self, session_id: str = ""):
        self.session_id = session_id
        self.state = SessionState.AWAITING_MESSAGE
        self.turns: list[tuple[str, str, str]] = []  # (role, text, ts)
        self.insights: list[Insight] = []  # every insight in the session
        self.plan_insights: list[Insight] = []  # insights of the current plan
        self.current_plan: ActionPlan | None = None
        self.cursor = 0
        self.iteration_count = 0
        self.clarified_intent: str | None = None
        self.pending_query: str | None = None
        self.selected_node_ids: list[str] = []
        self.escalation_reason: str | None = None
        self.error: str | None = None
        self.diagnostic_id: str | None = None
        self.created_at: str | None = None
        self.updated_at: str | None = None
        self.last_seq = 0
        self.events: list[SessionEvent] = []

    def apply(self, event: SessionEvent) -> None:
        """The one reducer: everything a session knows passes through here."""
        if event.seq != self.last_seq + 1:
            raise CorruptLog(
                f"event sequence gap: expected {self.last_seq + 1}, got {event.seq}"
            )
        payload = event.payload
        ts = payload.get("ts", "")
        if self.created_at is None:
            self.created_at = ts
        self.updated_at = ts

        if event.kind == "state_change":
            if "session_id" in payload:
                self.session_id = payload["session_id"]
            if "clarified_intent" in payload:
                self.clarified_intent = payload["clarified_intent"]
            if "query" in payload:
                self.pending_query = payload["query"]
            if "iteration" in payload:
                self.iteration_count = payload["iteration"]
            if "selected_node_ids" in payload:
                self.selected_node_ids = list(payload["selected_node_ids"])
            if "plan" in payload:
                self.current_plan = ActionPlan.from_dict(payload["plan"])
                self.cursor = 0
                self.plan_insights = []
            if "question" in payload:
                self.turns.append(("copilot", payload["question"], ts))
            if "reply" in payload:
                self.turns.append(("copilot", payload["reply"], ts))
            if "error" in payload:
                self.error = payload["error"]
                self.diagnostic_id = payload.get("diagnostic_id")
            self.state = SessionState(payload["state"])
        elif event.kind == "user_message":
            self.turns.append(("oce", payload["text"], ts))
        elif event.kind == "manual_result":
            self.turns.append(("oce", payload["text"], ts))
            insight = Insight.from_dict(payload["insight"])
            self.insights.append(insight)
            self.plan_insights.append(insight)
            self.cursor += 1
        elif event.kind == "auto_insight":
            insight = Insight.from_dict(payload["insight"])
            self.insights.append(insight)
            self.plan_insights.append(insight)
            self.cursor += 1
        elif event.kind == "escalation":
            self.escalation_reason = payload["reason"]
            if payload.get("message"):
                self.turns.append(("copilot", payload["message"], ts))
            self.state = SessionState.ESCALATED
        elif event.kind == "resolution":
            if payload.get("message"):
                self.turns.append(("copilot", payload["message"], ts))
            self.state = SessionState.RESOLVED
        else:
            raise CorruptLog(f"unknown event kind {event.kind!r}")

        self.events.append(event)
        self.last_seq = event.seq

    def memory_view(self) -> MemoryView:
        return MemoryView(
            turns=tuple((role, text) for role, text, _ in self.turns[-MEMORY_TURN_LIMIT:]),
            insights=tuple(i.summary for i in self.insights),
        )

    def pending_manual_step(self):
        if self.state is SessionState.AWAITING_MANUAL_RESULT and self.current_plan:
            return self.current_plan.steps[self.cursor]
        return None

    def view(self) -> dict:
        """Projection served over the API; derivable purely from the log."""
        plan_view = None
        if self.current_plan is not None:
            insights_by_step = {i.step_index: i for i in self.plan_insights}
            steps = []
            for step in self.current_plan.steps:
                if step.step_index < self.cursor:
                    status = "done"
                elif step.step_index == self.cursor and self.state is SessionState.EXECUTING_AUTO:
                    status = "running"
                elif (
                    step.step_index == self.cursor
                    and self.state is SessionState.AWAITING_MANUAL_RESULT
                ):
                    status = "awaiting_human"
                else:
                    status = "pending"
                insight = insights_by_step.get(step.step_index)
                steps.append(
                    {
                        **step.to_dict(),
                        "status": status,
                        "insight": insight.to_dict() if insight else None,
                    }
                )
            plan_view = {
                "steps": steps,
                "rationale": self.current_plan.rationale,
                "source_nodes": list(self.current_plan.source_nodes),
                "reviewed": self.current_plan.reviewed,
            }
        pending = self.pending_manual_step()
        view = {
            "session_id": self.session_id,
            "state": self.state.value,
            "iteration_count": self.iteration_count,
            "transcript": [
                {"role": role, "text": text, "timestamp": ts} for role, text, ts in self.turns
            ],
            "plan": plan_view,
            "pending_manual_action": (
                {
                    "step_index": pending.step_index,
                    "action": pending.action,
                    "expected_outcomes": list(pending.expected_outcomes),
                }
                if pending
                else None
            ),
            "last_seq": self.last_seq,
            "created_at": self.created_at,
            "updated_at": self.updated_at,
        }
        if self.escalation_reason is not None:
            view["escalation_reason"] = self.escalation_reason
        if self.error is not None:
            view["error"] = self.error
            view["diagnostic_id"] = self.diagnostic_id
        return view


def replay(events: Iterable[SessionEvent]) -> MitigationSession:
    """Rebuild a session from its log; a fresh session for an empty log."""
    session = MitigationSession()
    for event in events:
        session.apply(event)
    return session


class MitigationEngine:
    """Drives sessions over one knowledge base, registry, and provider pair."""

    def __init__(
        self,
        kb: KnowledgeBase,
        planner_provider: LLMProvider,
        expert_provider: LLMProvider | None = None,
        registry: PluginRegistry | None = None,
        max_iterations: int = DEFAULT_MAX_ITERATIONS,
        top_k: int = 5,
        clock: Clock | None = None,
        id_factory: Callable[[], str] | None = None,
        sessions_dir: str | Path | None = None,
    ):
        self.kb = kb
        self.planner_provider = planner_provider
        self.expert_provider = expert_provider
        self.registry = registry if registry is not None else PluginRegistry()
        self.max_iterations = max_iterations
        self.top_k = top_k
        self.clock = clock if clock is not None else SystemClock()
        self.id_factory = id_factory if id_factory is not None else default_id_factory
        self.sessions_dir = Path(sessions_dir) if sessions_dir is not None else None
        self._sessions: dict[str, MitigationSession] = {}
        self._snapshots: dict[str, PluginRegistry] = {}  # registry frozen at plan time
        self._locks: dict[str, threading.Lock] = {}
        self._conds: dict[str, threading.Condition] = {}
        self._guard = threading.Lock()

    # -- session registry ----------------------------------------------------

    def _register(self, session: MitigationSession) -> None:
        with self._guard:
            self._sessions[session.session_id] = session
            self._locks[session.session_id] = threading.Lock()
            self._conds[session.session_id] = threading.Condition()

    def get_session(self, session_id: str) -> MitigationSession:
        with self._guard:
            session = self._sessions.get(session_id)
        if session is not None:
            return session
        if self.sessions_dir is not None:
            path = self.sessions_dir / f"{session_id}.jsonl"
            if path.exists():
                lines = [l for l in path.read_text(encoding="utf-8").splitlines() if l.strip()]
                session = replay(SessionEvent.from_json_line(line) for line in lines)
                if session.session_id != session_id:
                    raise CorruptLog(
                        f"log {path} replays to session {session.session_id!r}"
                    )
                self._register(session)
                return session
        raise UnknownSession(f"no session {session_id!r}")

    def session_ids(self) -> list[str]:
        with self._guard:
            known = set(self._sessions)
        if self.sessions_dir is not None and self.sessions_dir.exists():
            known.update(p.stem for p in self.sessions_dir.glob("*.jsonl"))
        return sorted(known)

    def _locked(self, session_id: str) -> "_SessionLock":
        with self._guard:
            lock = self._locks.get(session_id)
        if lock is None:
            # Force a load (and lock creation) for sessions only on disk.
            self.get_session(session_id)
            with self._guard:
                lock = self._locks[session_id]
        return _SessionLock(lock, session_id)

    def wait_for_seq(self, session_id: str, after_seq: int, timeout: float) -> MitigationSession:
        """Block until the session log grows past after_seq, or timeout."""
        session = self.get_session(session_id)
        with self._guard:
            cond = self._conds[session_id]
        with cond:
            cond.wait_for(lambda: session.last_seq > after_seq, timeout=timeout)
        return session

    # -- event plumbing -------------------------------------------------------

    def _append(self, session: MitigationSession, kind: str, payload: dict) -> None:
        payload = {**payload, "ts": self.clock.now()}
        event = SessionEvent(seq=session.last_seq + 1, kind=kind, payload=payload)
        session.apply(event)
        if self.sessions_dir is not None:
            self.sessions_dir.mkdir(parents=True, exist_ok=True)
            path = self.sessions_dir / f"{session.session_id}.jsonl"
            with open(path, "a", encoding="utf-8") as fh:
                fh.write(event.to_json_line() + "\n")
        with self._guard:
            cond = self._conds.get(session.session_id)
        if cond is not None:
            with cond:
                cond.notify_all()

    def _fail(self, session: MitigationSession, exc: Exception) -> None:
        diagnostic_id = self.id_factory()
        logger.error(
            "session %s failed [%s]: %s", session.session_id, diagnostic_id, exc, exc_info=True
        )
        self._append(
            session,
            "state_change",
            {
                "state": SessionState.FAILED.value,
                "error": f"{type(exc).__name__}: {exc}",
                "diagnostic_id": diagnostic_id,
            },
        )

    # -- public operations -----------------------------------------------------

    def start_session(self) -> MitigationSession:
        session = MitigationSession(session_id=self.id_factory())
        self._register(session)
        self._append(
            session,
            "state_change",
            {"state": SessionState.AWAITING_MESSAGE.value, "session_id": session.session_id},
        )
        return session

    def submit_message(self, session_id: str, text: str) -> MitigationSession:
        with self._locked(session_id):
            session = self.get_session(session_id)
            if session.state not in (SessionState.AWAITING_MESSAGE, SessionState.CLARIFYING):
                raise InvalidState(
                    f"cannot accept a message in state {session.state.value}"
                )
            self._append(session, "user_message", {"text": text})
            try:
                result = interpret_intent(text, session.memory_view(), self.planner_provider)
                if result.kind == "off_topic":
                    self._append(
                        session,
                        "state_change",
                        {"state": session.state.value, "reply": OFF_TOPIC_REPLY},
                    )
                elif result.kind == "needs_clarification":
                    self._append(
                        session,
                        "state_change",
                        {
                            "state": SessionState.CLARIFYING.value,
                            "question": result.clarification_question,
                        },
                    )
                else:
                    self._append(
                        session,
                        "state_change",
                        {
                            "state": SessionState.RETRIEVING.value,
                            "clarified_intent": result.clarified_intent,
                            "query": result.clarified_intent,
                            "iteration": 1,
                        },
                    )
                    self._advance_once(session)
            except (ProviderError, SchemaViolation, TsgflowError, ValueError) as exc:
                self._fail(session, exc)
            return session

    def advance(self, session_id: str, auto: bool = False) -> MitigationSession:
        with self._locked(session_id):
            session = self.get_session(session_id)
            if session.state in ABSORBING_STATES:
                raise InvalidState(f"session is {session.state.value}; nothing to advance")
            if session.state in INPUT_STATES:
                raise InvalidState(
                    f"state {session.state.value} is waiting for operator input"
                )
            try:
                self._advance_once(session)
                while auto and session.state in PIPELINE_STATES:
                    self._advance_once(session)
            except (ProviderError, SchemaViolation, TsgflowError, ValueError) as exc:
                self._fail(session, exc)
            return session

    def submit_manual_result(self, session_id: str, text: str) -> MitigationSession:
        with self._locked(session_id):
            session = self.get_session(session_id)
            if session.state is not SessionState.AWAITING_MANUAL_RESULT:
                raise InvalidState(
                    f"no manual step pending in state {session.state.value}"
                )
            assert session.current_plan is not None
            step = session.current_plan.steps[session.cursor]
            insight = ingest_manual_result(step, text, self.clock.now())
            self._append(
                session,
                "manual_result",
                {"text": text, "step_index": step.step_index, "insight": insight.to_dict()},
            )
            try:
                self._continue_after_step(session, insight)
            except (ProviderError, SchemaViolation, TsgflowError, ValueError) as exc:
                self._fail(session, exc)
            return session

    # -- pipeline stages --------------------------------------------------------

    def _advance_once(self, session: MitigationSession) -> None:
        if session.state is SessionState.RETRIEVING:
            self._stage_retrieve(session)
        elif session.state is SessionState.PLANNING:
            self._stage_plan(session)
        elif session.state is SessionState.EXECUTING_AUTO:
            self._stage_execute(session)
        else:  # pragma: no cover - guarded by advance()
            raise InvalidState(f"no pipeline stage for state {session.state.value}")

    def _stage_retrieve(self, session: MitigationSession) -> None:
        query = session.pending_query or session.clarified_intent or ""
        try:
            candidates = self.kb.retrieve_top_k(query, self.top_k)
        except EmptyIndex:
            self._escalate(session, "out_of_scope", "The knowledge base is empty.")
            return
        selected = select_nodes(query, candidates, self.planner_provider)
        if not selected:
            self._escalate(
                session,
                "out_of_scope",
                "No available knowledge covers this incident; please investigate manually.",
            )
            return
        self._append(
            session,
            "state_change",
            {
                "state": SessionState.PLANNING.value,
                "selected_node_ids": [node.node_id for node in selected],
                "query": query,
            },
        )

    def _stage_plan(self, session: MitigationSession) -> None:
        nodes = [self.kb.node(nid) for nid in session.selected_node_ids]
        snapshot = self.registry.snapshot()
        try:
            plan = plan_actions(
                nodes, session.memory_view(), snapshot, self.planner_provider
            )
        except EmptyPlan:
            self._escalate(
                session,
                "empty_plan",
                "The selected knowledge offers no applicable action; please investigate manually.",
            )
            return
        plan = post_process(plan, self.expert_provider)
        self._snapshots[session.session_id] = snapshot
        first = plan.steps[0]
        next_state = (
            SessionState.EXECUTING_AUTO
            if first.mode is StepMode.AUTO
            else SessionState.AWAITING_MANUAL_RESULT
        )
        self._append(
            session,
            "state_change",
            {"state": next_state.value, "plan": plan.to_dict()},
        )

    def _stage_execute(self, session: MitigationSession) -> None:
        assert session.current_plan is not None
        step = session.current_plan.steps[session.cursor]
        registry = self._snapshots.get(session.session_id, self.registry)
        insight = execute_step(step, registry, session.session_id, self.clock.now())
        self._append(
            session,
            "auto_insight",
            {"step_index": step.step_index, "insight": insight.to_dict()},
        )
        self._continue_after_step(session, insight)

    def _continue_after_step(self, session: MitigationSession, insight: Insight) -> None:
        """After any step's insight: next step, resolve, continue, or escalate."""
        plan = session.current_plan
        assert plan is not None
        if session.cursor < len(plan.steps):
            next_step = plan.steps[session.cursor]
            desired = (
                SessionState.EXECUTING_AUTO
                if next_step.mode is StepMode.AUTO
                else SessionState.AWAITING_MANUAL_RESULT
            )
            if session.state is not desired:
                self._append(session, "state_change", {"state": desired.value})
            return

        last_step = plan.steps[-1]
        node = None
        if last_step.node_id is not None:
            try:
                node = self.kb.node(last_step.node_id)
            except TsgflowError:
                node = None
        if node is not None and node.node_type is NodeType.TERMINAL:
            self._append(
                session,
                "resolution",
                {
                    "node_id": node.node_id,
                    "message": f"Mitigation complete: confirmed at {node.node_id}.",
                },
            )
            return

        query = insight.summary
        if node is not None:
            for linker in node.linkers:
                if linker.outcome_label == insight.outcome_label:
                    if linker.resolved_target is not None:
                        try:
                            query = self.kb.node(linker.resolved_target).intent
                        except TsgflowError:
                            query = linker.target_intent
                    else:
                        query = linker.target_intent
                    break

        if session.iteration_count >= self.max_iterations:
            self._escalate(
                session,
                "budget_exhausted",
                f"Iteration budget ({self.max_iterations}) exhausted without resolution; "
                f"handing off to human investigation.",
            )
            return
        self._append(
            session,
            "state_change",
            {
                "state": SessionState.RETRIEVING.value,
                "query": query,
                "iteration": session.iteration_count + 1,
            },
        )

    def _escalate(self, session: MitigationSession, reason: str, message: str) -> None:
        self._append(session, "escalation", {"reason": reason, "message": message})


class _SessionLock:
    """Non-blocking per-session writer lock; concurrent writers get Busy."""

    def __init__(self, lock: threading.Lock, session_id: str):
        self._lock = lock
        self._session_id = session_id

    def __enter__(self):
        if not self._lock.acquire(blocking=False):
            raise Busy(f"session {self._session_id!r} is processing another request")
        return self

    def __exit__(self, *exc_info):
        self._lock.release()
        return False
