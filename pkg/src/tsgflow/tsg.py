"""Structured troubleshooting-guide documents: parsing, quality checks, normalization.

A structured TSG is a five-section JSON document (background, terminology,
FAQ, flow, appendix) whose flow is an ordered list of steps. Each step maps
outcome labels to a target: another step in the same document, an intent
phrase owned by some other document, or a terminal marker. This module
turns serialized documents into validated in-memory values, scores them
against a fixed quality rule set, and drives LLM-assisted normalization of
raw free-text guides into the structured format.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Any

from .errors import DocumentSyntaxError, NormalizationFailed, SchemaError, SchemaViolation
from .providers import ChatRequest, LLMProvider, Message, load_prompt

logger = logging.getLogger(__name__)

TERMINAL_MARKER = "TERMINAL"
NORMALIZATION_RETRIES = 3
MIN_ACTION_LENGTH = 10
PLACEHOLDER_ACTIONS = frozenset({"todo", "tbd", "fixme", "n/a", "na", "none", "xxx", "?"})

_TSG_FIELDS = frozenset({"tsg_id", "title", "background", "terminology", "faq", "flow", "appendix"})
_STEP_FIELDS = frozenset({"step_id", "intent", "action", "outcomes", "executable_hint"})
_STEP_REQUIRED = frozenset({"step_id", "intent", "action", "outcomes"})


@dataclass(frozen=True)
class OutcomeTarget:
    """Where one labeled outcome of a step leads.

    kind is one of "step" (internal reference), "external" (an intent phrase
    to be resolved against other documents), or "terminal".
    """

    kind: str
    step_id: str | None = None
    external_intent: str | None = None


@dataclass(frozen=True)
class FlowStep:
    step_id: str
    intent: str
    action: str
    outcomes: dict[str, OutcomeTarget] = field(default_factory=dict)
    executable_hint: str | None = None

    def is_terminal(self) -> bool:
        return not self.outcomes


@dataclass(frozen=True)
class StructuredTSG:
    tsg_id: str
    title: str
    background: str
    terminology: dict[str, str]
    faq: tuple[tuple[str, str], ...]
    flow: tuple[FlowStep, ...]
    appendix: str = ""

    def step_ids(self) -> list[str]:
        return [step.step_id for step in self.flow]


@dataclass(frozen=True)
class QualityViolation:
    rule_id: str
    severity: str  # "error" | "warning"
    location: str
    message: str


@dataclass(frozen=True)
class QualityReport:
    tsg_id: str
    violations: tuple[QualityViolation, ...]

    @property
    def passed(self) -> bool:
        return not any(v.severity == "error" for v in self.violations)

    def errors(self) -> list[QualityViolation]:
        return [v for v in self.violations if v.severity == "error"]

    def describe(self) -> str:
        if not self.violations:
            return "no violations"
        return "; ".join(
            f"{v.rule_id}({v.severity}) at {v.location}: {v.message}" for v in self.violations
        )


class _DuplicateKey(Exception):
    def __init__(self, key: str):
        super().__init__(key)
        self.key = key


def _reject_duplicate_keys(pairs: list[tuple[str, Any]]) -> dict:
    obj: dict = {}
    for key, value in pairs:
        if key in obj:
            raise _DuplicateKey(key)
        obj[key] = value
    return obj


def _require_str(payload: dict, name: str, location: str, allow_empty: bool = True) -> str:
    value = payload.get(name)
    if not isinstance(value, str):
        raise SchemaError(f"field {name!r} must be a string", location)
    if not allow_empty and not value.strip():
        raise SchemaError(f"field {name!r} must be non-empty", location)
    return value


def _parse_outcome_target(step_id: str, label: str, raw: Any) -> OutcomeTarget:
    location = f"step {step_id}"
    if raw == TERMINAL_MARKER:
        return OutcomeTarget(kind="terminal")
    if isinstance(raw, dict):
        if set(raw) == {"step"}:
            target = raw["step"]
            if not isinstance(target, str) or not target:
                raise SchemaError(
                    f"outcome {label!r} has a non-string step reference", location
                )
            return OutcomeTarget(kind="step", step_id=target)
        if set(raw) == {"external_intent"}:
            intent = raw["external_intent"]
            if not isinstance(intent, str) or not intent.strip():
                raise SchemaError(
                    f"outcome {label!r} has an empty external intent", location
                )
            return OutcomeTarget(kind="external", external_intent=intent)
    raise SchemaError(
        f"outcome {label!r} must be {{\"step\": id}}, {{\"external_intent\": text}} "
        f"or \"{TERMINAL_MARKER}\"",
        location,
    )


def _parse_flow_step(raw: Any, position: int) -> FlowStep:
    if not isinstance(raw, dict):
        raise SchemaError(f"flow[{position}] must be an object", f"flow[{position}]")
    location = f"flow[{position}]"
    unknown = set(raw) - _STEP_FIELDS
    if unknown:
        raise SchemaError(f"unknown step fields {sorted(unknown)}", location)
    missing = _STEP_REQUIRED - set(raw)
    if missing:
        raise SchemaError(f"missing step fields {sorted(missing)}", location)
    step_id = _require_str(raw, "step_id", location, allow_empty=False)
    location = f"step {step_id}"
    intent = _require_str(raw, "intent", location, allow_empty=False)
    action = _require_str(raw, "action", location, allow_empty=False)
    outcomes_raw = raw["outcomes"]
    if not isinstance(outcomes_raw, dict):
        raise SchemaError("field 'outcomes' must be an object", location)
    outcomes = {
        label: _parse_outcome_target(step_id, label, target)
        for label, target in outcomes_raw.items()
    }
    hint = raw.get("executable_hint")
    if hint is not None and not isinstance(hint, str):
        raise SchemaError("field 'executable_hint' must be a string or null", location)
    return FlowStep(
        step_id=step_id,
        intent=intent,
        action=action,
        outcomes=outcomes,
        executable_hint=hint or None,
    )


def tsg_from_payload(payload: Any) -> StructuredTSG:
    """Build and validate a StructuredTSG from already-parsed JSON."""
    if not isinstance(payload, dict):
        raise SchemaError("document root must be an object", "document")
    unknown = set(payload) - _TSG_FIELDS
    if unknown:
        raise SchemaError(f"unknown document fields {sorted(unknown)}", "document")
    missing = _TSG_FIELDS - set(payload)
    if missing:
        raise SchemaError(f"missing document sections {sorted(missing)}", "document")

    tsg_id = _require_str(payload, "tsg_id", "tsg_id", allow_empty=False)
    title = _require_str(payload, "title", "title")
    background = _require_str(payload, "background", "background")
    appendix = _require_str(payload, "appendix", "appendix")

    terminology_raw = payload["terminology"]
    if not isinstance(terminology_raw, dict) or not all(
        isinstance(k, str) and isinstance(v, str) for k, v in terminology_raw.items()
    ):
        raise SchemaError("'terminology' must map terms to definitions", "terminology")

    faq_raw = payload["faq"]
    if not isinstance(faq_raw, list):
        raise SchemaError("'faq' must be an array", "faq")
    faq: list[tuple[str, str]] = []
    for i, entry in enumerate(faq_raw):
        if (
            not isinstance(entry, dict)
            or set(entry) != {"q", "a"}
            or not isinstance(entry["q"], str)
            or not isinstance(entry["a"], str)
        ):
            raise SchemaError("faq entries must be {q, a} string pairs", f"faq[{i}]")
        faq.append((entry["q"], entry["a"]))

    flow_raw = payload["flow"]
    if not isinstance(flow_raw, list) or not flow_raw:
        raise SchemaError("'flow' must be a non-empty array of steps", "flow")
    steps = [_parse_flow_step(raw, i) for i, raw in enumerate(flow_raw)]

    seen: set[str] = set()
    for step in steps:
        if step.step_id in seen:
            raise SchemaError(f"duplicate step_id {step.step_id!r}", f"step {step.step_id}")
        seen.add(step.step_id)
    for step in steps:
        for label, target in step.outcomes.items():
            if target.kind == "step" and target.step_id not in seen:
                raise SchemaError(
                    f"outcome {label!r} references unknown step {target.step_id!r}",
                    f"step {step.step_id}",
                )

    return StructuredTSG(
        tsg_id=tsg_id,
        title=title,
        background=background,
        terminology=dict(terminology_raw),
        faq=tuple(faq),
        flow=tuple(steps),
        appendix=appendix,
    )


def parse_structured_tsg(document: str) -> StructuredTSG:
    """Parse a serialized structured-TSG document.

    Raises DocumentSyntaxError (with line/column) for malformed JSON and
    SchemaError (with a section or step location) for structural problems,
    including duplicate object keys, which plain JSON parsing would
    silently collapse.
    """
    try:
        payload = json.loads(document, object_pairs_hook=_reject_duplicate_keys)
    except _DuplicateKey as exc:
        raise SchemaError(f"duplicate key {exc.key!r}", exc.key) from exc
    except json.JSONDecodeError as exc:
        raise DocumentSyntaxError(exc.msg, exc.lineno, exc.colno) from exc
    return tsg_from_payload(payload)


def tsg_to_payload(tsg: StructuredTSG) -> dict:
    """Render a StructuredTSG back to the on-disk JSON shape."""

    def outcome(target: OutcomeTarget) -> Any:
        if target.kind == "terminal":
            return TERMINAL_MARKER
        if target.kind == "step":
            return {"step": target.step_id}
        return {"external_intent": target.external_intent}

    return {
        "tsg_id": tsg.tsg_id,
        "title": tsg.title,
        "background": tsg.background,
        "terminology": {k: tsg.terminology[k] for k in sorted(tsg.terminology)},
        "faq": [{"q": q, "a": a} for q, a in tsg.faq],
        "flow": [
            {
                "step_id": step.step_id,
                "intent": step.intent,
                "action": step.action,
                "outcomes": {
                    label: outcome(step.outcomes[label]) for label in sorted(step.outcomes)
                },
                "executable_hint": step.executable_hint,
            }
            for step in tsg.flow
        ],
        "appendix": tsg.appendix,
    }


def serialize_structured_tsg(tsg: StructuredTSG) -> str:
    return json.dumps(tsg_to_payload(tsg), indent=2, ensure_ascii=False) + "\n"


def _reachable_step_ids(tsg: StructuredTSG) -> set[str]:
    by_id = {step.step_id: step for step in tsg.flow}
    frontier = [tsg.flow[0].step_id]
    reached = {tsg.flow[0].step_id}
    while frontier:
        step = by_id[frontier.pop()]
        for target in step.outcomes.values():
            # Dangling references are Q3's problem; don't chase them here.
            if target.kind == "step" and target.step_id in by_id and target.step_id not in reached:
                reached.add(target.step_id)
                frontier.append(target.step_id)
    return reached


def validate_quality(tsg: StructuredTSG) -> QualityReport:
    """Evaluate the fixed quality rule set.

    Q1 (error): the content-bearing sections are populated: background text
        is non-empty and the flow has at least one step.
    Q2 (error): every flow step is reachable from the first step.
    Q3 (error): every outcome target is an existing internal step, a
        non-empty external intent, or the terminal marker.
    Q4 (warning): action text is not a placeholder and is at least 10
        characters long.
    Q5 (warning): every terminology term is referenced in the background or
        the flow (case-insensitive).
    """
    violations: list[QualityViolation] = []

    if not tsg.background.strip():
        violations.append(
            QualityViolation("Q1", "error", "background", "background section is empty")
        )
    if not tsg.flow:
        violations.append(QualityViolation("Q1", "error", "flow", "flow has no steps"))
        return QualityReport(tsg_id=tsg.tsg_id, violations=tuple(violations))

    reached = _reachable_step_ids(tsg)
    for step in tsg.flow:
        if step.step_id not in reached:
            violations.append(
                QualityViolation(
                    "Q2",
                    "error",
                    f"step {step.step_id}",
                    f"step {step.step_id} is unreachable from step {tsg.flow[0].step_id}",
                )
            )

    known = set(tsg.step_ids())
    for step in tsg.flow:
        for label, target in step.outcomes.items():
            if target.kind == "step" and target.step_id not in known:
                violations.append(
                    QualityViolation(
                        "Q3",
                        "error",
                        f"step {step.step_id}",
                        f"outcome {label!r} references unknown step {target.step_id!r}",
                    )
                )
            elif target.kind == "external" and not (target.external_intent or "").strip():
                violations.append(
                    QualityViolation(
                        "Q3",
                        "error",
                        f"step {step.step_id}",
                        f"outcome {label!r} has an empty external intent",
                    )
                )

    for step in tsg.flow:
        action = step.action.strip()
        if action.lower() in PLACEHOLDER_ACTIONS or len(action) < MIN_ACTION_LENGTH:
            violations.append(
                QualityViolation(
                    "Q4",
                    "warning",
                    f"step {step.step_id}",
                    f"action {action!r} looks like a placeholder",
                )
            )

    # Q5: a term is "referenced" if it appears in background or any step text.
    haystack = "\n".join(
        [tsg.background] + [f"{s.intent}\n{s.action}" for s in tsg.flow]
    ).lower()
    for term in tsg.terminology:
        if term.lower() not in haystack:
            violations.append(
                QualityViolation(
                    "Q5",
                    "warning",
                    "terminology",
                    f"term {term!r} is never referenced in background or flow",
                )
            )

    return QualityReport(tsg_id=tsg.tsg_id, violations=tuple(violations))


def normalize_raw_tsg(
    raw: str, provider: LLMProvider, retries: int = NORMALIZATION_RETRIES
) -> StructuredTSG:
    """Reformat a raw free-text guide into a validated StructuredTSG.

    One initial prompt plus up to `retries` corrective re-prompts; each
    re-prompt appends the previous attempt's violation report so the
    provider can fix specific problems. Provider output that fails to parse
    is folded into the report under the synthetic rule id "PARSE".
    """
    if not raw.strip():
        raise ValueError("raw TSG text is empty")
    system = Message(role="system", content=load_prompt("tsg_normalizer"))
    user_text = raw
    report = QualityReport(tsg_id="", violations=())
    for attempt in range(1, retries + 2):
        try:
            payload = provider.chat(
                ChatRequest(
                    agent="tsg_normalizer",
                    messages=(system, Message(role="user", content=user_text)),
                    output_schema="structured_tsg.v1",
                )
            )
            tsg = tsg_from_payload(payload)
            report = validate_quality(tsg)
        except SchemaViolation as exc:
            report = QualityReport(
                tsg_id="",
                violations=(QualityViolation("PARSE", "error", "document", str(exc)),),
            )
        except (SchemaError, DocumentSyntaxError) as exc:
            tsg_id = payload.get("tsg_id", "") if isinstance(payload, dict) else ""
            tsg_id = tsg_id if isinstance(tsg_id, str) else ""
            location = getattr(exc, "location", None) or "document"
            report = QualityReport(
                tsg_id=tsg_id,
                violations=(QualityViolation("PARSE", "error", location, str(exc)),),
            )
        else:
            if report.passed:
                if report.violations:
                    logger.info(
                        "normalized TSG %s with warnings: %s", tsg.tsg_id, report.describe()
                    )
                return tsg
        logger.debug("normalization attempt %d failed: %s", attempt, report.describe())
        user_text = (
            f"{raw}\n\nYour previous attempt failed these checks, fix them and "
            f"return the full corrected document:\n{report.describe()}"
        )
    raise NormalizationFailed(
        f"document still invalid after {retries + 1} attempts: {report.describe()}", report
    )
