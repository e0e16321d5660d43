"""HTTP surface: TSG ingestion, KB inspection, and live mitigation sessions.

Thin and lossless over the engine: every endpoint maps onto one engine or
store operation, every response carries schema_version, and any session
view served here is reconstructable from the persisted event log alone, so
a restarted server picks up mid-session exactly where the log ends.
"""

from __future__ import annotations

import logging
import uuid

from fastapi import FastAPI, Query, Request, Response
from fastapi.responses import JSONResponse, PlainTextResponse
from pydantic import BaseModel

from .compiler import compile_tsg
from .config import AppConfig
from .errors import (
    Busy,
    DocumentSyntaxError,
    EmptyIndex,
    InvalidState,
    ProviderError,
    SchemaError,
    TsgflowError,
    UnknownNode,
    UnknownSession,
)
from .orchestrator import MitigationEngine, MitigationSession
from .store import node_to_record
from .tsg import parse_structured_tsg, validate_quality

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1

_STATUS_BY_ERROR: list[tuple[type, int]] = [
    (DocumentSyntaxError, 400),
    (SchemaError, 400),
    (UnknownSession, 404),
    (UnknownNode, 404),
    (EmptyIndex, 404),
    (InvalidState, 409),
    (Busy, 429),
    (ProviderError, 503),
]


class MessageBody(BaseModel):
    text: str


class ResultBody(BaseModel):
    text: str


def session_view(session: MitigationSession) -> dict:
    return {"schema_version": SCHEMA_VERSION, **session.view()}


def quality_report_dict(report) -> dict:
    return {
        "tsg_id": report.tsg_id,
        "passed": report.passed,
        "violations": [
            {
                "rule_id": v.rule_id,
                "severity": v.severity,
                "location": v.location,
                "message": v.message,
            }
            for v in report.violations
        ],
    }


def create_app(engine: MitigationEngine, config: AppConfig | None = None) -> FastAPI:
    config = config or AppConfig()
    app = FastAPI(title="tsgflow", docs_url=None, redoc_url=None)

    @app.exception_handler(TsgflowError)
    def handle_domain_error(request: Request, exc: TsgflowError) -> JSONResponse:
        for error_type, status in _STATUS_BY_ERROR:
            if isinstance(exc, error_type):
                return JSONResponse(
                    status_code=status,
                    content={
                        "schema_version": SCHEMA_VERSION,
                        "error": type(exc).__name__,
                        "detail": str(exc),
                    },
                )
        diagnostic_id = uuid.uuid4().hex
        logger.error("unhandled domain error [%s]: %s", diagnostic_id, exc, exc_info=True)
        return JSONResponse(
            status_code=500,
            content={
                "schema_version": SCHEMA_VERSION,
                "error": type(exc).__name__,
                "detail": str(exc),
                "diagnostic_id": diagnostic_id,
            },
        )

    @app.get("/healthz")
    def healthz() -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "status": "ok",
            "nodes": len(engine.kb),
            "sessions": len(engine.session_ids()),
        }

    # -- knowledge base -------------------------------------------------------

    @app.post("/tsgs")
    async def ingest_tsg(request: Request, replace: bool = False) -> JSONResponse:
        document = (await request.body()).decode("utf-8")
        tsg = parse_structured_tsg(document)
        report = validate_quality(tsg)
        if not report.passed:
            return JSONResponse(
                status_code=400,
                content={
                    "schema_version": SCHEMA_VERSION,
                    "error": "QualityError",
                    "detail": f"TSG {tsg.tsg_id} has error-severity quality violations",
                    "quality_report": quality_report_dict(report),
                },
            )
        already_present = any(
            node.source_kind == "tsg" and node.source_id == tsg.tsg_id
            for node in engine.kb.all_nodes()
        )
        if already_present:
            if not replace:
                return JSONResponse(
                    status_code=409,
                    content={
                        "schema_version": SCHEMA_VERSION,
                        "error": "DuplicateTsg",
                        "detail": f"TSG {tsg.tsg_id!r} already ingested; "
                        f"use ?replace=true to overwrite",
                    },
                )
            engine.kb.remove_source(tsg.tsg_id)
        nodes = compile_tsg(tsg)
        engine.kb.upsert_nodes(nodes)
        resolution = engine.kb.resolve_all()
        config.kb_path.parent.mkdir(parents=True, exist_ok=True)
        engine.kb.save(config.kb_path)
        return JSONResponse(
            {
                "schema_version": SCHEMA_VERSION,
                "tsg_id": tsg.tsg_id,
                "nodes_added": len(nodes),
                "quality_report": quality_report_dict(report),
                "resolution": {
                    "resolved": len(resolution.resolved),
                    "unresolved": len(resolution.unresolved),
                },
            }
        )

    @app.get("/kb/nodes")
    def query_nodes(query: str, k: int = Query(default=engine.top_k)) -> dict:
        if k < 1:
            raise SchemaError("k must be >= 1", "k")
        results = engine.kb.retrieve_top_k(query, k)
        return {
            "schema_version": SCHEMA_VERSION,
            "results": [
                {"node": node_to_record(scored.node), "score": scored.score}
                for scored in results
            ],
        }

    @app.get("/kb/graph")
    def kb_graph(request: Request) -> Response:
        if "text/vnd.graphviz" in request.headers.get("accept", ""):
            return PlainTextResponse(engine.kb.to_dot(), media_type="text/vnd.graphviz")
        return JSONResponse({"schema_version": SCHEMA_VERSION, **engine.kb.graph_export()})

    # -- sessions ---------------------------------------------------------------

    @app.post("/sessions")
    def create_session() -> dict:
        return session_view(engine.start_session())

    @app.get("/sessions")
    def list_sessions() -> dict:
        return {"schema_version": SCHEMA_VERSION, "sessions": engine.session_ids()}

    @app.get("/sessions/{session_id}")
    def get_session(
        session_id: str,
        wait_seq: int | None = None,
        timeout: float | None = None,
    ) -> dict:
        if wait_seq is not None:
            wait = config.poll_timeout if timeout is None else min(timeout, config.poll_timeout)
            session = engine.wait_for_seq(session_id, wait_seq, wait)
        else:
            session = engine.get_session(session_id)
        return session_view(session)

    @app.post("/sessions/{session_id}/messages")
    def post_message(session_id: str, body: MessageBody) -> dict:
        return session_view(engine.submit_message(session_id, body.text))

    @app.post("/sessions/{session_id}/results")
    def post_result(session_id: str, body: ResultBody) -> dict:
        return session_view(engine.submit_manual_result(session_id, body.text))

    @app.post("/sessions/{session_id}/advance")
    def post_advance(session_id: str, auto: bool = False) -> dict:
        return session_view(engine.advance(session_id, auto=auto))

    if config.console_dir is not None:
        console_path = config.resolve(config.console_dir)
        if console_path.exists():
            from fastapi.staticfiles import StaticFiles

            app.mount("/ui", StaticFiles(directory=str(console_path), html=True), name="ui")
        else:
            logger.warning("console_dir %s does not exist; /ui not mounted", console_path)

    return app
