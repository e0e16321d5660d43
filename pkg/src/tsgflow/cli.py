"""Command-line interface: ingest, compile, serve, chat, inspect."""

from __future__ import annotations

import json
import logging
import sys
from pathlib import Path

import click

from .compiler import compile_tsg, resolve_linkers
from .config import AppConfig, build_engine
from .errors import TsgflowError, UnknownNode
from .orchestrator import SessionState
from .service import create_app, session_view
from .store import node_to_record
from .tsg import parse_structured_tsg, validate_quality

logger = logging.getLogger(__name__)


def _fail(message: str, as_json: bool, code: int = 1):
    if as_json:
        click.echo(json.dumps({"error": message}), err=True)
    else:
        click.echo(f"error: {message}", err=True)
    sys.exit(code)


def _load_config(config_path: str | None) -> AppConfig:
    if config_path is None:
        return AppConfig()
    return AppConfig.load(config_path)


@click.group()
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--json", "as_json", is_flag=True, help="machine-readable output and errors")
@click.option("-v", "--verbose", is_flag=True)
@click.pass_context
def main(ctx: click.Context, config_path: str | None, as_json: bool, verbose: bool):
    """Incident-mitigation copilot engine."""
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.WARNING,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    ctx.ensure_object(dict)
    ctx.obj["config"] = _load_config(config_path)
    ctx.obj["json"] = as_json


@main.command()
@click.argument("paths", nargs=-1, required=True, type=click.Path(exists=True))
@click.pass_context
def ingest(ctx: click.Context, paths: tuple[str, ...]):
    """Parse, validate, compile, and persist structured TSG documents."""
    config: AppConfig = ctx.obj["config"]
    as_json: bool = ctx.obj["json"]
    try:
        engine = build_engine(config)
        results = []
        for path in paths:
            tsg = parse_structured_tsg(Path(path).read_text(encoding="utf-8"))
            report = validate_quality(tsg)
            if not report.passed:
                _fail(f"{path}: quality errors: {report.describe()}", as_json)
            engine.kb.remove_source(tsg.tsg_id)
            nodes = compile_tsg(tsg)
            engine.kb.upsert_nodes(nodes)
            results.append({"tsg_id": tsg.tsg_id, "nodes_added": len(nodes), "path": path})
        resolution = engine.kb.resolve_all()
        config.kb_path.parent.mkdir(parents=True, exist_ok=True)
        engine.kb.save(config.kb_path)
    except TsgflowError as exc:
        _fail(str(exc), as_json)
        return
    summary = {
        "ingested": results,
        "resolved_edges": len(resolution.resolved),
        "unresolved_edges": len(resolution.unresolved),
        "kb_path": str(config.kb_path),
    }
    if as_json:
        click.echo(json.dumps(summary, indent=2))
    else:
        for entry in results:
            click.echo(f"{entry['tsg_id']}: nodes_added={entry['nodes_added']}")
        click.echo(
            f"resolution: {summary['resolved_edges']} resolved, "
            f"{summary['unresolved_edges']} unresolved -> {summary['kb_path']}"
        )


@main.command("compile")
@click.argument("paths", nargs=-1, required=True, type=click.Path(exists=True))
@click.option("--report", "with_report", is_flag=True, help="print the full resolution report")
@click.pass_context
def compile_cmd(ctx: click.Context, paths: tuple[str, ...], with_report: bool):
    """Compile documents in memory and report the resolved graph (no persistence)."""
    config: AppConfig = ctx.obj["config"]
    as_json: bool = ctx.obj["json"]
    try:
        from .providers import MockProvider

        embedder = MockProvider()
        nodes = []
        for path in paths:
            tsg = parse_structured_tsg(Path(path).read_text(encoding="utf-8"))
            report = validate_quality(tsg)
            if not report.passed:
                _fail(f"{path}: quality errors: {report.describe()}", as_json)
            nodes.extend(compile_tsg(tsg))
        resolved_nodes, resolution = resolve_linkers(
            nodes, lambda text: embedder.embed(text).values, config.tau
        )
    except TsgflowError as exc:
        _fail(str(exc), as_json)
        return
    summary = {
        "nodes": len(resolved_nodes),
        "resolved_edges": len(resolution.resolved),
        "unresolved_edges": len(resolution.unresolved),
    }
    if with_report:
        summary["resolution_report"] = resolution.to_dict()
    click.echo(json.dumps(summary, indent=2))


@main.command()
@click.pass_context
def serve(ctx: click.Context):
    """Run the HTTP service."""
    import uvicorn

    config: AppConfig = ctx.obj["config"]
    engine = build_engine(config)
    app = create_app(engine, config)
    uvicorn.run(app, host=config.host, port=config.port, log_level="info")


@main.command()
@click.option("--script", "script_path", required=True, type=click.Path(exists=True))
@click.pass_context
def chat(ctx: click.Context, script_path: str):
    """Run one headless session from scripted operator turns.

    Script: {"turns": [{"kind": "message"|"result", "text": "..."}]}.
    Exits 0 only if the session ends Resolved.
    """
    config: AppConfig = ctx.obj["config"]
    as_json: bool = ctx.obj["json"]
    script = json.loads(Path(script_path).read_text(encoding="utf-8"))
    turns = list(script.get("turns", []))
    try:
        engine = build_engine(config)
        session = engine.start_session()
        sid = session.session_id
        for turn in turns:
            if session.state in (SessionState.AWAITING_MESSAGE, SessionState.CLARIFYING):
                if turn["kind"] != "message":
                    _fail(f"state {session.state.value} needs a message turn", as_json)
            elif session.state is SessionState.AWAITING_MANUAL_RESULT:
                if turn["kind"] != "result":
                    _fail(f"state {session.state.value} needs a result turn", as_json)
            else:
                break
            if turn["kind"] == "message":
                session = engine.submit_message(sid, turn["text"])
            else:
                session = engine.submit_manual_result(sid, turn["text"])
            while session.state in (SessionState.RETRIEVING, SessionState.PLANNING,
                                    SessionState.EXECUTING_AUTO):
                session = engine.advance(sid, auto=True)
    except TsgflowError as exc:
        _fail(str(exc), as_json)
        return
    view = session_view(session)
    if as_json:
        click.echo(json.dumps(view, indent=2))
    else:
        for entry in view["transcript"]:
            click.echo(f"{entry['role']}: {entry['text']}")
        click.echo(f"final state: {view['state']}")
    sys.exit(0 if session.state is SessionState.RESOLVED else 1)


@main.group()
def inspect():
    """Inspect the persisted knowledge base."""


@inspect.command("graph")
@click.option("--dot", "as_dot", is_flag=True, help="emit DOT instead of JSON")
@click.pass_context
def inspect_graph(ctx: click.Context, as_dot: bool):
    config: AppConfig = ctx.obj["config"]
    try:
        engine = build_engine(config)
    except TsgflowError as exc:
        _fail(str(exc), ctx.obj["json"])
        return
    if as_dot:
        click.echo(engine.kb.to_dot(), nl=False)
    else:
        click.echo(json.dumps(engine.kb.graph_export(), indent=2))


@inspect.command("node")
@click.argument("node_id")
@click.pass_context
def inspect_node(ctx: click.Context, node_id: str):
    config: AppConfig = ctx.obj["config"]
    as_json: bool = ctx.obj["json"]
    try:
        engine = build_engine(config)
        node = engine.kb.node(node_id)
        neighbors = engine.kb.neighbors(node_id)
    except UnknownNode as exc:
        _fail(str(exc), as_json, code=2)
        return
    except TsgflowError as exc:
        _fail(str(exc), as_json)
        return
    click.echo(
        json.dumps(
            {
                "node": node_to_record(node),
                "neighbors": [
                    {
                        "outcome_label": linker.outcome_label,
                        "target": node_to_record(target) if target else None,
                        "target_intent": linker.target_intent,
                    }
                    for linker, target in neighbors
                ],
            },
            indent=2,
        )
    )


if __name__ == "__main__":
    main()
