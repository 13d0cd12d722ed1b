"""HTTP service exposing diagnosis sessions to programmatic clients.

Endpoints (see docs/http_api.md):
  POST /sessions                start a diagnosis, returns the session id
  GET  /sessions/{id}           status view with trace cursor
  GET  /sessions/{id}/trace     NDJSON event stream (held connection with
                                heartbeat comment lines) or long-poll
  POST /sessions/{id}/feedback  answer an exploration round (409 outside
                                the awaiting state)
  GET  /sessions/{id}/ticket    escalation ticket when one was produced
  GET  /taxonomy                the published tree

Sessions are in-memory only; restarts drop them.
"""
from __future__ import annotations

import threading
import uuid
from dataclasses import dataclass, field
from pathlib import Path

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse, StreamingResponse

from .corpus import EmbeddingProvider, IncidentRecord, IncidentStore, KnowledgeBase
from .engine import DiagnosisSession, Engine, EngineConfig, Feedback, QueueFeedback
from .gateway import Gateway, ReplayBackend
from .taxonomy import Taxonomy
from .util import LogicalClock
from .verify import ScriptRegistry, SimulatedEnvironment

HEARTBEAT_SECONDS = 5.0


@dataclass
class ServiceResources:
    taxonomy: Taxonomy
    registry: ScriptRegistry
    store: IncidentStore
    kb: KnowledgeBase
    provider: EmbeddingProvider
    fixtures_dir: Path | None = None
    feedback_rounds: int = 3
    engine_config: EngineConfig = field(default_factory=EngineConfig)


class SessionHandle:
    def __init__(self, session: DiagnosisSession, feedback: QueueFeedback):
        self.session = session
        self.feedback = feedback
        self.lines: list[str] = []
        self.cond = threading.Condition()
        self.finished = False
        session.listeners.append(self._on_event)

    def _on_event(self, event):
        with self.cond:
            self.lines.append(event.to_json_line())
            self.cond.notify_all()

    def mark_finished(self):
        with self.cond:
            self.finished = True
            self.cond.notify_all()

    def status(self) -> str:
        if self.finished:
            return "finished"
        return self.session.status  # "running" | "awaiting_feedback"


def _error(status: int, code: str, message: str) -> JSONResponse:
    return JSONResponse(status_code=status, content={"error": {"code": code, "message": message}})


def create_app(resources: ServiceResources) -> FastAPI:
    app = FastAPI(title="infradiag", version="0.1.0")
    sessions: dict[str, SessionHandle] = {}
    lock = threading.Lock()

    def resolve_fixture(relative: str) -> Path:
        if resources.fixtures_dir is None:
            raise ValueError("service started without --fixtures-dir; per-session paths disabled")
        path = (resources.fixtures_dir / relative).resolve()
        if not str(path).startswith(str(resources.fixtures_dir)):
            raise ValueError("fixture path escapes the fixtures directory")
        if not path.exists():
            raise FileNotFoundError(f"no such fixture: {relative}")
        return path

    @app.post("/sessions", status_code=201)
    async def start_session(request: Request):
        body = await request.json()
        try:
            incident_raw = dict(body["incident"])
            incident_raw.setdefault("id", f"WEB-{uuid.uuid4().hex[:8]}")
            incident_raw.setdefault("created_at", "2024-01-01T00:00:00Z")
            incident = IncidentRecord.from_json(incident_raw)
            scenario = resolve_fixture(body["scenario"]) if body.get("scenario") else None
            replay = resolve_fixture(body["replay"]) if body.get("replay") else None
            rounds = int(body.get("feedback_rounds", resources.feedback_rounds))
        except (KeyError, TypeError, ValueError, FileNotFoundError) as exc:
            return _error(400, "bad_request", str(exc))
        if replay is None:
            return _error(400, "bad_request", "a replay script is required (live mode is CLI-only)")

        env = SimulatedEnvironment.from_file(scenario) if scenario else SimulatedEnvironment()
        gateway = Gateway(ReplayBackend.from_file(replay), clock=LogicalClock())
        engine = Engine(
            taxonomy=resources.taxonomy,
            store=resources.store,
            registry=resources.registry,
            kb=resources.kb,
            gateway=gateway,
            env=env,
            provider=resources.provider,
            config=resources.engine_config,
        )
        feedback = QueueFeedback(max_rounds=rounds)
        session = DiagnosisSession(incident, gateway.clock)
        handle = SessionHandle(session, feedback)

        def run():
            try:
                engine.diagnose(incident, feedback, session=session)
            finally:
                handle.mark_finished()

        with lock:
            sessions[session.id] = handle
        threading.Thread(target=run, daemon=True).start()
        return {"id": session.id}

    def get_handle(session_id: str) -> SessionHandle | None:
        with lock:
            return sessions.get(session_id)

    @app.get("/sessions/{session_id}")
    def session_view(session_id: str):
        handle = get_handle(session_id)
        if handle is None:
            return _error(404, "unknown_session", session_id)
        outcome = handle.session.outcome
        view = {
            "id": session_id,
            "status": handle.status(),
            "trace_cursor": len(handle.lines),
        }
        if handle.finished and outcome is not None:
            view["outcome"] = {
                "status": outcome.status,
                "resolving_pipeline": outcome.resolving_pipeline,
                "root_causes": [str(p) for p in outcome.root_causes],
                "suggestions": outcome.suggestions,
                "report": handle.session.report,
            }
        return view

    @app.get("/sessions/{session_id}/trace")
    def session_trace(session_id: str, cursor: int = 0, stream: int = 1, wait: float = 30.0):
        handle = get_handle(session_id)
        if handle is None:
            return _error(404, "unknown_session", session_id)

        if not stream:
            # long-poll fallback: block until something past the cursor exists
            with handle.cond:
                if cursor >= len(handle.lines) and not handle.finished:
                    handle.cond.wait(timeout=wait)
                chunk = handle.lines[cursor:]
                done = handle.finished
            return {"events": chunk, "cursor": cursor + len(chunk), "finished": done}

        def generate():
            # never yield while holding the lock: a slow reader must not be
            # able to block the session thread's event appends
            position = cursor
            while True:
                with handle.cond:
                    if position >= len(handle.lines) and not handle.finished:
                        handle.cond.wait(timeout=HEARTBEAT_SECONDS)
                    chunk = handle.lines[position:]
                    finished = handle.finished
                for line in chunk:
                    yield line + "\n"
                position += len(chunk)
                if finished:
                    return  # finished implies the line buffer is complete
                if not chunk:
                    yield ": heartbeat\n"

        return StreamingResponse(generate(), media_type="application/x-ndjson")

    @app.post("/sessions/{session_id}/feedback", status_code=202)
    def session_feedback(session_id: str, body: dict):
        handle = get_handle(session_id)
        if handle is None:
            return _error(404, "unknown_session", session_id)
        if handle.status() != "awaiting_feedback":
            return _error(409, "not_awaiting_feedback", f"session is {handle.status()}")
        action = body.get("action")
        if action not in (Feedback.ACCEPT, Feedback.DECLINE, Feedback.TEXT):
            return _error(400, "bad_request", f"unknown action {action!r}")
        handle.feedback.submit(Feedback(kind=action, text=body.get("text")))
        return {"status": "accepted"}

    @app.get("/sessions/{session_id}/ticket")
    def session_ticket(session_id: str):
        handle = get_handle(session_id)
        if handle is None:
            return _error(404, "unknown_session", session_id)
        if not handle.finished:
            return _error(409, "not_finished", "session still running")
        if handle.session.ticket is None:
            return _error(404, "no_ticket", "session did not escalate")
        return handle.session.ticket.to_json()

    @app.get("/taxonomy")
    def taxonomy_view():
        return resources.taxonomy.to_document()

    return app
