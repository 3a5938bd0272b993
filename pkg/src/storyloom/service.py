"""HTTP facade: command endpoints, role-filtered event streams, snapshots.

Bearer tokens are minted per participant at session creation. A child-role
token is accepted for exactly two commands — join and submit_answer_transcript
— and its event stream only ever carries visibility=all frames. Commands are
serialized per session by the engine's single-writer lock.
"""

from __future__ import annotations

import json
import logging
import secrets
from dataclasses import dataclass, field
from pathlib import Path

from fastapi import Body, FastAPI, Query, Request
from fastapi.responses import JSONResponse, StreamingResponse

from .characteristics import Guideline, load_guidelines
from .engine import CHILD_COMMANDS, SessionEngine, Subscription, load_snapshot, make_snapshot
from .errors import SchemaMismatch, StoryloomError, Unauthorized, UnknownSession
from .gateway import GenerationGateway, PromptTemplate, ProviderConfig
from .profile import SessionConfig

logger = logging.getLogger(__name__)

_STATUS_BY_CODE = {
    "Unauthorized": 403,
    "UnknownSession": 404,
    "UnknownQuestion": 404,
    "UnknownMaterial": 404,
    "UnknownParticipant": 404,
    "WordNotFound": 404,
    "UnknownCommand": 404,
    "SchemaMismatch": 409,
    "FairnessViolation": 409,
    "IllegalTransition": 409,
    "GuardFailed": 409,
    "WrongPhase": 409,
    "WrongStatus": 409,
    "AlreadyFilled": 409,
    "AlternationViolation": 409,
    "NotStoryteller": 409,
    "NoContributionYet": 409,
    "QuestionNotSelected": 409,
    "WrongChild": 403,
    "MissingFixture": 424,
    "ProviderError": 502,
    "GenerationUnavailable": 502,
    "MalformedOutput": 502,
}


@dataclass
class SessionRuntime:
    engine: SessionEngine
    tokens: dict[str, tuple[str, str]]  # token -> (role, participant_id)
    streams: dict[str, Subscription] = field(default_factory=dict)

    def mint_tokens(self) -> dict:
        config = self.engine.state.config
        coordinator_token = secrets.token_hex(16)
        self.tokens[coordinator_token] = ("coordinator", config.coordinator_id)
        children = {}
        for child in config.children:
            token = secrets.token_hex(16)
            self.tokens[token] = ("child", child.child_id)
            children[child.child_id] = token
        return {"coordinator": coordinator_token, "children": children}


def create_app(
    data_dir: str | Path,
    templates: dict[str, PromptTemplate],
    guidelines: list[Guideline],
    provider_config: ProviderConfig,
    transcript_path: str | Path | None = None,
    clock=None,
) -> FastAPI:
    app = FastAPI(title="storyloom", version="0.1.0")
    data_dir = Path(data_dir)
    data_dir.mkdir(parents=True, exist_ok=True)
    sessions: dict[str, SessionRuntime] = {}
    app.state.sessions = sessions

    def new_gateway() -> GenerationGateway:
        return GenerationGateway.from_config(provider_config, transcript_path=transcript_path)

    def runtime_of(session_id: str) -> SessionRuntime:
        runtime = sessions.get(session_id)
        if runtime is None:
            raise UnknownSession(f"unknown session: {session_id!r}")
        return runtime

    def authenticate(runtime: SessionRuntime, request: Request, token_param: str | None = None) -> tuple[str, str]:
        token = token_param
        header = request.headers.get("authorization", "")
        if not token and header.lower().startswith("bearer "):
            token = header[7:].strip()
        if not token or token not in runtime.tokens:
            raise Unauthorized("missing or invalid bearer token")
        return runtime.tokens[token]

    @app.exception_handler(StoryloomError)
    async def engine_error_handler(request: Request, exc: StoryloomError):
        status = _STATUS_BY_CODE.get(exc.code, 400)
        return JSONResponse(status_code=status, content={"error": exc.code, "detail": str(exc)})

    @app.post("/sessions")
    def create_session(body: dict = Body(...)):
        config = SessionConfig.from_dict(body["config"])
        session_id = body.get("session_id") or f"session-{secrets.token_hex(4)}"
        if session_id in sessions:
            raise SchemaMismatch(f"session {session_id!r} already exists")
        engine = SessionEngine.open(
            config, new_gateway(), templates, guidelines, session_id=session_id, clock=clock
        )
        runtime = SessionRuntime(engine=engine, tokens={})
        tokens = runtime.mint_tokens()
        sessions[session_id] = runtime
        return {"session_id": session_id, "version": engine.state.version, "tokens": tokens}

    @app.post("/sessions/load")
    def load_session(body: dict = Body(...)):
        state = load_snapshot(body)
        if state.session_id in sessions:
            raise SchemaMismatch(f"session {state.session_id!r} already exists")
        engine = SessionEngine(state, new_gateway(), templates, guidelines, clock=clock)
        runtime = SessionRuntime(engine=engine, tokens={})
        tokens = runtime.mint_tokens()
        sessions[state.session_id] = runtime
        return {"session_id": state.session_id, "version": engine.state.version, "tokens": tokens}

    @app.post("/sessions/{session_id}/join")
    def join(session_id: str, request: Request, body: dict = Body(...)):
        runtime = runtime_of(session_id)
        role, participant_id = authenticate(runtime, request)
        result = runtime.engine.execute(
            "join", {"participant_id": participant_id, "role": role}
        )
        # A fresh join replaces any previous stream for this participant.
        previous = runtime.streams.pop(participant_id, None)
        if previous is not None:
            runtime.engine.unsubscribe(previous)
        return {"version": result.version, "role": role, "participant_id": participant_id}

    @app.post("/sessions/{session_id}/commands/{command_name}")
    def run_command(session_id: str, command_name: str, request: Request, body: dict = Body(default={})):
        runtime = runtime_of(session_id)
        role, participant_id = authenticate(runtime, request)
        args = dict(body.get("args", body) or {})
        if role == "child":
            if command_name not in CHILD_COMMANDS:
                raise Unauthorized(f"child credentials cannot run {command_name!r}")
            if command_name == "submit_answer_transcript":
                args["child_id"] = participant_id
            if command_name == "join":
                args = {"participant_id": participant_id, "role": "child"}
        result = runtime.engine.execute(command_name, args)
        payload = {"version": result.version, "result": result.result}
        if result.warning:
            payload["warning"] = result.warning
        if result.event is not None:
            payload["event_seq"] = result.event.seq
        return payload

    @app.get("/sessions/{session_id}/events")
    def events(
        session_id: str,
        request: Request,
        since: int = Query(default=0),
        follow: bool = Query(default=True),
        timeout_s: float = Query(default=30.0),
        token: str | None = Query(default=None),
    ):
        runtime = runtime_of(session_id)
        role, participant_id = authenticate(runtime, request, token_param=token)
        subscription = runtime.engine.subscribe(role, since=since)
        runtime.streams[participant_id] = subscription

        def frame_bytes():
            try:
                for frame in subscription.drain():
                    yield f"data: {json.dumps(frame.to_dict(), ensure_ascii=False)}\n\n"
                if not follow:
                    return
                waited = 0.0
                step = 0.2
                while waited < timeout_s:
                    frame = subscription.get(timeout=step)
                    if frame is None:
                        waited += step
                        continue
                    waited = 0.0
                    yield f"data: {json.dumps(frame.to_dict(), ensure_ascii=False)}\n\n"
            finally:
                runtime.engine.unsubscribe(subscription)

        return StreamingResponse(frame_bytes(), media_type="text/event-stream")

    @app.get("/sessions/{session_id}/snapshot")
    def get_snapshot(session_id: str, request: Request):
        runtime = runtime_of(session_id)
        role, _ = authenticate(runtime, request)
        if role != "coordinator":
            raise Unauthorized("snapshots carry coordinator-only data")
        return make_snapshot(runtime.engine.snapshot())

    @app.post("/sessions/{session_id}/snapshot")
    def save_snapshot(session_id: str, request: Request):
        runtime = runtime_of(session_id)
        role, _ = authenticate(runtime, request)
        if role != "coordinator":
            raise Unauthorized("snapshots carry coordinator-only data")
        snapshot = make_snapshot(runtime.engine.snapshot())
        path = data_dir / f"{session_id}.json"
        path.write_text(json.dumps(snapshot, ensure_ascii=False, indent=2) + "\n", encoding="utf-8")
        return {"saved": str(path), "version": runtime.engine.state.version}

    return app
