from __future__ import annotations

import json
import threading

import pytest
from fastapi.testclient import TestClient

import storyloom
from storyloom import characteristics, gateway
from storyloom.service import create_app

from .driver import make_config

_TEMPLATES = gateway.load_templates(storyloom.default_templates_dir())
_GUIDELINES = characteristics.load_guidelines(storyloom.default_guidelines_dir())


@pytest.fixture
def client(tmp_path):
    app = create_app(
        data_dir=tmp_path / "data",
        templates=_TEMPLATES,
        guidelines=_GUIDELINES,
        provider_config=gateway.ProviderConfig(endpoint="scripted://test", mode="live"),
    )
    with TestClient(app) as test_client:
        yield test_client


def open_session(client):
    response = client.post("/sessions", json={"config": make_config().to_dict(), "session_id": "s-1"})
    assert response.status_code == 200, response.text
    return response.json()


def auth(token):
    return {"Authorization": f"Bearer {token}"}


def collect_frames(client, session_id, token, since=0):
    frames = []
    with client.stream(
        "GET", f"/sessions/{session_id}/events", params={"since": since, "follow": False, "token": token}
    ) as response:
        assert response.status_code == 200
        for line in response.iter_lines():
            if line.startswith("data: "):
                frames.append(json.loads(line[len("data: "):]))
    return frames


def test_create_and_join(client):
    created = open_session(client)
    assert created["version"] == 1
    tokens = created["tokens"]
    response = client.post("/sessions/s-1/join", headers=auth(tokens["coordinator"]), json={})
    assert response.status_code == 200
    assert response.json()["role"] == "coordinator"
    response = client.post("/sessions/s-1/join", headers=auth(tokens["children"]["lisa"]), json={})
    assert response.json() == {"version": 3, "role": "child", "participant_id": "lisa"}


def test_commands_require_tokens(client):
    open_session(client)
    response = client.post("/sessions/s-1/commands/advance_phase", json={"args": {"target": "Framework"}})
    assert response.status_code == 403
    assert response.json()["error"] == "Unauthorized"


def test_child_tokens_accept_exactly_join_and_answer(client):
    created = open_session(client)
    child_token = created["tokens"]["children"]["lisa"]
    blocked = [
        ("advance_phase", {"target": "Framework"}),
        ("set_target_words", {"words_by_language": {"zh": ["猫"], "en": ["cat"]}}),
        ("generate_framework", {}),
        ("select_question", {"question_id": "q-0001"}),
        ("build_report", {}),
        ("fill_blank", {"blank_index": 1, "answer_text": "x", "filled_by": "lisa"}),
    ]
    for command, args in blocked:
        response = client.post(
            f"/sessions/s-1/commands/{command}", headers=auth(child_token), json={"args": args}
        )
        assert response.status_code == 403, command
        assert response.json()["error"] == "Unauthorized"
    response = client.post("/sessions/s-1/commands/join", headers=auth(child_token), json={})
    assert response.status_code == 200


def test_unknown_session_is_404(client):
    response = client.post("/sessions/nope/join", headers=auth("x"), json={})
    assert response.status_code == 404


def test_engine_errors_surface_with_code(client):
    created = open_session(client)
    coordinator = created["tokens"]["coordinator"]
    response = client.post(
        "/sessions/s-1/commands/advance_phase",
        headers=auth(coordinator),
        json={"args": {"target": "Cloze"}},
    )
    assert response.status_code == 409
    assert response.json()["error"] == "IllegalTransition"


def run_zoo_prefix(client, tokens):
    coordinator = auth(tokens["coordinator"])

    def command(name, args):
        response = client.post(f"/sessions/s-1/commands/{name}", headers=coordinator, json={"args": args})
        assert response.status_code == 200, f"{name}: {response.text}"
        return response.json()

    client.post("/sessions/s-1/join", headers=coordinator, json={})
    client.post("/sessions/s-1/join", headers=auth(tokens["children"]["lisa"]), json={})
    client.post("/sessions/s-1/join", headers=auth(tokens["children"]["lele"]), json={})
    command("set_target_words", {"words_by_language": {"zh": ["老虎", "狮子"], "en": ["zoo", "dog"]}})
    command("advance_phase", {"target": "Framework"})
    command("generate_framework", {})
    command("confirm_framework", {})
    command("create_cloze", {})
    command("advance_phase", {"target": "Cloze"})
    generated = command("generate_cloze_questions", {"blank_index": 1})
    qid = generated["result"]["question_ids"][0]
    command("select_question", {"question_id": qid})
    return qid


def test_child_stream_filters_coordinator_only_frames(client):
    created = open_session(client)
    tokens = created["tokens"]
    qid = run_zoo_prefix(client, tokens)

    child_frames = collect_frames(client, "s-1", tokens["children"]["lisa"])
    assert child_frames, "child stream should carry shared events"
    assert all(f["event"]["visibility"] == "all" for f in child_frames)
    assert [f["seq"] for f in child_frames] == list(range(1, len(child_frames) + 1))
    selected = [f for f in child_frames if f["event"]["kind"] == "question_selected"]
    assert len(selected) == 1
    assert selected[0]["event"]["payload"]["question_id"] == qid

    coordinator_frames = collect_frames(client, "s-1", tokens["coordinator"])
    assert any(f["event"]["visibility"] == "coordinator_only" for f in coordinator_frames)
    # Resume from a later global seq: only newer events arrive.
    last_seq = coordinator_frames[4]["event"]["seq"]
    resumed = collect_frames(client, "s-1", tokens["coordinator"], since=last_seq)
    assert resumed[0]["event"]["seq"] == last_seq + 1


def test_child_answer_binds_to_token_identity(client):
    created = open_session(client)
    tokens = created["tokens"]
    qid = run_zoo_prefix(client, tokens)
    target = None
    frames = collect_frames(client, "s-1", tokens["coordinator"])
    for frame in frames:
        if frame["event"]["kind"] == "question_selected":
            target = frame["event"]["payload"]["target_child"]
    other = "lele" if target == "lisa" else "lisa"
    # The wrong child cannot spoof an answer: child_id comes from the token.
    response = client.post(
        "/sessions/s-1/commands/submit_answer_transcript",
        headers=auth(tokens["children"][other]),
        json={"args": {"question_id": qid, "transcript": "um me me me", "child_id": target}},
    )
    assert response.status_code == 403
    assert response.json()["error"] == "WrongChild"
    response = client.post(
        "/sessions/s-1/commands/submit_answer_transcript",
        headers=auth(tokens["children"][target]),
        json={"args": {"question_id": qid, "transcript": "um the answer"}},
    )
    assert response.status_code == 200


def test_snapshot_round_trip_and_schema_gate(client, tmp_path):
    created = open_session(client)
    tokens = created["tokens"]
    run_zoo_prefix(client, tokens)
    coordinator = auth(tokens["coordinator"])

    snapshot = client.get("/sessions/s-1/snapshot", headers=coordinator).json()
    saved = client.post("/sessions/s-1/snapshot", headers=coordinator)
    assert saved.status_code == 200

    # A child credential cannot pull the full snapshot.
    denied = client.get("/sessions/s-1/snapshot", headers=auth(tokens["children"]["lisa"]))
    assert denied.status_code == 403

    snapshot["state"]["session_id"] = "s-2"
    loaded = client.post("/sessions/load", json=snapshot)
    assert loaded.status_code == 200
    token2 = loaded.json()["tokens"]["coordinator"]
    reloaded = client.get("/sessions/s-2/snapshot", headers=auth(token2)).json()
    assert reloaded["state"]["version"] == snapshot["state"]["version"]
    assert reloaded["state"]["event_log"] == snapshot["state"]["event_log"]

    snapshot["schema_version"] = 999
    rejected = client.post("/sessions/load", json=snapshot)
    assert rejected.status_code == 409
    assert rejected.json()["error"] == "SchemaMismatch"


def test_concurrent_commands_are_linearized(client):
    created = open_session(client)
    tokens = created["tokens"]
    coordinator = auth(tokens["coordinator"])
    results = []

    def upsert():
        profile_dict = make_config().children[0].to_dict()
        response = client.post(
            "/sessions/s-1/commands/upsert_profile", headers=coordinator, json={"args": {"profile": profile_dict}}
        )
        results.append(response.json()["version"])

    threads = [threading.Thread(target=upsert) for _ in range(6)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert sorted(results) == list(range(2, 8))  # each command bumped by exactly 1
