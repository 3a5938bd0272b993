"""Desk-scale runners: a scripted session executor and the HTTP server.

``storyloom run`` executes a whole session script in-process against the
replay (or record) gateway and writes storybook.json, storybook.txt,
events.json, report.json, and report.txt. The exit status is 0 only when
every invariant check passes; failures name the violated invariant. Two runs
of the same script and transcript are byte-identical.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import storyloom

from .analytics import render_report_text
from .characteristics import load_guidelines
from .engine import _HANDLERS, SessionEngine
from .errors import InvariantFailure, MissingFixture, ScriptParseError, StoryloomError
from .gateway import GenerationGateway, GenerationTranscript, ProviderConfig, load_templates
from .profile import SessionConfig
from .scripted import ScriptedProvider
from .story import render_storybook_text

EXIT_OK = 0
EXIT_INVARIANT = 1
EXIT_PARSE = 2
EXIT_FIXTURE = 4


def _parse_script(path: Path) -> dict:
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ScriptParseError(f"cannot read script {path}: {exc}") from exc
    if "config" not in raw or "actions" not in raw:
        raise ScriptParseError("script needs 'config' and 'actions' blocks")
    try:
        config = SessionConfig.from_dict(raw["config"])
    except (KeyError, StoryloomError) as exc:
        raise ScriptParseError(f"bad config block: {exc}") from exc

    declared = set(config.child_ids()) | {config.coordinator_id}
    for i, action in enumerate(raw["actions"]):
        if not isinstance(action, dict) or "command" not in action:
            raise ScriptParseError(f"action {i} has no command")
        command = action["command"]
        if command not in _HANDLERS and command != "select_next":
            raise ScriptParseError(f"action {i}: unknown command {command!r}")
        args = action.get("args", {})
        for key in ("child_id", "participant_id", "filled_by", "storyteller"):
            value = args.get(key)
            if value is not None and value not in declared:
                raise ScriptParseError(f"action {i}: undeclared participant {value!r}")
    return raw


def _run_actions(engine: SessionEngine, actions: list[dict]) -> None:
    for i, action in enumerate(actions):
        command = action["command"]
        args = dict(action.get("args", {}))
        try:
            if command == "select_next":
                # Convenience: select the given question for whoever the
                # allocator picks; the script stays override-free.
                engine.execute("select_question", {"question_id": args["question_id"]})
            else:
                engine.execute(command, args)
        except MissingFixture:
            raise
        except StoryloomError as exc:
            raise InvariantFailure(exc.code, f"action {i} ({command}): {exc}") from exc


def _check_invariants(engine: SessionEngine, child_frames: dict[str, list]) -> list[str]:
    """Post-run invariant sweep; returns the names of violated invariants."""
    failures: list[str] = []
    state = engine.state

    seqs = [e.seq for e in state.event_log]
    if seqs != list(range(1, len(seqs) + 1)):
        failures.append("EventLogGapFree")

    replayed = SessionEngine.replay(state.event_log)
    if replayed.state.to_dict() != state.to_dict():
        failures.append("EventReplayDeterminism")

    try:
        book = engine.storybook()
    except StoryloomError:
        book = None
    if book is not None:
        for i in range(len(book.paragraphs) - 1):
            if book.paragraphs[i].language == book.paragraphs[i + 1].language:
                failures.append("StorybookAlternation")
                break
        from .story import build_storybook, find_word

        words = state.config.target_words
        if words is not None:
            for language, word in words.all_words():
                if not any(
                    p.language == language and find_word(p.text, word, language)
                    for p in book.paragraphs
                ):
                    failures.append("StorybookTargetWordCoverage")
                    break
        framework = state.frameworks.get(state.active_framework_id or "")
        rebuilt = build_storybook(framework, words, tuple(state.provenance))
        if rebuilt.to_dict() != book.to_dict():
            failures.append("ProvenanceReplay")

    if not state.ledger.overrides:
        counts = [state.ledger.questions_selected.get(c, 0) for c in state.child_ids()]
        if abs(counts[0] - counts[1]) > 1:
            failures.append("AbsoluteFairness")
    assigned = [state.ledger.blanks_assigned.get(c, 0) for c in state.child_ids()]
    if assigned and abs(assigned[0] - assigned[1]) > 1:
        failures.append("BlankFairness")

    for child_id, frames in child_frames.items():
        if any(frame.event.visibility != "all" for frame in frames):
            failures.append("ChildStreamVisibility")
            break

    return failures


def run_script(script_path: str, transcript_path: str, out_dir: str, mode: str = "replay", check_only: bool = False) -> int:
    try:
        script = _parse_script(Path(script_path))
    except ScriptParseError as exc:
        print(f"ScriptParseError: {exc}", file=sys.stderr)
        return EXIT_PARSE
    if check_only:
        print(f"script ok: {len(script['actions'])} actions")
        return EXIT_OK

    config = SessionConfig.from_dict(script["config"])
    transcript_file = Path(transcript_path)
    if mode == "replay":
        try:
            transcript = GenerationTranscript.load(transcript_file)
        except (OSError, json.JSONDecodeError) as exc:
            print(f"MissingFixture: cannot load transcript {transcript_file}: {exc}", file=sys.stderr)
            return EXIT_FIXTURE
        gateway = GenerationGateway("replay", transcript=transcript)
    else:
        gateway = GenerationGateway(
            "record", provider=ScriptedProvider(), transcript_path=transcript_file
        )

    templates = load_templates(storyloom.default_templates_dir())
    guidelines = load_guidelines(storyloom.default_guidelines_dir())
    engine = SessionEngine.open(
        config, gateway, templates, guidelines, session_id=script.get("session_id", "session-1")
    )
    child_subs = {c: engine.subscribe("child") for c in config.child_ids()}

    try:
        _run_actions(engine, script["actions"])
    except MissingFixture as exc:
        print(f"MissingFixture: {exc}", file=sys.stderr)
        return EXIT_FIXTURE
    except InvariantFailure as exc:
        print(f"InvariantFailure: {exc}", file=sys.stderr)
        return EXIT_INVARIANT

    child_frames = {c: sub.drain() for c, sub in child_subs.items()}
    failures = _check_invariants(engine, child_frames)

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    state = engine.state

    def dump(name: str, payload) -> None:
        (out / name).write_text(
            json.dumps(payload, ensure_ascii=False, indent=2) + "\n", encoding="utf-8"
        )

    try:
        book = engine.storybook()
    except StoryloomError:
        book = None
    dump("storybook.json", book.to_dict() if book else None)
    (out / "storybook.txt").write_text(
        render_storybook_text(book) if book else "", encoding="utf-8"
    )
    dump("events.json", {"session_id": state.session_id, "events": [e.to_dict() for e in state.event_log]})
    dump("report.json", state.report.to_dict() if state.report else None)
    names = {c.child_id: c.display_name for c in state.config.children}
    (out / "report.txt").write_text(
        render_report_text(state.report, names) if state.report else "", encoding="utf-8"
    )

    if failures:
        print(f"InvariantFailure: {failures[0]}", file=sys.stderr)
        return EXIT_INVARIANT
    print(f"ok: {len(state.event_log)} events, outputs in {out}")
    return EXIT_OK


def serve(args) -> int:
    import uvicorn

    from .service import create_app

    templates_dir = args.templates_dir or storyloom.default_templates_dir()
    guidelines_dir = args.guidelines_dir or storyloom.default_guidelines_dir()
    provider = ProviderConfig.from_file(args.provider_config)
    app = create_app(
        data_dir=args.data_dir,
        templates=load_templates(templates_dir),
        guidelines=load_guidelines(guidelines_dir),
        provider_config=provider,
        transcript_path=args.transcript,
    )
    host, _, port = args.listen_addr.partition(":")
    uvicorn.run(app, host=host or "127.0.0.1", port=int(port or 8000))
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="storyloom")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    run_parser = sub.add_parser("run", help="execute a session script against the in-process engine")
    run_parser.add_argument("--script", required=True, help="session script (JSON)")
    run_parser.add_argument("--transcript", required=True, help="generation transcript (JSON)")
    run_parser.add_argument("--out", required=True, help="output directory")
    run_parser.add_argument("--check-only", action="store_true", help="parse and validate without running")
    run_parser.add_argument(
        "--mode",
        choices=("replay", "record"),
        default="replay",
        help="replay reads the transcript; record writes it using the offline scripted provider",
    )

    serve_parser = sub.add_parser("serve", help="serve the HTTP API")
    serve_parser.add_argument("--data-dir", required=True, help="snapshot directory")
    serve_parser.add_argument("--templates-dir", default=None)
    serve_parser.add_argument("--guidelines-dir", default=None)
    serve_parser.add_argument("--provider-config", default=None)
    serve_parser.add_argument("--transcript", default=None, help="transcript file for record/replay modes")
    serve_parser.add_argument("--listen-addr", default="127.0.0.1:8000")

    args = parser.parse_args(argv)
    if args.subcommand == "run":
        return run_script(args.script, args.transcript, args.out, mode=args.mode, check_only=args.check_only)
    return serve(args)


if __name__ == "__main__":
    sys.exit(main())
