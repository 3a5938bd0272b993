from __future__ import annotations

import random

import pytest

from storyloom.engine import SessionEngine, load_snapshot, make_snapshot
from storyloom.errors import (
    AlreadyFilled,
    FairnessViolation,
    GatewayCannotCode,
    GuardFailed,
    IllegalTransition,
    NoContributionYet,
    NotStoryteller,
    OutOfRange,
    QuestionNotSelected,
    SchemaMismatch,
    UnknownMaterial,
    UnknownParticipant,
    UnknownQuestion,
    WrongChild,
    WrongPhase,
)
from storyloom.session import PHASES, next_respondent

from . import driver


# --- opening and joining ----------------------------------------------------------


def test_open_session_starts_in_preparation():
    engine = driver.make_engine()
    assert engine.state.phase == "Preparation"
    assert engine.state.version == 1
    assert engine.state.event_log[0].kind == "session_opened"


def test_three_joins_land_on_seq_2_to_4():
    engine = driver.make_engine()
    driver.join_all(engine)
    join_events = [e for e in engine.state.event_log if e.kind == "participant_joined"]
    assert len(join_events) == 3
    assert [e.seq for e in join_events] == [2, 3, 4]


def test_join_by_unlisted_child_rejected():
    engine = driver.make_engine()
    with pytest.raises(UnknownParticipant):
        engine.execute("join", {"participant_id": "intruder", "role": "child"})


def test_version_increments_by_one_per_command():
    engine = driver.make_engine()
    before = engine.state.version
    engine.execute("join", {"participant_id": "teacher-1", "role": "coordinator"})
    assert engine.state.version == before + 1


# --- profile and words through the engine ---------------------------------------------


def test_upsert_profile_bumps_version():
    engine = driver.make_engine()
    profile_dict = engine.state.config.children[0].to_dict()
    result = engine.execute("upsert_profile", {"profile": profile_dict})
    assert result.result["version"] == 2
    assert engine.state.config.children[0].version == 2


def test_set_target_words_outside_preparation_is_wrong_phase():
    engine = driver.make_engine()
    driver.to_framework(engine)
    with pytest.raises(WrongPhase):
        driver.set_zoo_words(engine)


# --- phase machine negatives --------------------------------------------------------------


def test_every_non_successor_transition_is_illegal():
    engine = driver.make_engine()
    driver.join_all(engine)
    driver.set_zoo_words(engine)
    for target in PHASES:
        if target == "Framework":
            continue  # the only legal successor of Preparation
        with pytest.raises(IllegalTransition):
            engine.execute("advance_phase", {"target": target})
    assert engine.state.phase == "Preparation"


def test_skipping_adaptation_is_illegal():
    engine = driver.make_engine()
    driver.to_cloze(engine)
    with pytest.raises(IllegalTransition):
        engine.execute("advance_phase", {"target": "Extension"})


def test_framework_guard_requires_target_words():
    engine = driver.make_engine()
    driver.join_all(engine)
    with pytest.raises(GuardFailed):
        engine.execute("advance_phase", {"target": "Framework"})


def test_cloze_guard_requires_confirmed_framework():
    engine = driver.make_engine()
    driver.to_framework(engine)
    engine.execute("generate_framework", {})
    with pytest.raises(GuardFailed) as exc_info:
        engine.execute("advance_phase", {"target": "Cloze"})
    assert "not confirmed" in str(exc_info.value)


def test_adaptation_guard_requires_completed_cloze():
    engine = driver.make_engine()
    driver.to_cloze(engine)
    with pytest.raises(GuardFailed):
        engine.execute("advance_phase", {"target": "Adaptation"})


def test_generation_commands_respect_phase():
    engine = driver.make_engine()
    driver.join_all(engine)
    driver.set_zoo_words(engine)
    with pytest.raises(WrongPhase):
        engine.execute("generate_framework", {})
    with pytest.raises(WrongPhase):
        engine.execute("fill_blank", {"blank_index": 1, "answer_text": "x", "filled_by": "lisa"})
    with pytest.raises(WrongPhase):
        engine.execute("apply_adaptation_edit", {"paragraph_index": 0, "new_text": "x"})
    with pytest.raises(WrongPhase):
        engine.execute("record_utterance", {"child_id": "lisa", "text": "x"})
    with pytest.raises(WrongPhase):
        engine.execute("build_report", {})


# --- roles ------------------------------------------------------------------------------


def test_default_storyteller_is_blank_one_child():
    engine = driver.make_engine()
    driver.to_extension(engine)
    first_blank = engine.state.cloze.blanks[0]
    assert engine.state.roles.storyteller == first_blank.assigned_child
    assert engine.state.roles.round == 0


def test_storyteller_override_on_advance():
    engine = driver.make_engine()
    driver.to_adaptation(engine)
    engine.execute("advance_phase", {"target": "Extension", "storyteller": "lele"})
    assert engine.state.roles.storyteller == "lele"


def test_rotation_swaps_and_increments():
    engine = driver.make_engine()
    driver.to_extension(engine)
    teller0 = engine.state.roles.storyteller
    listener0 = engine.state.roles.storylistener
    text = "他们又出发了。" if engine.state.config.child(teller0).learning_language == "zh" else "Off they went again."
    engine.execute("append_extension", {"child_id": teller0, "text": text})
    engine.execute("rotate_roles", {})
    assert engine.state.roles.storyteller == listener0
    assert engine.state.roles.round == 1
    # Rotate twice: back to the original teller.
    teller1 = engine.state.roles.storyteller
    text1 = "他们又出发了。" if engine.state.config.child(teller1).learning_language == "zh" else "Off they went again."
    engine.execute("append_extension", {"child_id": teller1, "text": text1})
    engine.execute("rotate_roles", {})
    assert engine.state.roles.storyteller == teller0
    assert engine.state.roles.round == 2


def test_rotate_before_any_append_is_rejected():
    engine = driver.make_engine()
    driver.to_extension(engine)
    with pytest.raises(NoContributionYet):
        engine.execute("rotate_roles", {})


def test_append_by_listener_rejected():
    engine = driver.make_engine()
    driver.to_extension(engine)
    listener = engine.state.roles.storylistener
    with pytest.raises(NotStoryteller):
        engine.execute("append_extension", {"child_id": listener, "text": "mine!"})


def test_utterance_by_listener_rejected():
    engine = driver.make_engine()
    driver.to_extension(engine)
    with pytest.raises(NotStoryteller):
        engine.execute("record_utterance", {"child_id": engine.state.roles.storylistener, "text": "hi"})


# --- allocator --------------------------------------------------------------------------


def test_next_respondent_prefers_lower_count():
    engine = driver.make_engine()
    state = engine.state
    state.ledger.questions_selected = {"lisa": 3, "lele": 2}
    assert next_respondent(state) == "lele"


def test_next_respondent_tie_breaks_to_less_recent():
    engine = driver.make_engine()
    state = engine.state
    state.ledger.questions_selected = {"lisa": 2, "lele": 2}
    state.ledger.last_selected_seq = {"lisa": 40, "lele": 31}
    assert next_respondent(state) == "lele"
    state.ledger.last_selected_seq = {"lisa": 31, "lele": 40}
    assert next_respondent(state) == "lisa"


def test_fresh_session_defaults_to_blank_one_child():
    engine = driver.make_engine()
    driver.to_cloze(engine)
    assert engine.next_respondent() == engine.state.cloze.blanks[0].assigned_child


def test_selecting_for_wrong_child_without_override_is_fairness_violation():
    engine = driver.make_engine()
    driver.to_cloze(engine)
    blanks = engine.state.cloze.blanks
    driver.answer_blank(engine, blanks[0])
    # Another question for the same child who just answered:
    result = engine.execute("generate_cloze_questions", {"blank_index": blanks[2].blank_index})
    qid = result.result["question_ids"][0]
    assert engine.state.questions[qid].spec.target_child == blanks[0].assigned_child
    with pytest.raises(FairnessViolation):
        engine.execute("select_question", {"question_id": qid})
    # With the override flag the selection goes through and is ledgered.
    engine.execute("select_question", {"question_id": qid, "override": True})
    assert len(engine.state.ledger.overrides) == 1
    assert engine.state.ledger.overrides[0]["child_id"] == blanks[0].assigned_child


def test_fairness_holds_without_overrides():
    engine = driver.make_engine()
    driver.to_cloze(engine)
    driver.complete_cloze(engine)
    counts = engine.state.ledger.questions_selected
    assert abs(counts.get("lisa", 0) - counts.get("lele", 0)) <= 1
    assert engine.state.ledger.overrides == []


# --- question/response lifecycle ------------------------------------------------------------


def test_select_unknown_question():
    engine = driver.make_engine()
    with pytest.raises(UnknownQuestion):
        engine.execute("select_question", {"question_id": "q-9999"})


def test_selected_event_carries_panel_payload():
    engine = driver.make_engine()
    driver.to_cloze(engine)
    blank = engine.state.cloze.blanks[0]
    result = engine.execute("generate_cloze_questions", {"blank_index": blank.blank_index})
    qid = result.result["question_ids"][0]
    selected = engine.execute("select_question", {"question_id": qid})
    payload = selected.event.payload
    assert payload["target_name"] in ("Lisa", "Lele")
    assert payload["anchor_kind"] == "blank"
    assert payload["anchor_value"] == blank.blank_index
    assert selected.event.visibility == "all"
    assert payload["text"] == engine.state.questions[qid].text


def test_record_response_requires_selection_and_right_child():
    engine = driver.make_engine()
    driver.to_cloze(engine)
    blank = engine.state.cloze.blanks[0]
    result = engine.execute("generate_cloze_questions", {"blank_index": blank.blank_index})
    qid = result.result["question_ids"][0]
    with pytest.raises(QuestionNotSelected):
        engine.execute("record_response", {"question_id": qid, "child_id": blank.assigned_child, "transcript": "x"})
    engine.execute("select_question", {"question_id": qid})
    other = "lele" if blank.assigned_child == "lisa" else "lisa"
    with pytest.raises(WrongChild):
        engine.execute("record_response", {"question_id": qid, "child_id": other, "transcript": "x"})
    result = engine.execute(
        "record_response", {"question_id": qid, "child_id": blank.assigned_child, "transcript": ""}
    )
    assert result.result["tokens"] == 0  # empty transcript still counts as answered
    assert engine.state.questions[qid].status == "answered"


def test_fill_blank_twice_rejected():
    engine = driver.make_engine()
    driver.to_cloze(engine)
    blank = engine.state.cloze.blanks[0]
    driver.answer_blank(engine, blank)
    with pytest.raises(AlreadyFilled):
        engine.execute(
            "fill_blank",
            {"blank_index": blank.blank_index, "answer_text": "x", "filled_by": blank.assigned_child},
        )


def test_fill_round_trip_restores_framework_text():
    engine = driver.make_engine()
    driver.to_cloze(engine)
    driver.complete_cloze(engine)
    framework = engine.state.frameworks[engine.state.active_framework_id]
    book = engine.storybook()
    assert [p.text for p in book.paragraphs] == [p.text for p in framework.paragraphs]


# --- materials through the engine -------------------------------------------------------------


def test_present_material_idempotent_no_op():
    engine = driver.make_engine()
    result = engine.execute("generate_material", {"keyword": "tiger", "child_id": "lisa"})
    material_id = result.result["material_id"]
    version_before = engine.state.version
    engine.execute("present_material", {"material_id": material_id})
    assert engine.state.materials[material_id].status == "presented"
    repeat = engine.execute("present_material", {"material_id": material_id})
    assert repeat.warning is not None
    assert repeat.event is None
    assert engine.state.version == version_before + 1  # only the first present applied


def test_present_unknown_material():
    engine = driver.make_engine()
    with pytest.raises(UnknownMaterial):
        engine.execute("present_material", {"material_id": "m-0404"})


def test_no_material_event_reaches_children_before_present():
    engine = driver.make_engine()
    child_stream = engine.subscribe("child")
    child_stream.drain()  # swallow the session_opened backlog
    engine.execute("generate_material", {"keyword": "tiger", "child_id": "lisa"})
    assert child_stream.drain() == []  # generation is coordinator-only
    engine.execute("present_material", {"material_id": "m-0001"})
    frames = child_stream.drain()
    assert len(frames) == 1
    assert frames[0].event.kind == "material_presented"


# --- coding -------------------------------------------------------------------------------------


def test_coding_priority_and_ranges():
    engine = driver.make_engine()
    driver.to_cloze(engine)
    driver.answer_blank(engine, engine.state.cloze.blanks[0])
    record_id = next(iter(engine.state.records))
    engine.execute("code_response", {"record_id": record_id, "dimension": "topical_relevance", "value": 1})
    engine.execute("suggest_codes", {"record_id": record_id})
    record = engine.state.records[record_id]
    assert record.manual_codes["topical_relevance"] == 1
    assert record.effective_code("topical_relevance") == 1  # suggestion never overwrites
    with pytest.raises(OutOfRange):
        engine.execute("code_response", {"record_id": record_id, "dimension": "topical_relevance", "value": 9})
    with pytest.raises(GatewayCannotCode):
        engine.execute(
            "code_response",
            {"record_id": record_id, "dimension": "intelligibility", "value": 1, "by": "gateway_suggestion"},
        )


def test_coordinator_can_edit_summary_versioned():
    engine = driver.make_engine()
    engine.execute("summarize_individual", {"child_id": "lisa"})
    original = engine.state.summaries["lisa"]
    assert original.version == 1
    engine.execute(
        "edit_individual_summary",
        {"child_id": "lisa", "sentences": ["Lisa loves quiet puzzles."], "source_tags": [["Personality:quiet"]]},
    )
    edited = engine.state.summaries["lisa"]
    assert edited.version == 2
    assert edited.sentences == ("Lisa loves quiet puzzles.",)
    # Re-summarizing bumps the version again.
    engine.execute("summarize_individual", {"child_id": "lisa"})
    assert engine.state.summaries["lisa"].version == 3


def test_generative_events_carry_correlation_ids():
    engine = driver.make_engine()
    result = engine.execute("summarize_individual", {"child_id": "lisa"})
    assert result.event.payload["correlation_ids"] == [1]
    result = engine.execute("summarize_common", {})
    assert result.event.payload["correlation_ids"] == [2, 3]  # match + reasoning
    result = engine.execute("join", {"participant_id": "teacher-1", "role": "coordinator"})
    assert "correlation_ids" not in result.event.payload


# --- report --------------------------------------------------------------------------------------


def test_report_requires_review_phase_and_is_built_once():
    engine = driver.make_engine()
    driver.to_review(engine)
    engine.execute("build_report", {})
    assert engine.state.report is not None
    version = engine.state.version
    repeat = engine.execute("build_report", {})
    assert repeat.warning is not None
    assert engine.state.version == version


# --- event sourcing ---------------------------------------------------------------------------------


def test_event_log_is_gap_free():
    engine = driver.random_session(seed=1)
    seqs = [e.seq for e in engine.state.event_log]
    assert seqs == list(range(1, len(seqs) + 1))


def test_replay_reproduces_state_for_random_sessions():
    for seed in range(5):
        engine = driver.random_session(seed=seed)
        replayed = SessionEngine.replay(engine.state.event_log)
        assert replayed.state.to_dict() == engine.state.to_dict()


def test_child_streams_never_carry_coordinator_only_events():
    engine = driver.make_engine()
    child_stream = engine.subscribe("child")
    coordinator_stream = engine.subscribe("coordinator")
    driver.to_review(engine)
    engine.execute("build_report", {})
    child_frames = child_stream.drain()
    coordinator_frames = coordinator_stream.drain()
    assert all(f.event.visibility == "all" for f in child_frames)
    assert any(f.event.visibility == "coordinator_only" for f in coordinator_frames)
    # Per-subscriber delivery is gap-free even though global seqs are filtered.
    assert [f.seq for f in child_frames] == list(range(1, len(child_frames) + 1))
    assert len(coordinator_frames) > len(child_frames)


def test_snapshot_round_trip_mid_cloze():
    engine = driver.make_engine()
    driver.to_cloze(engine)
    driver.answer_blank(engine, engine.state.cloze.blanks[0])
    snapshot = make_snapshot(engine.snapshot())
    restored = load_snapshot(snapshot)
    assert restored.to_dict() == engine.state.to_dict()


def test_snapshot_rejects_unknown_schema_version():
    engine = driver.make_engine()
    snapshot = make_snapshot(engine.snapshot())
    snapshot["schema_version"] = 999
    with pytest.raises(SchemaMismatch):
        load_snapshot(snapshot)


def test_snapshot_is_immune_to_later_mutation():
    engine = driver.make_engine()
    frozen = engine.snapshot()
    driver.join_all(engine)
    assert frozen.version == 1
    assert len(frozen.event_log) == 1
