from __future__ import annotations

import pytest

from storyloom import story
from storyloom.errors import (
    AlreadyFilled,
    AlternationViolation,
    UnboundVariable,
    ValidationFailed,
    WrongStatus,
)
from storyloom.profile import TargetWordSet
from storyloom.story import Paragraph, ProvenanceEntry, StoryFramework

from .synthetic import generate_framework


def small_words():
    return TargetWordSet(words_by_language={"zh": ("老虎",), "en": ("zoo",)})


def small_framework(status="confirmed"):
    paragraphs = (
        Paragraph(index=0, language="zh", text="他们去看老虎。", stage="exposition"),
        Paragraph(index=1, language="en", text="They walked into the zoo happily.", stage="climax"),
        Paragraph(index=2, language="zh", text="大家都很开心。", stage="resolution"),
    )
    framework = StoryFramework(framework_id="f-1", paragraphs=paragraphs)
    if status == "confirmed":
        return story.confirm_framework(framework, small_words())
    return framework


# --- prompt ----------------------------------------------------------------------


def test_prompt_contains_all_words_and_stages(config, zoo_words, templates):
    rendered = story.build_story_prompt(("Both like adventure.",), zoo_words, config, templates)
    for _, word in zoo_words.all_words():
        assert word in rendered.text
    for label in ("exposition", "rising action", "climax", "falling action", "resolution"):
        assert label in rendered.text
    assert "starting with zh" in rendered.text
    assert "Both like adventure." in rendered.text
    assert "CEFR A1" in rendered.text


def test_prompt_without_common_summary_is_flagged_generic(config, zoo_words, templates):
    rendered = story.build_story_prompt((), zoo_words, config, templates)
    assert "generic premise" in rendered.text


def test_prompt_is_deterministic(config, zoo_words, templates):
    a = story.build_story_prompt(("s",), zoo_words, config, templates)
    b = story.build_story_prompt(("s",), zoo_words, config, templates)
    assert a.text == b.text


def test_prompt_requires_target_words(config, templates):
    with pytest.raises(UnboundVariable):
        story.build_story_prompt((), None, config, templates)


# --- validation ---------------------------------------------------------------------


def test_validate_flags_alternation_break():
    paragraphs = (
        Paragraph(index=0, language="zh", text="老虎。", stage="exposition"),
        Paragraph(index=1, language="zh", text="zoo 在这里。", stage="resolution"),
    )
    report = story.validate_framework(paragraphs, small_words())
    assert not report.ok
    assert any("share language" in issue for issue in report.issues)


def test_validate_flags_missing_word():
    paragraphs = (
        Paragraph(index=0, language="zh", text="他们去看老虎。", stage="exposition"),
        Paragraph(index=1, language="en", text="They walked in happily.", stage="resolution"),
    )
    report = story.validate_framework(paragraphs, small_words())
    assert any("'zoo'" in issue for issue in report.issues)


def test_validate_requires_word_in_matching_language():
    # "zoo" present only inside a Chinese paragraph does not count.
    paragraphs = (
        Paragraph(index=0, language="zh", text="他们去 zoo 看老虎。", stage="exposition"),
        Paragraph(index=1, language="en", text="They walked in happily.", stage="resolution"),
    )
    report = story.validate_framework(paragraphs, small_words())
    assert any("'zoo'" in issue for issue in report.issues)


def test_validate_flags_stage_disorder():
    paragraphs = (
        Paragraph(index=0, language="zh", text="老虎。", stage="climax"),
        Paragraph(index=1, language="en", text="the zoo.", stage="exposition"),
    )
    report = story.validate_framework(paragraphs, small_words())
    assert any("pyramid order" in issue for issue in report.issues)


def test_validate_requires_all_five_stages_at_five_plus_paragraphs():
    paragraphs = tuple(
        Paragraph(
            index=i,
            language="zh" if i % 2 == 0 else "en",
            text="老虎。" if i % 2 == 0 else "the zoo.",
            stage="exposition" if i < 3 else "resolution",
        )
        for i in range(6)
    )
    report = story.validate_framework(paragraphs, small_words())
    assert any("missing narrative stages" in issue for issue in report.issues)


def test_english_coverage_needs_word_boundary():
    words = TargetWordSet(words_by_language={"en": ("cat",)})
    inside = (Paragraph(index=0, language="en", text="They saw cats.", stage="climax"),)
    assert not story.validate_framework(inside, words).ok
    exact = (Paragraph(index=0, language="en", text="They saw a cat.", stage="climax"),)
    assert story.validate_framework(exact, words).ok


def test_confirm_rejects_invalid_draft():
    framework = StoryFramework(
        framework_id="f-1",
        paragraphs=(
            Paragraph(index=0, language="zh", text="没有词。", stage="exposition"),
            Paragraph(index=1, language="en", text="no words here.", stage="resolution"),
        ),
    )
    with pytest.raises(ValidationFailed) as exc_info:
        story.confirm_framework(framework, small_words())
    assert exc_info.value.report.issues


def test_edit_that_deletes_only_occurrence_blocks_confirm():
    framework = small_framework(status="draft")
    edited = story.edit_paragraph(framework, 1, "They walked in happily.", small_words())
    assert not edited.validation.ok
    with pytest.raises(ValidationFailed) as exc_info:
        story.confirm_framework(edited, small_words())
    assert any("'zoo'" in issue for issue in exc_info.value.report.issues)


def test_edit_requires_draft_status():
    confirmed = small_framework()
    with pytest.raises(WrongStatus):
        story.edit_paragraph(confirmed, 0, "x", small_words())


def test_narrative_stage_ranges_are_contiguous():
    framework = small_framework()
    ranges = framework.narrative_stages()
    assert [r.stage for r in ranges] == ["exposition", "climax", "resolution"]
    assert ranges[0].start == 0 and ranges[-1].end == 2


# --- cloze ----------------------------------------------------------------------------


def test_to_cloze_zoo_counts(config, zoo_words, templates, live_gateway):
    rendered = story.build_story_prompt((), zoo_words, config, templates)
    reply = live_gateway.complete(rendered, story.STORY_SCHEMA)
    framework = story.confirm_framework(
        story.parse_framework_reply("f-1", reply), zoo_words
    )
    cloze = story.to_cloze(framework, zoo_words)
    assert len(cloze.blanks) == 9
    assert [b.blank_index for b in cloze.blanks] == list(range(1, 10))
    spans = [(b.paragraph_index, b.char_span[0]) for b in cloze.blanks]
    assert spans == sorted(spans)  # display numbers follow document order


def test_to_cloze_requires_confirmed():
    with pytest.raises(WrongStatus):
        story.to_cloze(small_framework(status="draft"), small_words())


def test_blank_span_covers_the_word():
    cloze = story.to_cloze(small_framework(), small_words())
    for blank in cloze.blanks:
        paragraph = cloze.base.paragraphs[blank.paragraph_index]
        start, end = blank.char_span
        assert paragraph.text[start:end] == blank.target_word


def test_assign_blanks_alternates(config):
    cloze = story.to_cloze(small_framework(), small_words())
    assigned = story.assign_blanks(cloze, config.children)
    # Blank 1 sits in a zh paragraph; Lisa learns zh.
    assert assigned.blanks[0].assigned_child == "lisa"
    assert assigned.blanks[1].assigned_child == "lele"


def test_assign_blanks_fairness_within_one():
    for seed in range(25):
        framework, words = generate_framework(seed)
        cloze = story.to_cloze(framework, words)
        children = _children_for()
        assigned = story.assign_blanks(cloze, children)
        counts = {"a": 0, "b": 0}
        for blank in assigned.blanks:
            counts[blank.assigned_child] += 1
        assert abs(counts["a"] - counts["b"]) <= 1


def _children_for():
    from storyloom.profile import ChildProfile

    a = ChildProfile(child_id="a", display_name="A", native_language="en",
                     learning_language="zh", proficiency="A1")
    b = ChildProfile(child_id="b", display_name="B", native_language="zh",
                     learning_language="en", proficiency="A1")
    return (a, b)


def test_four_blanks_two_children_get_two_each():
    words = TargetWordSet(words_by_language={"zh": ("老虎", "猫"), "en": ("zoo", "dog")})
    paragraphs = (
        Paragraph(index=0, language="zh", text="老虎和猫。", stage="exposition"),
        Paragraph(index=1, language="en", text="the zoo and the dog.", stage="resolution"),
    )
    framework = story.confirm_framework(StoryFramework(framework_id="f", paragraphs=paragraphs), words)
    assigned = story.assign_blanks(story.to_cloze(framework, words), _children_for())
    counts = {"a": 0, "b": 0}
    for blank in assigned.blanks:
        counts[blank.assigned_child] += 1
    assert counts == {"a": 2, "b": 2}


def test_cloze_round_trip_byte_exact():
    framework = small_framework()
    cloze = story.to_cloze(framework, small_words())
    for blank in cloze.blanks:
        cloze = story.fill_blank(cloze, blank.blank_index, blank.target_word, "kid", True)
    assert cloze.status == "completed"
    rebuilt = story.reconstructed_paragraphs(cloze)
    assert [p.text for p in rebuilt] == [p.text for p in framework.paragraphs]


def test_cloze_display_shows_numbered_blanks():
    cloze = story.to_cloze(small_framework(), small_words())
    texts = story.cloze_paragraph_texts(cloze)
    assert "____(1)" in texts[0]
    assert "____(2)" in texts[1]


def test_fill_approved_is_final():
    cloze = story.to_cloze(small_framework(), small_words())
    cloze = story.fill_blank(cloze, 1, "老虎", "kid", True)
    with pytest.raises(AlreadyFilled):
        story.fill_blank(cloze, 1, "狮子", "kid", True)


def test_unapproved_fill_can_be_replaced():
    cloze = story.to_cloze(small_framework(), small_words())
    cloze = story.fill_blank(cloze, 1, "狮子", "kid", False)
    assert cloze.status == "open"
    cloze = story.fill_blank(cloze, 1, "老虎", "kid", True)
    assert cloze.blank(1).fill.answer_text == "老虎"


# --- storybook -----------------------------------------------------------------------


def zoo_provenance():
    return (
        ProvenanceEntry(kind="fill", payload={"blank_index": 1, "answer_text": "老虎", "filled_by": "a", "approved": True}),
        ProvenanceEntry(kind="fill", payload={"blank_index": 2, "answer_text": "zoo", "filled_by": "b", "approved": True}),
        ProvenanceEntry(kind="adaptation_edit", payload={"paragraph_index": 2, "new_text": "大家都非常非常开心。", "rationale": "richer"}),
        ProvenanceEntry(kind="extension_append", payload={"child_id": "a", "language": "en", "text": "Then they drew a map."}),
        ProvenanceEntry(kind="extension_append", payload={"child_id": "b", "language": "zh", "text": "后来他们又来了一次。"}),
    )


def test_storybook_replays_provenance():
    framework = small_framework()
    book = story.build_storybook(framework, small_words(), zoo_provenance())
    assert book.paragraphs[2].text == "大家都非常非常开心。"
    assert book.paragraphs[2].author.kind == "coordinator_edit"
    assert book.paragraphs[3].author.kind == "child_extension"
    assert book.paragraphs[3].author.child_id == "a"
    for i in range(len(book.paragraphs) - 1):
        assert book.paragraphs[i].language != book.paragraphs[i + 1].language
    again = story.build_storybook(framework, small_words(), zoo_provenance())
    assert again.to_dict() == book.to_dict()


def test_storybook_rejects_alternation_break_on_append():
    framework = small_framework()
    provenance = (
        ProvenanceEntry(kind="extension_append", payload={"child_id": "a", "language": "zh", "text": "重复语言。"}),
    )
    with pytest.raises(AlternationViolation):
        story.build_storybook(framework, small_words(), provenance)


def test_storybook_text_rendering_lists_every_paragraph():
    framework = small_framework()
    book = story.build_storybook(framework, small_words(), zoo_provenance())
    text = story.render_storybook_text(book)
    assert text.count("[") == len(book.paragraphs)


# --- synthetic generator sanity ------------------------------------------------------------


def test_synthetic_frameworks_satisfy_invariants():
    for seed in range(30):
        framework, words = generate_framework(seed)
        assert framework.status == "confirmed"
        report = story.validate_framework(framework.paragraphs, words)
        assert report.ok, report.issues
