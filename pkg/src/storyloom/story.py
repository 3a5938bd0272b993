"""Bilingual story frameworks, cloze transform, and the final storybook.

Target-word matching is exact and case-sensitive: a word-boundary check for
English, plain substring for Chinese. One blank per target word, at its first
occurrence inside a paragraph of the word's own language; later occurrences
stay visible as context.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, replace

from .errors import (
    AlreadyFilled,
    AlternationViolation,
    UnboundVariable,
    ValidationFailed,
    WordNotFound,
    WrongStatus,
)
from .gateway import PromptTemplate, RenderedPrompt, render_template
from .profile import ChildProfile, SessionConfig, TargetWordSet

FREYTAG_STAGES = ("exposition", "rising_action", "climax", "falling_action", "resolution")

DEFAULT_PARAGRAPH_COUNT = 6
MIN_PARAGRAPHS = 4
MAX_PARAGRAPHS = 10

STORY_SCHEMA = {
    "type": "object",
    "required": ["paragraphs"],
    "properties": {
        "paragraphs": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "required": ["language", "text", "stage"],
                "properties": {
                    "language": {"enum": ["zh", "en"]},
                    "text": {"type": "string", "minLength": 1},
                    "stage": {"enum": list(FREYTAG_STAGES)},
                },
            },
        }
    },
}

_STAGE_LABELS = {
    "exposition": "exposition",
    "rising_action": "rising action",
    "climax": "climax",
    "falling_action": "falling action",
    "resolution": "resolution",
}


@dataclass(frozen=True)
class Author:
    kind: str  # generated | coordinator_edit | child_extension
    child_id: str | None = None

    def to_dict(self) -> dict:
        return {"kind": self.kind, "child_id": self.child_id}

    @classmethod
    def from_dict(cls, data: dict) -> "Author":
        return cls(kind=data["kind"], child_id=data.get("child_id"))


GENERATED = Author("generated")


@dataclass(frozen=True)
class Paragraph:
    index: int
    language: str
    text: str
    author: Author = GENERATED
    stage: str | None = None

    def to_dict(self) -> dict:
        return {
            "index": self.index,
            "language": self.language,
            "text": self.text,
            "author": self.author.to_dict(),
            "stage": self.stage,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Paragraph":
        return cls(
            index=data["index"],
            language=data["language"],
            text=data["text"],
            author=Author.from_dict(data["author"]),
            stage=data.get("stage"),
        )


@dataclass(frozen=True)
class StageRange:
    stage: str
    start: int
    end: int  # inclusive

    def to_dict(self) -> dict:
        return {"stage": self.stage, "start": self.start, "end": self.end}


@dataclass(frozen=True)
class ValidationReport:
    ok: bool
    issues: tuple[str, ...]

    def to_dict(self) -> dict:
        return {"ok": self.ok, "issues": list(self.issues)}

    @classmethod
    def from_dict(cls, data: dict) -> "ValidationReport":
        return cls(ok=data["ok"], issues=tuple(data["issues"]))


@dataclass(frozen=True)
class StoryFramework:
    framework_id: str
    paragraphs: tuple[Paragraph, ...]
    status: str = "draft"  # draft | confirmed
    validation: ValidationReport | None = None

    def narrative_stages(self) -> tuple[StageRange, ...]:
        """Contiguous stage ranges in paragraph order."""
        ranges: list[StageRange] = []
        for paragraph in self.paragraphs:
            if ranges and ranges[-1].stage == paragraph.stage:
                ranges[-1] = StageRange(ranges[-1].stage, ranges[-1].start, paragraph.index)
            else:
                ranges.append(StageRange(paragraph.stage, paragraph.index, paragraph.index))
        return tuple(ranges)

    def to_dict(self) -> dict:
        return {
            "framework_id": self.framework_id,
            "paragraphs": [p.to_dict() for p in self.paragraphs],
            "status": self.status,
            "narrative_stages": [r.to_dict() for r in self.narrative_stages()],
            "validation": self.validation.to_dict() if self.validation else None,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "StoryFramework":
        return cls(
            framework_id=data["framework_id"],
            paragraphs=tuple(Paragraph.from_dict(p) for p in data["paragraphs"]),
            status=data["status"],
            validation=ValidationReport.from_dict(data["validation"]) if data.get("validation") else None,
        )


@dataclass(frozen=True)
class Fill:
    answer_text: str
    filled_by: str
    approved: bool

    def to_dict(self) -> dict:
        return {"answer_text": self.answer_text, "filled_by": self.filled_by, "approved": self.approved}

    @classmethod
    def from_dict(cls, data: dict) -> "Fill":
        return cls(**data)


@dataclass(frozen=True)
class Blank:
    blank_index: int  # 1-based display number, document order
    paragraph_index: int
    char_span: tuple[int, int]  # [start, end) in the original paragraph text
    target_word: str
    assigned_child: str | None = None
    fill: Fill | None = None

    def to_dict(self) -> dict:
        return {
            "blank_index": self.blank_index,
            "paragraph_index": self.paragraph_index,
            "char_span": list(self.char_span),
            "target_word": self.target_word,
            "assigned_child": self.assigned_child,
            "fill": self.fill.to_dict() if self.fill else None,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Blank":
        return cls(
            blank_index=data["blank_index"],
            paragraph_index=data["paragraph_index"],
            char_span=tuple(data["char_span"]),
            target_word=data["target_word"],
            assigned_child=data.get("assigned_child"),
            fill=Fill.from_dict(data["fill"]) if data.get("fill") else None,
        )


@dataclass(frozen=True)
class ClozeStory:
    base: StoryFramework
    blanks: tuple[Blank, ...]

    @property
    def status(self) -> str:
        return "completed" if all(b.fill and b.fill.approved for b in self.blanks) else "open"

    def blank(self, blank_index: int) -> Blank:
        for b in self.blanks:
            if b.blank_index == blank_index:
                return b
        raise WordNotFound(f"no blank with display number {blank_index}")

    def to_dict(self) -> dict:
        return {
            "base": self.base.to_dict(),
            "blanks": [b.to_dict() for b in self.blanks],
            "status": self.status,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ClozeStory":
        return cls(
            base=StoryFramework.from_dict(data["base"]),
            blanks=tuple(Blank.from_dict(b) for b in data["blanks"]),
        )


@dataclass(frozen=True)
class ProvenanceEntry:
    kind: str  # fill | adaptation_edit | extension_append
    payload: dict

    def to_dict(self) -> dict:
        return {"kind": self.kind, "payload": self.payload}

    @classmethod
    def from_dict(cls, data: dict) -> "ProvenanceEntry":
        return cls(kind=data["kind"], payload=data["payload"])


@dataclass(frozen=True)
class Storybook:
    paragraphs: tuple[Paragraph, ...]
    provenance: tuple[ProvenanceEntry, ...]

    def to_dict(self) -> dict:
        return {
            "paragraphs": [p.to_dict() for p in self.paragraphs],
            "provenance": [e.to_dict() for e in self.provenance],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Storybook":
        return cls(
            paragraphs=tuple(Paragraph.from_dict(p) for p in data["paragraphs"]),
            provenance=tuple(ProvenanceEntry.from_dict(e) for e in data["provenance"]),
        )


# --- word occurrence ---------------------------------------------------------

def find_word(text: str, word: str, language: str) -> tuple[int, int] | None:
    """First occurrence span of ``word`` in ``text``, or None.

    English requires word boundaries (no letter or digit on either side);
    Chinese is a plain substring search.
    """
    if language == "en":
        pattern = re.compile(rf"(?<![A-Za-z0-9]){re.escape(word)}(?![A-Za-z0-9])")
        match = pattern.search(text)
        return (match.start(), match.end()) if match else None
    start = text.find(word)
    return (start, start + len(word)) if start >= 0 else None


# --- prompt construction -----------------------------------------------------

def build_story_prompt(
    common_sentences: tuple[str, ...],
    words: TargetWordSet,
    config: SessionConfig,
    templates: dict[str, PromptTemplate],
    paragraph_count: int = DEFAULT_PARAGRAPH_COUNT,
) -> RenderedPrompt:
    """Render the framework prompt from premise and instruction blocks.

    The premise embeds the common-characteristic sentences and every target
    word; a session without a common summary yet gets a generic premise built
    from the target words alone. Difficulty is pinned to the lower of the two
    children's CEFR levels.
    """
    if words is None or words.total() == 0:
        raise UnboundVariable("premise requires target words")
    if not MIN_PARAGRAPHS <= paragraph_count <= MAX_PARAGRAPHS:
        raise ValidationFailed(ValidationReport(False, (f"paragraph count {paragraph_count} outside {MIN_PARAGRAPHS}..{MAX_PARAGRAPHS}",)))

    scale = ("A1", "A2", "B1", "B2", "C1", "C2")
    lower_level = min((c.proficiency for c in config.children), key=scale.index)
    levels = ", ".join(
        f"{c.display_name} {c.proficiency} ({c.learning_language})" for c in config.children
    )
    if common_sentences:
        premise_lead = " ".join(common_sentences)
        generic = ""
    else:
        premise_lead = "A cheerful story for two children learning each other's language."
        generic = " (generic premise: no common characteristics available)"
    premise_lines = [
        premise_lead + generic,
        f"Chinese target words: {' | '.join(words.words('zh'))}" if words.words("zh") else "",
        f"English target words: {' | '.join(words.words('en'))}" if words.words("en") else "",
        f"Proficiency: {levels}. Keep vocabulary within the lower band, CEFR {lower_level}, in both languages.",
    ]
    premise = "\n".join(line for line in premise_lines if line)

    stage_names = ", ".join(_STAGE_LABELS[s] for s in FREYTAG_STAGES)
    instruction = (
        f"Write exactly {paragraph_count} paragraphs. "
        f"Alternate languages between consecutive paragraphs, starting with {config.first_paragraph_language}. "
        f"Follow the five narrative stages in order: {stage_names}. "
        "Cover every Chinese target word in a Chinese paragraph and every English target word in an English paragraph."
    )
    return render_template(templates["story_framework"], {"premise": premise, "instruction": instruction})


# --- validation ----------------------------------------------------------------

def parse_framework_reply(framework_id: str, reply: dict) -> StoryFramework:
    """Build a draft framework from a schema-validated gateway reply."""
    paragraphs = tuple(
        Paragraph(index=i, language=item["language"], text=item["text"], stage=item["stage"])
        for i, item in enumerate(reply["paragraphs"])
    )
    return StoryFramework(framework_id=framework_id, paragraphs=paragraphs, status="draft")


def validate_framework(paragraphs: tuple[Paragraph, ...], words: TargetWordSet) -> ValidationReport:
    """Alternation, target-word coverage, and Freytag stage structure."""
    issues: list[str] = []
    for i in range(len(paragraphs) - 1):
        if paragraphs[i].language == paragraphs[i + 1].language:
            issues.append(f"paragraphs {i} and {i + 1} share language {paragraphs[i].language}")
    for paragraph in paragraphs:
        if not paragraph.text.strip():
            issues.append(f"paragraph {paragraph.index} is empty")
    for language, word in words.all_words():
        if not any(
            p.language == language and find_word(p.text, word, language) for p in paragraphs
        ):
            issues.append(f"target word {word!r} missing from every {language} paragraph")

    stages = [p.stage for p in paragraphs]
    if any(s is None for s in stages):
        issues.append("paragraph without a narrative stage")
    else:
        order = [s for i, s in enumerate(stages) if i == 0 or stages[i - 1] != s]
        if len(set(order)) != len(order):
            issues.append("narrative stage repeated after being left")
        else:
            indices = [FREYTAG_STAGES.index(s) for s in order]
            if indices != sorted(indices):
                issues.append("narrative stages out of pyramid order")
        if len(paragraphs) >= len(FREYTAG_STAGES) and set(stages) != set(FREYTAG_STAGES):
            missing = [s for s in FREYTAG_STAGES if s not in stages]
            issues.append(f"missing narrative stages: {missing}")
    return ValidationReport(ok=not issues, issues=tuple(issues))


def confirm_framework(framework: StoryFramework, words: TargetWordSet) -> StoryFramework:
    if framework.status != "draft":
        raise WrongStatus(f"framework {framework.framework_id} is {framework.status}, not draft")
    report = validate_framework(framework.paragraphs, words)
    if not report.ok:
        raise ValidationFailed(report)
    return replace(framework, status="confirmed", validation=report)


def edit_paragraph(framework: StoryFramework, index: int, new_text: str, words: TargetWordSet) -> StoryFramework:
    """Replace one paragraph's text on a draft and re-run validation."""
    if framework.status != "draft":
        raise WrongStatus(f"framework {framework.framework_id} is {framework.status}, not draft")
    if not 0 <= index < len(framework.paragraphs):
        raise WordNotFound(f"no paragraph {index}")
    paragraphs = list(framework.paragraphs)
    paragraphs[index] = replace(paragraphs[index], text=new_text, author=Author("coordinator_edit"))
    report = validate_framework(tuple(paragraphs), words)
    return replace(framework, paragraphs=tuple(paragraphs), validation=report)


# --- cloze -----------------------------------------------------------------------

def to_cloze(framework: StoryFramework, words: TargetWordSet) -> ClozeStory:
    """One blank per target word at its first occurrence, numbered in document order."""
    if framework.status != "confirmed":
        raise WrongStatus("cloze requires a confirmed framework")
    found: list[Blank] = []
    for language, word in words.all_words():
        located = None
        for paragraph in framework.paragraphs:
            if paragraph.language != language:
                continue
            span = find_word(paragraph.text, word, language)
            if span:
                located = (paragraph.index, span)
                break
        if located is None:
            raise WordNotFound(f"target word {word!r} not found in any {language} paragraph")
        found.append(
            Blank(
                blank_index=0,
                paragraph_index=located[0],
                char_span=located[1],
                target_word=word,
            )
        )
    found.sort(key=lambda b: (b.paragraph_index, b.char_span[0]))
    numbered = tuple(replace(b, blank_index=i + 1) for i, b in enumerate(found))
    return ClozeStory(base=framework, blanks=numbered)


def assign_blanks(cloze: ClozeStory, children: tuple[ChildProfile, ChildProfile]) -> ClozeStory:
    """Alternate children over blanks in display order.

    The first blank goes to the child whose learning language matches the
    language of the paragraph holding blank 1.
    """
    if not cloze.blanks:
        return cloze
    first_language = cloze.base.paragraphs[cloze.blanks[0].paragraph_index].language
    ordered = sorted(children, key=lambda c: c.learning_language != first_language)
    assigned = tuple(
        replace(b, assigned_child=ordered[i % 2].child_id) for i, b in enumerate(cloze.blanks)
    )
    return ClozeStory(base=cloze.base, blanks=assigned)


def fill_blank(cloze: ClozeStory, blank_index: int, answer_text: str, filled_by: str, approved: bool) -> ClozeStory:
    """Record an answer for one blank; an approved fill is final."""
    target = cloze.blank(blank_index)
    if target.fill is not None and target.fill.approved:
        raise AlreadyFilled(f"blank {blank_index} already has an approved fill")
    blanks = tuple(
        replace(b, fill=Fill(answer_text=answer_text, filled_by=filled_by, approved=approved))
        if b.blank_index == blank_index
        else b
        for b in cloze.blanks
    )
    return ClozeStory(base=cloze.base, blanks=blanks)


def _apply_spans(text: str, replacements: list[tuple[tuple[int, int], str]]) -> str:
    """Replace [start, end) spans; applied right-to-left so offsets stay valid."""
    for (start, end), replacement in sorted(replacements, key=lambda r: r[0][0], reverse=True):
        text = text[:start] + replacement + text[end:]
    return text


def cloze_paragraph_texts(cloze: ClozeStory) -> list[str]:
    """Display text: unfilled blanks rendered as ____(n), fills restored."""
    by_paragraph: dict[int, list[tuple[tuple[int, int], str]]] = {}
    for blank in cloze.blanks:
        shown = blank.fill.answer_text if blank.fill else f"____({blank.blank_index})"
        by_paragraph.setdefault(blank.paragraph_index, []).append((blank.char_span, shown))
    return [
        _apply_spans(p.text, by_paragraph.get(p.index, []))
        for p in cloze.base.paragraphs
    ]


def reconstructed_paragraphs(cloze: ClozeStory) -> tuple[Paragraph, ...]:
    """Paragraphs with every filled blank's answer substituted at its span."""
    by_paragraph: dict[int, list[tuple[tuple[int, int], str]]] = {}
    for blank in cloze.blanks:
        if blank.fill:
            by_paragraph.setdefault(blank.paragraph_index, []).append(
                (blank.char_span, blank.fill.answer_text)
            )
    out = []
    for p in cloze.base.paragraphs:
        text = _apply_spans(p.text, by_paragraph.get(p.index, []))
        out.append(replace(p, text=text))
    return tuple(out)


# --- storybook --------------------------------------------------------------------

def build_storybook(
    framework: StoryFramework,
    words: TargetWordSet,
    provenance: tuple[ProvenanceEntry, ...],
) -> Storybook:
    """Replay the provenance log over the confirmed framework.

    Fills resolve their spans through the deterministic cloze transform, so a
    storybook is always reconstructible from (framework, words, provenance).
    """
    cloze = to_cloze(framework, words)
    fills = [e for e in provenance if e.kind == "fill"]
    for entry in fills:
        cloze = fill_blank(
            cloze,
            entry.payload["blank_index"],
            entry.payload["answer_text"],
            entry.payload["filled_by"],
            entry.payload.get("approved", True),
        )
    paragraphs = list(reconstructed_paragraphs(cloze))

    for entry in provenance:
        if entry.kind == "adaptation_edit":
            index = entry.payload["paragraph_index"]
            paragraphs[index] = replace(
                paragraphs[index],
                text=entry.payload["new_text"],
                author=Author("coordinator_edit"),
            )
        elif entry.kind == "extension_append":
            language = entry.payload["language"]
            if paragraphs and paragraphs[-1].language == language:
                raise AlternationViolation(
                    f"extension paragraph repeats language {language} of the previous paragraph"
                )
            paragraphs.append(
                Paragraph(
                    index=len(paragraphs),
                    language=language,
                    text=entry.payload["text"],
                    author=Author("child_extension", child_id=entry.payload["child_id"]),
                    stage=None,
                )
            )
    return Storybook(paragraphs=tuple(paragraphs), provenance=tuple(provenance))


def render_storybook_text(storybook: Storybook) -> str:
    """Printable rendering with alternating-language paragraphs."""
    lines = []
    for paragraph in storybook.paragraphs:
        label = {"zh": "中文", "en": "EN"}[paragraph.language]
        lines.append(f"[{paragraph.index + 1} · {label}] {paragraph.text}")
    return "\n\n".join(lines) + "\n"
