"""Stage-specific guiding questions over the attribute x explicitness matrix.

The seven attributes are the narrative dimensions used throughout: character,
setting, action, feeling, causal relationship, outcome resolution, prediction.
Per-stage defaults: cloze questions are explicit, adaptation offers both,
extension teller questions are implicit and listener questions explicit.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, replace

from .errors import (
    GenerationUnavailable,
    InvariantViolation,
    MalformedOutput,
    ProviderError,
    WrongChild,
)
from .gateway import GenerationGateway, PromptTemplate, render_template
from .profile import ChildProfile
from .story import ClozeStory, Paragraph, cloze_paragraph_texts

ATTRIBUTES = (
    "character",
    "setting",
    "action",
    "feeling",
    "causal_relationship",
    "outcome_resolution",
    "prediction",
)
EXPLICITNESS = ("explicit", "implicit")
STAGES = ("cloze", "adaptation", "extension_teller", "extension_listener")

_ANCHOR_KIND_FOR_STAGE = {
    "cloze": "blank",
    "adaptation": "paragraph",
    "extension_teller": "utterance",
    "extension_listener": "utterance",
}

# Attribute rotation for the stages that generate a fixed-size candidate set.
_CLOZE_CYCLE = ("setting", "action", "causal_relationship")
_TELLER_CYCLE = ("setting", "action", "prediction")
_LISTENER_CYCLE = ("character", "action", "outcome_resolution")

QUESTION_SCHEMA = {
    "type": "object",
    "required": ["questions"],
    "properties": {
        "questions": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "required": ["text"],
                "properties": {"text": {"type": "string", "minLength": 1}},
            },
        }
    },
}


@dataclass(frozen=True)
class QuestionSpec:
    stage: str
    attribute: str
    explicitness: str
    target_child: str
    anchor_kind: str
    anchor_value: int | str

    def __post_init__(self):
        if self.stage not in STAGES:
            raise InvariantViolation(f"unknown stage: {self.stage!r}")
        if self.attribute not in ATTRIBUTES:
            raise InvariantViolation(f"unknown attribute: {self.attribute!r}")
        if self.explicitness not in EXPLICITNESS:
            raise InvariantViolation(f"unknown explicitness: {self.explicitness!r}")
        expected = _ANCHOR_KIND_FOR_STAGE[self.stage]
        if self.anchor_kind != expected:
            raise InvariantViolation(
                f"stage {self.stage} anchors to a {expected}, not {self.anchor_kind}"
            )

    def to_dict(self) -> dict:
        return {
            "stage": self.stage,
            "attribute": self.attribute,
            "explicitness": self.explicitness,
            "target_child": self.target_child,
            "anchor_kind": self.anchor_kind,
            "anchor_value": self.anchor_value,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "QuestionSpec":
        return cls(**data)


@dataclass(frozen=True)
class GeneratedQuestion:
    question_id: str
    spec: QuestionSpec
    text: str
    language: str
    status: str = "proposed"  # proposed | selected | answered | skipped

    def to_dict(self) -> dict:
        return {
            "question_id": self.question_id,
            "spec": self.spec.to_dict(),
            "text": self.text,
            "language": self.language,
            "status": self.status,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "GeneratedQuestion":
        return cls(
            question_id=data["question_id"],
            spec=QuestionSpec.from_dict(data["spec"]),
            text=data["text"],
            language=data["language"],
            status=data["status"],
        )

    def with_status(self, status: str) -> "GeneratedQuestion":
        return replace(self, status=status)


def contains_standalone(text: str, word: str, language: str) -> bool:
    """True when ``word`` occurs as a standalone token (en) or substring (zh)."""
    if language == "en":
        return re.search(rf"(?<![A-Za-z0-9]){re.escape(word)}(?![A-Za-z0-9])", text, re.IGNORECASE) is not None
    return word in text


def _preferences_listing(profile: ChildProfile) -> str:
    values = [t.value for t in profile.preference_tags()]
    return "; ".join(f"likes: {v}" for v in values) if values else "-"


def _ask(gateway: GenerationGateway, templates: dict[str, PromptTemplate], template_id: str, variables: dict) -> str:
    prompt = render_template(templates[template_id], variables)
    try:
        reply = gateway.complete(prompt, QUESTION_SCHEMA)
    except (ProviderError, MalformedOutput) as exc:
        raise GenerationUnavailable(str(exc)) from exc
    return reply["questions"][0]["text"]


def generate_cloze_questions(
    cloze: ClozeStory,
    blank_index: int,
    profile: ChildProfile,
    gateway: GenerationGateway,
    templates: dict[str, PromptTemplate],
    id_factory=None,
    count: int = 3,
    max_retries_per_slot: int = 2,
) -> list[GeneratedQuestion]:
    """Candidate questions hinting one blank's word without ever stating it.

    A candidate containing the target word as a standalone token is rejected
    and regenerated; persistent offenders abort the whole batch.
    """
    blank = cloze.blank(blank_index)
    if blank.fill is not None and blank.fill.approved:
        raise InvariantViolation(f"blank {blank_index} is already filled")
    if blank.assigned_child and blank.assigned_child != profile.child_id:
        raise WrongChild(f"blank {blank_index} is assigned to {blank.assigned_child}")

    ids = id_factory or _counter_ids("q")
    language = profile.learning_language
    paragraph_text = cloze_paragraph_texts(cloze)[blank.paragraph_index]
    questions: list[GeneratedQuestion] = []
    for slot in range(count):
        attribute = _CLOZE_CYCLE[slot % len(_CLOZE_CYCLE)]
        variables = {
            "blank_number": str(blank.blank_index),
            "target_word": blank.target_word,
            "paragraph_text": paragraph_text,
            "preferences": _preferences_listing(profile),
            "attribute": attribute,
            "ex_or_im": "explicit",
            "language": language,
        }
        text = None
        for _ in range(1 + max_retries_per_slot):
            candidate = _ask(gateway, templates, "cloze_question", variables)
            if not contains_standalone(candidate, blank.target_word, "en" if blank.target_word.isascii() else "zh"):
                text = candidate
                break
        if text is None:
            raise GenerationUnavailable(
                f"could not obtain a question for blank {blank_index} without the target word"
            )
        spec = QuestionSpec(
            stage="cloze",
            attribute=attribute,
            explicitness="explicit",
            target_child=profile.child_id,
            anchor_kind="blank",
            anchor_value=blank.blank_index,
        )
        questions.append(GeneratedQuestion(question_id=ids(), spec=spec, text=text, language=language))
    return questions


def generate_adaptation_questions(
    paragraph: Paragraph,
    profile: ChildProfile,
    gateway: GenerationGateway,
    templates: dict[str, PromptTemplate],
    id_factory=None,
) -> list[GeneratedQuestion]:
    """One question per (attribute, explicitness) pair: 7 x 2 candidates."""
    ids = id_factory or _counter_ids("q")
    language = profile.learning_language
    questions: list[GeneratedQuestion] = []
    for attribute in ATTRIBUTES:
        for ex_or_im in EXPLICITNESS:
            variables = {
                "paragraph_number": str(paragraph.index + 1),
                "paragraph_text": paragraph.text,
                "preferences": _preferences_listing(profile),
                "attribute": attribute,
                "ex_or_im": ex_or_im,
                "language": language,
            }
            text = _ask(gateway, templates, "adaptation_question", variables)
            spec = QuestionSpec(
                stage="adaptation",
                attribute=attribute,
                explicitness=ex_or_im,
                target_child=profile.child_id,
                anchor_kind="paragraph",
                anchor_value=paragraph.index,
            )
            questions.append(GeneratedQuestion(question_id=ids(), spec=spec, text=text, language=language))
    return questions


def generate_extension_questions(
    utterance_id: str,
    utterance_text: str,
    teller_profile: ChildProfile,
    listener_profile: ChildProfile,
    gateway: GenerationGateway,
    templates: dict[str, PromptTemplate],
    id_factory=None,
    count: int = 3,
) -> tuple[list[GeneratedQuestion], list[GeneratedQuestion]]:
    """Detail questions for the Storyteller, comprehension for the Storylistener."""
    ids = id_factory or _counter_ids("q")

    def batch(template_id: str, profile: ChildProfile, stage: str, cycle, ex_or_im: str):
        out = []
        for slot in range(count):
            attribute = cycle[slot % len(cycle)]
            variables = {
                "utterance": utterance_text,
                "preferences": _preferences_listing(profile),
                "attribute": attribute,
                "ex_or_im": ex_or_im,
                "language": profile.learning_language,
            }
            text = _ask(gateway, templates, template_id, variables)
            spec = QuestionSpec(
                stage=stage,
                attribute=attribute,
                explicitness=ex_or_im,
                target_child=profile.child_id,
                anchor_kind="utterance",
                anchor_value=utterance_id,
            )
            out.append(
                GeneratedQuestion(question_id=ids(), spec=spec, text=text, language=profile.learning_language)
            )
        return out

    teller = batch("extension_teller_question", teller_profile, "extension_teller", _TELLER_CYCLE, "implicit")
    listener = batch("extension_listener_question", listener_profile, "extension_listener", _LISTENER_CYCLE, "explicit")
    return teller, listener


def _counter_ids(prefix: str):
    state = {"n": 0}

    def next_id() -> str:
        state["n"] += 1
        return f"{prefix}-{state['n']:04d}"

    return next_id
