"""Individual and common characteristic summarization.

Exact tag matching is deterministic and never touches the generation gateway;
approximate matching and guideline-driven reasoning each make one batched
gateway call so replay fixtures stay stable regardless of tag counts.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

from .errors import GenerationUnavailable, MalformedOutput, ProviderError
from .gateway import GenerationGateway, PromptTemplate, render_template
from .profile import ChildProfile, Tag

logger = logging.getLogger(__name__)

SUMMARY_SCHEMA = {
    "type": "object",
    "required": ["sentences"],
    "properties": {
        "sentences": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "required": ["text", "source_tags"],
                "properties": {
                    "text": {"type": "string", "minLength": 1},
                    "source_tags": {"type": "array", "items": {"type": "string"}, "minItems": 1},
                },
            },
        }
    },
}

MATCH_SCHEMA = {
    "type": "object",
    "required": ["pairs"],
    "properties": {
        "pairs": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["a", "b", "label"],
                "properties": {
                    "a": {"type": "string"},
                    "b": {"type": "string"},
                    "label": {"type": "string"},
                },
            },
        },
        "differences": {"type": "array", "items": {"type": "string"}},
    },
}

REASONING_SCHEMA = {
    "type": "object",
    "required": ["commonalities"],
    "properties": {
        "commonalities": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["guideline_id", "statement", "evidence"],
                "properties": {
                    "guideline_id": {"type": "string"},
                    "statement": {"type": "string", "minLength": 1},
                    "evidence": {"type": "array", "items": {"type": "string"}},
                },
            },
        }
    },
}


@dataclass(frozen=True)
class IndividualSummary:
    child_id: str
    sentences: tuple[str, ...]
    source_tags: tuple[tuple[str, ...], ...]  # aligned with sentences
    version: int = 1

    def __post_init__(self):
        object.__setattr__(self, "sentences", tuple(self.sentences))
        object.__setattr__(self, "source_tags", tuple(tuple(s) for s in self.source_tags))
        if len(self.sentences) != len(self.source_tags):
            raise MalformedOutput("sentences and source_tags are not aligned")
        for i, sources in enumerate(self.source_tags):
            if not sources:
                raise MalformedOutput(f"sentence {i} traces to no source tag")

    def text(self) -> str:
        return " ".join(self.sentences)

    def to_dict(self) -> dict:
        return {
            "child_id": self.child_id,
            "sentences": list(self.sentences),
            "source_tags": [list(s) for s in self.source_tags],
            "version": self.version,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "IndividualSummary":
        return cls(
            child_id=data["child_id"],
            sentences=tuple(data["sentences"]),
            source_tags=tuple(tuple(s) for s in data["source_tags"]),
            version=data.get("version", 1),
        )


@dataclass(frozen=True)
class ExactMatch:
    category: str
    value: str

    def to_dict(self) -> dict:
        return {"category": self.category, "value": self.value}


@dataclass(frozen=True)
class TagRef:
    category: str
    value: str

    def to_dict(self) -> dict:
        return {"category": self.category, "value": self.value}


@dataclass(frozen=True)
class ApproximateMatch:
    unified_category_label: str
    a: TagRef
    b: TagRef

    def to_dict(self) -> dict:
        return {"unified_category_label": self.unified_category_label, "a": self.a.to_dict(), "b": self.b.to_dict()}


@dataclass(frozen=True)
class MatchSet:
    exact: tuple[ExactMatch, ...]
    approximate: tuple[ApproximateMatch, ...]
    degraded: bool = False
    differences: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {
            "exact": [e.to_dict() for e in self.exact],
            "approximate": [a.to_dict() for a in self.approximate],
            "degraded": self.degraded,
            "differences": list(self.differences),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "MatchSet":
        return cls(
            exact=tuple(ExactMatch(**e) for e in data["exact"]),
            approximate=tuple(
                ApproximateMatch(
                    unified_category_label=a["unified_category_label"],
                    a=TagRef(**a["a"]),
                    b=TagRef(**a["b"]),
                )
                for a in data["approximate"]
            ),
            degraded=data.get("degraded", False),
            differences=tuple(data.get("differences", ())),
        )


@dataclass(frozen=True)
class Guideline:
    guideline_id: str
    kind: str  # exam_level | preference
    min_age: int
    max_age: int
    languages: tuple[str, ...]
    rule_text: str
    genders: tuple[str, ...] = ()
    proficiency_levels: tuple[str, ...] = ()
    expansions: dict[str, tuple[str, ...]] | None = None
    wordlist: tuple[str, ...] = ()

    def applicable(self, profile: ChildProfile) -> bool:
        """Decidable from profile metadata alone."""
        age = profile.age()
        if age is None or not self.min_age <= age <= self.max_age:
            return False
        if self.languages and profile.learning_language not in self.languages:
            return False
        if self.genders:
            gender = profile.gender()
            if gender is None or gender.casefold() not in {g.casefold() for g in self.genders}:
                return False
        if self.proficiency_levels and profile.proficiency not in self.proficiency_levels:
            return False
        return True


def load_guidelines(directory: str | Path) -> list[Guideline]:
    """Load one JSON guideline document per file, sorted by filename."""
    guidelines = []
    for path in sorted(Path(directory).glob("*.json")):
        data = json.loads(path.read_text(encoding="utf-8"))
        guidelines.append(
            Guideline(
                guideline_id=data["guideline_id"],
                kind=data["kind"],
                min_age=int(data["min_age"]),
                max_age=int(data["max_age"]),
                languages=tuple(data.get("languages", ())),
                rule_text=data["rule_text"],
                genders=tuple(data.get("genders", ())),
                proficiency_levels=tuple(data.get("proficiency_levels", ())),
                expansions={k: tuple(v) for k, v in data["expansions"].items()} if data.get("expansions") else None,
                wordlist=tuple(data.get("wordlist", ())),
            )
        )
    return guidelines


@dataclass(frozen=True)
class ReasonedCommonality:
    statement: str
    guideline_id: str
    evidence: tuple[str, ...]

    def to_dict(self) -> dict:
        return {"statement": self.statement, "guideline_id": self.guideline_id, "evidence": list(self.evidence)}

    @classmethod
    def from_dict(cls, data: dict) -> "ReasonedCommonality":
        return cls(statement=data["statement"], guideline_id=data["guideline_id"], evidence=tuple(data["evidence"]))


@dataclass(frozen=True)
class ReasoningOutcome:
    commonalities: tuple[ReasonedCommonality, ...]
    no_applicable_guideline: bool = False


@dataclass(frozen=True)
class InferredPreference:
    value: str
    source_tag_value: str
    guideline_id: str
    inferred: bool = True


@dataclass(frozen=True)
class TraceEntry:
    kind: str  # exact | approximate | reasoned
    index: int
    sentence_index: int

    def to_dict(self) -> dict:
        return {"kind": self.kind, "index": self.index, "sentence_index": self.sentence_index}


@dataclass(frozen=True)
class CommonSummary:
    sentences: tuple[str, ...]
    match_set: MatchSet
    reasoned: tuple[ReasonedCommonality, ...]
    trace: tuple[TraceEntry, ...]
    differences: tuple[str, ...] = ()
    no_applicable_guideline: bool = False

    def text(self) -> str:
        return " ".join(self.sentences)

    def to_dict(self) -> dict:
        return {
            "sentences": list(self.sentences),
            "match_set": self.match_set.to_dict(),
            "reasoned": [r.to_dict() for r in self.reasoned],
            "trace": [t.to_dict() for t in self.trace],
            "differences": list(self.differences),
            "no_applicable_guideline": self.no_applicable_guideline,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "CommonSummary":
        return cls(
            sentences=tuple(data["sentences"]),
            match_set=MatchSet.from_dict(data["match_set"]),
            reasoned=tuple(ReasonedCommonality.from_dict(r) for r in data["reasoned"]),
            trace=tuple(TraceEntry(**t) for t in data["trace"]),
            differences=tuple(data.get("differences", ())),
            no_applicable_guideline=data.get("no_applicable_guideline", False),
        )


def _listing(pairs: list[tuple[str, str]]) -> str:
    return "; ".join(f"{k}: {v}" for k, v in pairs) if pairs else "-"


def _metadata_listing(profile: ChildProfile) -> str:
    pairs = [(t.category.name, t.value) for t in profile.metadata_tags()]
    pairs.append(("Proficiency", profile.proficiency))
    pairs.append(("Learning", profile.learning_language))
    return _listing(pairs)


def expand_preferences(profile: ChildProfile, guidelines: list[Guideline]) -> list[InferredPreference]:
    """Expand broad preference tags into candidate specifics via guidelines.

    Every candidate is flagged inferred so the coordinator can veto it before
    it influences anything beyond summary hints.
    """
    hints: list[InferredPreference] = []
    seen: set[str] = set()
    for guideline in guidelines:
        if guideline.expansions is None or not guideline.applicable(profile):
            continue
        for tag in profile.preference_tags():
            candidates = guideline.expansions.get(tag.value.casefold())
            if not candidates:
                continue
            for candidate in candidates:
                if candidate.casefold() in seen:
                    continue
                seen.add(candidate.casefold())
                hints.append(
                    InferredPreference(
                        value=candidate,
                        source_tag_value=tag.value,
                        guideline_id=guideline.guideline_id,
                    )
                )
    return hints


def summarize_individual(
    profile: ChildProfile,
    gateway: GenerationGateway,
    templates: dict[str, PromptTemplate],
    guidelines: list[Guideline] | None = None,
    max_attempts: int = 2,
) -> IndividualSummary:
    """Summarize one child as descriptive sentences usable as prompt text.

    The reply must mention every like-polarity preference tag and state the
    proficiency level; a non-conforming reply is regenerated once.
    """
    hints = expand_preferences(profile, guidelines or [])
    variables = {
        "child_name": profile.display_name,
        "metadata": _listing([(t.category.name, t.value) for t in profile.metadata_tags()]),
        "preferences": _listing([(t.category.name, t.value) for t in profile.preference_tags()]),
        "dislikes": _listing([(t.category.name, t.value) for t in profile.dislike_tags()]),
        "native_language": profile.native_language,
        "learning_language": profile.learning_language,
        "proficiency": profile.proficiency,
        "inferred_hints": ", ".join(h.value for h in hints) if hints else "-",
    }
    prompt = render_template(templates["individual_summary"], variables)
    last_issue = ""
    for _ in range(max_attempts):
        try:
            reply = gateway.complete(prompt, SUMMARY_SCHEMA)
        except (ProviderError, MalformedOutput) as exc:
            raise GenerationUnavailable(str(exc)) from exc
        sentences = tuple(item["text"] for item in reply["sentences"])
        sources = tuple(tuple(item["source_tags"]) for item in reply["sentences"])
        joined = " ".join(sentences).casefold()
        missing = [t.value for t in profile.preference_tags() if t.value.casefold() not in joined]
        if missing:
            last_issue = f"summary does not mention preference tags: {missing}"
            continue
        if profile.proficiency.casefold() not in joined:
            last_issue = "summary does not state the proficiency level"
            continue
        return IndividualSummary(child_id=profile.child_id, sentences=sentences, source_tags=sources)
    raise GenerationUnavailable(last_issue or "summary generation failed")


def _exact_matches(a: ChildProfile, b: ChildProfile) -> tuple[list[ExactMatch], set[tuple], set[tuple]]:
    """Shared (category, value) tags; dislike tags never participate."""
    a_by_key = {(t.category.name, t.value.casefold()): t for t in a.tags if t.polarity == "like"}
    b_by_key = {(t.category.name, t.value.casefold()): t for t in b.tags if t.polarity == "like"}
    matches: list[ExactMatch] = []
    matched_a: set[tuple] = set()
    matched_b: set[tuple] = set()
    for key, tag_a in a_by_key.items():
        tag_b = b_by_key.get(key)
        if tag_b is None:
            continue
        # Canonical display value keeps match_tags symmetric in argument order.
        value = min(tag_a.value, tag_b.value)
        matches.append(ExactMatch(category=key[0], value=value))
        matched_a.add(key)
        matched_b.add(key)
    matches.sort(key=lambda m: (m.category, m.value))
    return matches, matched_a, matched_b


def _candidate_pairs(a: ChildProfile, b: ChildProfile, matched_a: set, matched_b: set) -> list[tuple[Tag, Tag]]:
    """Unmatched preference-tag pairs, across preference categories.

    Metadata only ever matches exactly; semantic closeness of metadata (7 vs 8
    years old) is the reasoner's job, not the categorizer's.
    """
    def unmatched(profile: ChildProfile, matched: set) -> list[Tag]:
        return [
            t
            for t in profile.preference_tags()
            if (t.category.name, t.value.casefold()) not in matched
        ]

    pairs = [
        (tag_a, tag_b)
        for tag_a in unmatched(a, matched_a)
        for tag_b in unmatched(b, matched_b)
    ]
    pairs.sort(key=lambda p: (p[0].value.casefold(), p[1].value.casefold()))
    return pairs


def match_tags(
    a: ChildProfile,
    b: ChildProfile,
    gateway: GenerationGateway,
    templates: dict[str, PromptTemplate],
) -> MatchSet:
    """Exact matching locally; approximate matching in one batched gateway call."""
    exact, matched_a, matched_b = _exact_matches(a, b)
    pairs = _candidate_pairs(a, b, matched_a, matched_b)
    if not pairs:
        return MatchSet(exact=tuple(exact), approximate=())

    variables = {
        "child_a": a.display_name,
        "child_b": b.display_name,
        "pairs": "\n".join(f"- {ta.value} | {tb.value}" for ta, tb in pairs),
    }
    prompt = render_template(templates["tag_match"], variables)
    try:
        reply = gateway.complete(prompt, MATCH_SCHEMA)
    except (ProviderError, MalformedOutput) as exc:
        logger.warning("approximate matching degraded: %s", exc)
        return MatchSet(exact=tuple(exact), approximate=(), degraded=True)

    by_values = {(p[0].value, p[1].value): p for p in pairs}
    approximate = []
    for item in reply["pairs"]:
        if item["label"] == "no-match":
            continue
        pair = by_values.get((item["a"], item["b"]))
        if pair is None:
            continue
        tag_a, tag_b = pair
        approximate.append(
            ApproximateMatch(
                unified_category_label=item["label"],
                a=TagRef(category=tag_a.category.name, value=tag_a.value),
                b=TagRef(category=tag_b.category.name, value=tag_b.value),
            )
        )
    return MatchSet(
        exact=tuple(exact),
        approximate=tuple(approximate),
        differences=tuple(reply.get("differences", ())),
    )


def reason_commonalities(
    a: ChildProfile,
    b: ChildProfile,
    guidelines: list[Guideline],
    gateway: GenerationGateway,
    templates: dict[str, PromptTemplate],
) -> ReasoningOutcome:
    """Guideline-driven inference; only guidelines applicable to both apply."""
    applicable = [g for g in guidelines if g.applicable(a) and g.applicable(b)]
    if not applicable:
        return ReasoningOutcome(commonalities=(), no_applicable_guideline=True)

    variables = {
        "metadata_a": _metadata_listing(a),
        "metadata_b": _metadata_listing(b),
        "guidelines": "\n".join(f"- {g.guideline_id} | {g.kind} | {g.rule_text}" for g in applicable),
    }
    prompt = render_template(templates["common_reasoning"], variables)
    try:
        reply = gateway.complete(prompt, REASONING_SCHEMA)
    except (ProviderError, MalformedOutput) as exc:
        raise GenerationUnavailable(str(exc)) from exc

    allowed = {g.guideline_id for g in applicable}
    commonalities = tuple(
        ReasonedCommonality(
            statement=item["statement"],
            guideline_id=item["guideline_id"],
            evidence=tuple(item["evidence"]),
        )
        for item in reply["commonalities"]
        if item["guideline_id"] in allowed
    )
    return ReasoningOutcome(commonalities=commonalities)


def compose_common_summary(
    match_set: MatchSet,
    reasoned: tuple[ReasonedCommonality, ...],
    no_applicable_guideline: bool = False,
) -> CommonSummary:
    """Order sentences exact -> approximate -> reasoned with a total trace map."""
    sentences: list[str] = []
    trace: list[TraceEntry] = []
    for i, match in enumerate(match_set.exact):
        sentences.append(f"Both children share {match.category}: {match.value}.")
        trace.append(TraceEntry(kind="exact", index=i, sentence_index=len(sentences) - 1))
    for i, match in enumerate(match_set.approximate):
        sentences.append(
            f"Their interests meet around {match.unified_category_label} "
            f"({match.a.value} / {match.b.value})."
        )
        trace.append(TraceEntry(kind="approximate", index=i, sentence_index=len(sentences) - 1))
    for i, item in enumerate(reasoned):
        sentences.append(item.statement if item.statement.endswith(".") else item.statement + ".")
        trace.append(TraceEntry(kind="reasoned", index=i, sentence_index=len(sentences) - 1))
    return CommonSummary(
        sentences=tuple(sentences),
        match_set=match_set,
        reasoned=tuple(reasoned),
        trace=tuple(trace),
        differences=match_set.differences,
        no_applicable_guideline=no_applicable_guideline,
    )
