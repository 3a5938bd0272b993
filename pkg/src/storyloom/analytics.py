"""Response records, the six verbal-engagement metrics, and feature feedback.

Tokenization: Latin-script runs split on word boundaries and lowercased; each
CJK character counts as one token (a desk-scale stand-in — revisit if a word
segmentation guideline is ever supplied). Filler tokens are dropped before a
token ever reaches a record. Means are exact rationals over coded records
only, with coverage reported alongside.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field, replace
from fractions import Fraction

from .errors import GatewayCannotCode, OutOfRange
from .profile import Tag, category

DEFAULT_FILLERS = ("uh", "um", "aha", "er", "hmm", "嗯", "呃", "啊")

CODE_RANGES = {
    "topical_relevance": (0, 2),
    "intelligibility": (0, 2),
    "accuracy": (0, 1),
}

REPETITION_THRESHOLD = 3

_CJK = re.compile(r"[㐀-䶿一-鿿]")
_LATIN_WORD = re.compile(r"[A-Za-z0-9']+")
_CAPITALIZED = re.compile(r"\b[A-Z][a-zA-Z]+\b")

# Sentence-initial / generic capitalized words that are not entity mentions.
_ENTITY_STOPWORDS = {
    "the", "a", "an", "and", "but", "or", "so", "then", "when", "where", "what",
    "who", "why", "how", "yes", "no", "maybe", "he", "she", "it", "they", "we",
    "my", "his", "her", "their", "our", "this", "that", "there", "because",
}


def tokenize(transcript: str, fillers: tuple[str, ...] = DEFAULT_FILLERS) -> list[str]:
    """Lowercased Latin words plus one token per CJK character, fillers removed."""
    filler_set = {f.casefold() for f in fillers}
    tokens: list[str] = []
    for piece in re.findall(r"[A-Za-z0-9']+|[㐀-䶿一-鿿]", transcript):
        if _CJK.match(piece):
            token = piece
        else:
            token = piece.casefold()
        if token in filler_set:
            continue
        tokens.append(token)
    return tokens


@dataclass(frozen=True)
class ResponseRecord:
    record_id: str
    question_id: str
    child_id: str
    transcript: str
    tokens: tuple[str, ...]
    manual_codes: dict[str, int] = field(default_factory=dict)
    auto_codes: dict[str, int] = field(default_factory=dict)  # always suggested=true

    def effective_code(self, dimension: str) -> int | None:
        """Coordinator codes win; gateway values only fill gaps."""
        if dimension in self.manual_codes:
            return self.manual_codes[dimension]
        return self.auto_codes.get(dimension)

    def to_dict(self) -> dict:
        return {
            "record_id": self.record_id,
            "question_id": self.question_id,
            "child_id": self.child_id,
            "transcript": self.transcript,
            "tokens": list(self.tokens),
            "manual_codes": dict(self.manual_codes),
            "auto_codes": {k: {"value": v, "suggested": True} for k, v in self.auto_codes.items()},
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ResponseRecord":
        return cls(
            record_id=data["record_id"],
            question_id=data["question_id"],
            child_id=data["child_id"],
            transcript=data["transcript"],
            tokens=tuple(data["tokens"]),
            manual_codes=dict(data.get("manual_codes", {})),
            auto_codes={k: v["value"] for k, v in data.get("auto_codes", {}).items()},
        )


def make_record(
    record_id: str,
    question_id: str,
    child_id: str,
    transcript: str,
    manual_codes: dict[str, int] | None = None,
    fillers: tuple[str, ...] = DEFAULT_FILLERS,
) -> ResponseRecord:
    codes = dict(manual_codes or {})
    for dimension, value in codes.items():
        _check_code(dimension, value)
    return ResponseRecord(
        record_id=record_id,
        question_id=question_id,
        child_id=child_id,
        transcript=transcript,
        tokens=tuple(tokenize(transcript, fillers)),
        manual_codes=codes,
    )


def _check_code(dimension: str, value: int) -> None:
    if dimension not in CODE_RANGES:
        raise OutOfRange(f"unknown coding dimension: {dimension!r}")
    low, high = CODE_RANGES[dimension]
    if not isinstance(value, int) or not low <= value <= high:
        raise OutOfRange(f"{dimension} must be an integer in {low}..{high}, got {value!r}")


def code_response(record: ResponseRecord, dimension: str, value: int, by: str) -> ResponseRecord:
    """Apply a code; suggestions never overwrite coordinator codes."""
    _check_code(dimension, value)
    if by == "gateway_suggestion":
        if dimension == "intelligibility":
            raise GatewayCannotCode("intelligibility is coordinator-only")
        auto = dict(record.auto_codes)
        auto[dimension] = value
        return replace(record, auto_codes=auto)
    manual = dict(record.manual_codes)
    manual[dimension] = value
    return replace(record, manual_codes=manual)


@dataclass(frozen=True)
class MetricMean:
    """Exact rational mean plus how many records carried the code."""

    numerator: int
    denominator: int
    coded: int
    total: int
    suggested_used: int = 0

    @property
    def value(self) -> Fraction | None:
        return Fraction(self.numerator, self.denominator) if self.denominator else None

    def to_dict(self) -> dict:
        return {
            "numerator": self.numerator,
            "denominator": self.denominator,
            "coded": self.coded,
            "total": self.total,
            "suggested_used": self.suggested_used,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "MetricMean":
        return cls(**data)


@dataclass(frozen=True)
class EngagementMetrics:
    child_id: str
    questions_answered: int
    productivity: int
    lexical_diversity: int
    topical_relevance_mean: MetricMean
    intelligibility_mean: MetricMean
    accuracy_mean: MetricMean
    per_attribute_counts: dict[str, int]

    def to_dict(self) -> dict:
        return {
            "child_id": self.child_id,
            "questions_answered": self.questions_answered,
            "productivity": self.productivity,
            "lexical_diversity": self.lexical_diversity,
            "topical_relevance_mean": self.topical_relevance_mean.to_dict(),
            "intelligibility_mean": self.intelligibility_mean.to_dict(),
            "accuracy_mean": self.accuracy_mean.to_dict(),
            "per_attribute_counts": dict(self.per_attribute_counts),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "EngagementMetrics":
        return cls(
            child_id=data["child_id"],
            questions_answered=data["questions_answered"],
            productivity=data["productivity"],
            lexical_diversity=data["lexical_diversity"],
            topical_relevance_mean=MetricMean.from_dict(data["topical_relevance_mean"]),
            intelligibility_mean=MetricMean.from_dict(data["intelligibility_mean"]),
            accuracy_mean=MetricMean.from_dict(data["accuracy_mean"]),
            per_attribute_counts=dict(data["per_attribute_counts"]),
        )


def _mean_over(records: list[ResponseRecord], dimension: str) -> MetricMean:
    values = []
    suggested = 0
    for record in records:
        value = record.effective_code(dimension)
        if value is None:
            continue
        values.append(value)
        if dimension not in record.manual_codes:
            suggested += 1
    if not values:
        return MetricMean(numerator=0, denominator=0, coded=0, total=len(records))
    total = sum(values)
    mean = Fraction(total, len(values))
    return MetricMean(
        numerator=mean.numerator,
        denominator=mean.denominator,
        coded=len(values),
        total=len(records),
        suggested_used=suggested,
    )


def compute_engagement(
    records: list[ResponseRecord],
    child_id: str,
    attribute_of: dict[str, str] | None = None,
    attributes: tuple[str, ...] = (),
) -> EngagementMetrics:
    """Six metrics over one child's records; empty input gives all zeros.

    Deterministic and order-independent: records are sorted by record_id
    before aggregation so permutations of the input cannot matter.
    """
    mine = sorted((r for r in records if r.child_id == child_id), key=lambda r: r.record_id)
    productivity = sum(len(r.tokens) for r in mine)
    distinct: set[str] = set()
    for record in mine:
        distinct.update(record.tokens)
    per_attribute = {attr: 0 for attr in attributes}
    if attribute_of:
        for record in mine:
            attr = attribute_of.get(record.question_id)
            if attr is not None:
                per_attribute[attr] = per_attribute.get(attr, 0) + 1
    return EngagementMetrics(
        child_id=child_id,
        questions_answered=len(mine),
        productivity=productivity,
        lexical_diversity=len(distinct),
        topical_relevance_mean=_mean_over(mine, "topical_relevance"),
        intelligibility_mean=_mean_over(mine, "intelligibility"),
        accuracy_mean=_mean_over(mine, "accuracy"),
        per_attribute_counts=per_attribute,
    )


@dataclass(frozen=True)
class FeatureFeedback:
    child_id: str
    entity: str
    occurrences: int
    proposal: Tag
    evidence: tuple[str, ...]  # record ids

    def to_dict(self) -> dict:
        return {
            "child_id": self.child_id,
            "entity": self.entity,
            "occurrences": self.occurrences,
            "proposal": self.proposal.to_dict(),
            "evidence": list(self.evidence),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "FeatureFeedback":
        return cls(
            child_id=data["child_id"],
            entity=data["entity"],
            occurrences=data["occurrences"],
            proposal=Tag.from_dict(data["proposal"]),
            evidence=tuple(data["evidence"]),
        )


def derive_feature_feedback(
    records: list[ResponseRecord],
    child_id: str,
    threshold: int = REPETITION_THRESHOLD,
) -> list[FeatureFeedback]:
    """Entities a child keeps mentioning become preference-tag proposals.

    Candidate entities are capitalized Latin words in the raw transcripts,
    counted case-insensitively; proposals carry origin=feedback and need the
    coordinator's approval before any profile change.
    """
    mine = sorted((r for r in records if r.child_id == child_id), key=lambda r: r.record_id)
    counts: dict[str, int] = {}
    display: dict[str, str] = {}
    evidence: dict[str, list[str]] = {}
    for record in mine:
        seen_here: set[str] = set()
        for match in _CAPITALIZED.findall(record.transcript):
            key = match.casefold()
            if key in _ENTITY_STOPWORDS or match == "I":
                continue
            counts[key] = counts.get(key, 0) + 1
            display.setdefault(key, match)
            if key not in seen_here:
                evidence.setdefault(key, []).append(record.record_id)
                seen_here.add(key)
    feedback = []
    for key in sorted(counts):
        if counts[key] < threshold:
            continue
        entity = display[key]
        feedback.append(
            FeatureFeedback(
                child_id=child_id,
                entity=entity,
                occurrences=counts[key],
                proposal=Tag(category("PreferredContent"), entity, "like", "feedback"),
                evidence=tuple(evidence[key]),
            )
        )
    return feedback


def propose_profile_updates(feedback: list[FeatureFeedback]) -> list[Tag]:
    return [f.proposal for f in feedback]


@dataclass(frozen=True)
class EngagementReport:
    metrics: tuple[EngagementMetrics, ...]
    answered_questions: dict[str, tuple[tuple[str, str], ...]]  # child -> (question_id, text)
    feedback: tuple[FeatureFeedback, ...]
    read_only: bool = True

    def to_dict(self) -> dict:
        return {
            "metrics": [m.to_dict() for m in self.metrics],
            "answered_questions": {
                child: [[qid, text] for qid, text in pairs]
                for child, pairs in self.answered_questions.items()
            },
            "feedback": [f.to_dict() for f in self.feedback],
            "read_only": self.read_only,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "EngagementReport":
        return cls(
            metrics=tuple(EngagementMetrics.from_dict(m) for m in data["metrics"]),
            answered_questions={
                child: tuple((qid, text) for qid, text in pairs)
                for child, pairs in data["answered_questions"].items()
            },
            feedback=tuple(FeatureFeedback.from_dict(f) for f in data["feedback"]),
            read_only=data.get("read_only", True),
        )


def _format_mean(mean: MetricMean, scale: str) -> str:
    if mean.denominator == 0:
        return f"- (uncoded, 0/{mean.total})"
    value = Fraction(mean.numerator, mean.denominator)
    approx = f"{float(value):.2f}"
    note = f", {mean.suggested_used} suggested" if mean.suggested_used else ""
    return f"{mean.numerator}/{mean.denominator} (= {approx} of {scale}; coded {mean.coded}/{mean.total}{note})"


def render_report_text(report: EngagementReport, display_names: dict[str, str] | None = None) -> str:
    """Plain-text summary: metrics, answered questions, feedback proposals."""
    names = display_names or {}
    lines = ["ENGAGEMENT REVIEW", "================="]
    for metrics in report.metrics:
        name = names.get(metrics.child_id, metrics.child_id)
        lines.append("")
        lines.append(f"Child: {name}")
        lines.append(f"  questions answered : {metrics.questions_answered}")
        lines.append(f"  productivity       : {metrics.productivity} words")
        lines.append(f"  lexical diversity  : {metrics.lexical_diversity} unique words")
        lines.append(f"  topical relevance  : {_format_mean(metrics.topical_relevance_mean, '0-2')}")
        lines.append(f"  intelligibility    : {_format_mean(metrics.intelligibility_mean, '0-2')}")
        lines.append(f"  accuracy           : {_format_mean(metrics.accuracy_mean, '0-1')}")
        lines.append("  answered by attribute:")
        for attribute, count in metrics.per_attribute_counts.items():
            lines.append(f"    {attribute:20s} {count}")
        answered = report.answered_questions.get(metrics.child_id, ())
        lines.append("  answered questions:")
        if answered:
            for qid, text in answered:
                lines.append(f"    [{qid}] {text}")
        else:
            lines.append("    (none)")
    lines.append("")
    lines.append("FEATURE FEEDBACK")
    lines.append("----------------")
    if report.feedback:
        for item in report.feedback:
            name = names.get(item.child_id, item.child_id)
            lines.append(
                f"  {name}: repeated mentions of '{item.entity}' x{item.occurrences} -> "
                f"propose tag {item.proposal.category.name}={item.proposal.value} (origin=feedback)"
            )
    else:
        lines.append("  (no repeated entities crossed the threshold)")
    lines.append("")
    lines.append("All values above are read-only references; coordinator judgment prevails.")
    return "\n".join(lines) + "\n"
