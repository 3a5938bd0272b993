"""Session state: phase machine, roles, fairness ledger, append-only events.

Phases run forward-only: Preparation -> Framework -> Cloze -> Adaptation ->
Extension -> Review. The absolute-fairness allocator keeps per-child selected
question counts within one of each other; overrides are possible but recorded.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .analytics import EngagementReport, ResponseRecord
from .characteristics import CommonSummary, IndividualSummary
from .errors import GuardFailed, IllegalTransition, InvalidConfig
from .materials import Material
from .profile import SessionConfig, TargetWordSet
from .questions import GeneratedQuestion
from .story import ClozeStory, ProvenanceEntry, StoryFramework

PHASES = ("Preparation", "Framework", "Cloze", "Adaptation", "Extension", "Review")

SNAPSHOT_SCHEMA_VERSION = 1

# Suggested Extension pacing: two rounds per child. The coordinator ends the
# phase by advancing to Review whenever they choose; nothing enforces this.
DEFAULT_EXTENSION_ROUNDS_PER_CHILD = 2


@dataclass(frozen=True)
class Event:
    seq: int
    timestamp: int
    kind: str
    payload: dict
    visibility: str  # "all" | "coordinator_only"

    def to_dict(self) -> dict:
        return {
            "seq": self.seq,
            "timestamp": self.timestamp,
            "kind": self.kind,
            "payload": self.payload,
            "visibility": self.visibility,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Event":
        return cls(
            seq=data["seq"],
            timestamp=data["timestamp"],
            kind=data["kind"],
            payload=data["payload"],
            visibility=data["visibility"],
        )


@dataclass(frozen=True)
class RoleAssignment:
    storyteller: str
    storylistener: str
    round: int = 0

    def __post_init__(self):
        if self.storyteller == self.storylistener:
            raise InvalidConfig("storyteller and storylistener must differ")

    def swapped(self) -> "RoleAssignment":
        return RoleAssignment(
            storyteller=self.storylistener,
            storylistener=self.storyteller,
            round=self.round + 1,
        )

    def to_dict(self) -> dict:
        return {"storyteller": self.storyteller, "storylistener": self.storylistener, "round": self.round}

    @classmethod
    def from_dict(cls, data: dict) -> "RoleAssignment":
        return cls(**data)


@dataclass
class TurnLedger:
    questions_selected: dict[str, int] = field(default_factory=dict)
    overrides: list[dict] = field(default_factory=list)
    blanks_assigned: dict[str, int] = field(default_factory=dict)
    last_selected_seq: dict[str, int] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "questions_selected": dict(self.questions_selected),
            "overrides": list(self.overrides),
            "blanks_assigned": dict(self.blanks_assigned),
            "last_selected_seq": dict(self.last_selected_seq),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "TurnLedger":
        return cls(
            questions_selected=dict(data["questions_selected"]),
            overrides=list(data["overrides"]),
            blanks_assigned=dict(data["blanks_assigned"]),
            last_selected_seq=dict(data["last_selected_seq"]),
        )


@dataclass
class Utterance:
    utterance_id: str
    child_id: str
    text: str

    def to_dict(self) -> dict:
        return {"utterance_id": self.utterance_id, "child_id": self.child_id, "text": self.text}

    @classmethod
    def from_dict(cls, data: dict) -> "Utterance":
        return cls(**data)


@dataclass
class SessionState:
    """Full session aggregate; everything here is derived from the event log."""

    session_id: str
    phase: str
    config: SessionConfig
    roles: RoleAssignment | None
    ledger: TurnLedger
    event_log: list[Event]
    version: int
    participants: list[str] = field(default_factory=list)
    summaries: dict[str, IndividualSummary] = field(default_factory=dict)
    common_summary: CommonSummary | None = None
    frameworks: dict[str, StoryFramework] = field(default_factory=dict)
    active_framework_id: str | None = None
    story_prompt: dict | None = None  # template_id / variables / text of the framework prompt
    cloze: ClozeStory | None = None
    provenance: list[ProvenanceEntry] = field(default_factory=list)
    questions: dict[str, GeneratedQuestion] = field(default_factory=dict)
    utterances: dict[str, Utterance] = field(default_factory=dict)
    extensions_this_round: int = 0
    materials: dict[str, Material] = field(default_factory=dict)
    records: dict[str, ResponseRecord] = field(default_factory=dict)
    report: EngagementReport | None = None

    def child_ids(self) -> tuple[str, str]:
        return self.config.child_ids()

    def to_dict(self) -> dict:
        return {
            "session_id": self.session_id,
            "phase": self.phase,
            "config": self.config.to_dict(),
            "roles": self.roles.to_dict() if self.roles else None,
            "ledger": self.ledger.to_dict(),
            "event_log": [e.to_dict() for e in self.event_log],
            "version": self.version,
            "participants": list(self.participants),
            "summaries": {k: v.to_dict() for k, v in self.summaries.items()},
            "common_summary": self.common_summary.to_dict() if self.common_summary else None,
            "frameworks": {k: v.to_dict() for k, v in self.frameworks.items()},
            "active_framework_id": self.active_framework_id,
            "story_prompt": self.story_prompt,
            "cloze": self.cloze.to_dict() if self.cloze else None,
            "provenance": [e.to_dict() for e in self.provenance],
            "questions": {k: v.to_dict() for k, v in self.questions.items()},
            "utterances": {k: v.to_dict() for k, v in self.utterances.items()},
            "extensions_this_round": self.extensions_this_round,
            "materials": {k: v.to_dict() for k, v in self.materials.items()},
            "records": {k: v.to_dict() for k, v in self.records.items()},
            "report": self.report.to_dict() if self.report else None,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SessionState":
        return cls(
            session_id=data["session_id"],
            phase=data["phase"],
            config=SessionConfig.from_dict(data["config"]),
            roles=RoleAssignment.from_dict(data["roles"]) if data.get("roles") else None,
            ledger=TurnLedger.from_dict(data["ledger"]),
            event_log=[Event.from_dict(e) for e in data["event_log"]],
            version=data["version"],
            participants=list(data["participants"]),
            summaries={k: IndividualSummary.from_dict(v) for k, v in data["summaries"].items()},
            common_summary=CommonSummary.from_dict(data["common_summary"]) if data.get("common_summary") else None,
            frameworks={k: StoryFramework.from_dict(v) for k, v in data["frameworks"].items()},
            active_framework_id=data.get("active_framework_id"),
            story_prompt=data.get("story_prompt"),
            cloze=ClozeStory.from_dict(data["cloze"]) if data.get("cloze") else None,
            provenance=[ProvenanceEntry.from_dict(e) for e in data["provenance"]],
            questions={k: GeneratedQuestion.from_dict(v) for k, v in data["questions"].items()},
            utterances={k: Utterance.from_dict(v) for k, v in data["utterances"].items()},
            extensions_this_round=data.get("extensions_this_round", 0),
            materials={k: Material.from_dict(v) for k, v in data["materials"].items()},
            records={k: ResponseRecord.from_dict(v) for k, v in data["records"].items()},
            report=EngagementReport.from_dict(data["report"]) if data.get("report") else None,
        )


def check_transition(state: SessionState, target: str) -> None:
    """Raise unless ``target`` is the immediate successor and its guard holds."""
    if target not in PHASES:
        raise IllegalTransition(f"unknown phase: {target!r}")
    current_index = PHASES.index(state.phase)
    target_index = PHASES.index(target)
    if target_index != current_index + 1:
        raise IllegalTransition(f"{state.phase} -> {target} is not a forward step")
    if target == "Framework":
        if state.config.target_words is None:
            raise GuardFailed("target words not configured")
    elif target == "Cloze":
        framework = state.frameworks.get(state.active_framework_id or "")
        if framework is None or framework.status != "confirmed":
            raise GuardFailed("framework not confirmed")
    elif target == "Adaptation":
        if state.cloze is None or state.cloze.status != "completed":
            raise GuardFailed("cloze not completed")
    # Extension and Review have no additional guards.


def next_respondent(state: SessionState) -> str:
    """Absolute-fairness pick: lower selected count, ties to the less recent.

    A completely fresh ledger prefers the child assigned blank 1 when a cloze
    exists, else the first configured child. Pure query; no state change.
    """
    a, b = state.child_ids()
    counts = state.ledger.questions_selected
    count_a, count_b = counts.get(a, 0), counts.get(b, 0)
    if count_a != count_b:
        return a if count_a < count_b else b
    last = state.ledger.last_selected_seq
    last_a, last_b = last.get(a), last.get(b)
    if last_a is None and last_b is None:
        if state.cloze is not None and state.cloze.blanks:
            first = state.cloze.blanks[0].assigned_child
            if first:
                return first
        return a
    if last_a is None:
        return a
    if last_b is None:
        return b
    return a if last_a < last_b else b
