"""Single-writer session engine: commands in, events out, state derived.

Every mutating command is validated against current state, may consult the
generation gateway, and produces exactly one event. Applying events is pure —
no gateway, no clock — so replaying the log from ``session_opened``
reproduces the final state bit for bit, and a snapshot is just the state plus
its log.
"""

from __future__ import annotations

import copy
import queue
import threading
from dataclasses import dataclass, replace

from . import analytics, characteristics, materials, questions, story
from .characteristics import Guideline
from .errors import (
    AlreadyFilled,
    AlternationViolation,
    EmptyInput,
    IllegalTransition,
    InvalidConfig,
    InvariantViolation,
    NoContributionYet,
    NotStoryteller,
    FairnessViolation,
    QuestionNotSelected,
    SchemaMismatch,
    UnknownCommand,
    UnknownMaterial,
    UnknownParticipant,
    UnknownQuestion,
    WordNotFound,
    WrongChild,
    WrongPhase,
    WrongStatus,
)
from .gateway import GenerationGateway, PromptTemplate, RenderedPrompt, render_template
from .profile import ChildProfile, SessionConfig, TargetWordSet
from .session import (
    PHASES,
    SNAPSHOT_SCHEMA_VERSION,
    Event,
    RoleAssignment,
    SessionState,
    TurnLedger,
    Utterance,
    check_transition,
    next_respondent,
)

# Children see shared-panel traffic only; everything supporting the
# coordinator's judgment stays on their side of the table.
EVENT_VISIBILITY = {
    "session_opened": "all",
    "participant_joined": "all",
    "profile_upserted": "coordinator_only",
    "target_words_set": "coordinator_only",
    "individual_summarized": "coordinator_only",
    "summary_edited": "coordinator_only",
    "common_summarized": "coordinator_only",
    "phase_advanced": "all",
    "framework_generated": "coordinator_only",
    "paragraph_edited": "coordinator_only",
    "framework_confirmed": "coordinator_only",
    "cloze_created": "all",
    "questions_generated": "coordinator_only",
    "question_selected": "all",
    "question_skipped": "coordinator_only",
    "blank_filled": "all",
    "material_generated": "coordinator_only",
    "material_presented": "all",
    "utterance_recorded": "all",
    "extension_appended": "all",
    "adaptation_edited": "all",
    "roles_rotated": "all",
    "response_recorded": "all",
    "codes_suggested": "coordinator_only",
    "response_coded": "coordinator_only",
    "report_built": "coordinator_only",
}

# The one child-permitted command besides join is answering; see service.
CHILD_COMMANDS = frozenset({"join", "submit_answer_transcript"})


@dataclass(frozen=True)
class CommandResult:
    version: int
    event: Event | None
    result: dict | None = None
    warning: str | None = None


@dataclass(frozen=True)
class StreamFrame:
    seq: int  # per-subscriber delivery counter, gap-free from 1
    event: Event

    def to_dict(self) -> dict:
        return {"seq": self.seq, "event": self.event.to_dict()}


class Subscription:
    """Role-filtered, ordered event feed for one subscriber."""

    def __init__(self, role: str, backlog: list[Event], since: int):
        self.role = role
        self._queue: queue.Queue = queue.Queue()
        self._delivered = 0
        for event in backlog:
            if event.seq > since:
                self.push(event)

    def visible(self, event: Event) -> bool:
        return self.role == "coordinator" or event.visibility == "all"

    def push(self, event: Event) -> None:
        if not self.visible(event):
            return
        self._delivered += 1
        self._queue.put(StreamFrame(seq=self._delivered, event=event))

    def drain(self) -> list[StreamFrame]:
        frames = []
        while True:
            try:
                frames.append(self._queue.get_nowait())
            except queue.Empty:
                return frames

    def get(self, timeout: float | None = None) -> StreamFrame | None:
        try:
            return self._queue.get(timeout=timeout)
        except queue.Empty:
            return None


class SessionEngine:
    def __init__(
        self,
        state: SessionState,
        gateway: GenerationGateway | None,
        templates: dict[str, PromptTemplate],
        guidelines: list[Guideline],
        clock=None,
    ):
        self._state = state
        self.gateway = gateway
        self.templates = templates
        self.guidelines = guidelines
        self._clock = clock
        self._lock = threading.RLock()
        self._subscribers: list[Subscription] = []

    # --- lifecycle -----------------------------------------------------------

    @classmethod
    def open(
        cls,
        config: SessionConfig,
        gateway: GenerationGateway | None,
        templates: dict[str, PromptTemplate],
        guidelines: list[Guideline],
        session_id: str = "session-1",
        clock=None,
    ) -> "SessionEngine":
        state = SessionState(
            session_id=session_id,
            phase="Preparation",
            config=config,
            roles=None,
            ledger=TurnLedger(),
            event_log=[],
            version=0,
        )
        engine = cls(state, gateway, templates, guidelines, clock=clock)
        engine._emit(
            "session_opened",
            {"session_id": session_id, "config": config.to_dict()},
        )
        return engine

    @classmethod
    def replay(
        cls,
        events: list[Event],
        gateway: GenerationGateway | None = None,
        templates: dict[str, PromptTemplate] | None = None,
        guidelines: list[Guideline] | None = None,
        clock=None,
    ) -> "SessionEngine":
        """Rebuild state purely from an event log; no gateway calls happen."""
        if not events or events[0].kind != "session_opened":
            raise InvalidConfig("event log must start with session_opened")
        opened = events[0]
        state = SessionState(
            session_id=opened.payload["session_id"],
            phase="Preparation",
            config=SessionConfig.from_dict(opened.payload["config"]),
            roles=None,
            ledger=TurnLedger(),
            event_log=[],
            version=0,
        )
        engine = cls(state, gateway, templates or {}, guidelines or [], clock=clock)
        for event in events:
            expected = engine._state.version + 1
            if event.seq != expected:
                raise InvalidConfig(f"event log gap: expected seq {expected}, got {event.seq}")
            engine._apply(event)
        return engine

    # --- reads -----------------------------------------------------------------

    def snapshot(self) -> SessionState:
        """Immutable (deep-copied) view of the current state."""
        with self._lock:
            return copy.deepcopy(self._state)

    @property
    def state(self) -> SessionState:
        return self._state

    def next_respondent(self) -> str:
        with self._lock:
            return next_respondent(self._state)

    def storybook(self) -> story.Storybook:
        with self._lock:
            return _storybook(self._state)

    def subscribe(self, role: str, since: int = 0) -> Subscription:
        with self._lock:
            subscription = Subscription(role, self._state.event_log, since)
            self._subscribers.append(subscription)
            return subscription

    def unsubscribe(self, subscription: Subscription) -> None:
        with self._lock:
            if subscription in self._subscribers:
                self._subscribers.remove(subscription)

    # --- command execution ---------------------------------------------------------

    def execute(self, command: str, args: dict | None = None) -> CommandResult:
        args = args or {}
        with self._lock:
            handler = _HANDLERS.get(command)
            if handler is None:
                raise UnknownCommand(f"unknown command: {command!r}")
            calls_before = self.gateway.call_count if self.gateway else 0
            outcome = handler(self, self._state, args)
            if outcome is None:  # validated no-op
                return CommandResult(version=self._state.version, event=None, warning=args.get("_warning"))
            kind, payload, result, warning = outcome
            calls_after = self.gateway.call_count if self.gateway else 0
            if calls_after > calls_before:
                # Deterministic across record/replay: the same command makes
                # the same gateway calls in the same order.
                payload = {**payload, "correlation_ids": list(range(calls_before + 1, calls_after + 1))}
            event = self._emit(kind, payload)
            return CommandResult(version=self._state.version, event=event, result=result, warning=warning)

    def _emit(self, kind: str, payload: dict) -> Event:
        seq = self._state.version + 1
        timestamp = self._clock() if self._clock else seq
        event = Event(
            seq=seq,
            timestamp=timestamp,
            kind=kind,
            payload=payload,
            visibility=EVENT_VISIBILITY[kind],
        )
        self._apply(event)
        for subscription in self._subscribers:
            subscription.push(event)
        return event

    def _apply(self, event: Event) -> None:
        _APPLIERS[event.kind](self._state, event)
        self._state.event_log.append(event)
        self._state.version = event.seq


# --- snapshots ------------------------------------------------------------------

def make_snapshot(state: SessionState) -> dict:
    return {"schema_version": SNAPSHOT_SCHEMA_VERSION, "state": state.to_dict()}


def load_snapshot(snapshot: dict) -> SessionState:
    if snapshot.get("schema_version") != SNAPSHOT_SCHEMA_VERSION:
        raise SchemaMismatch(f"unsupported snapshot schema_version: {snapshot.get('schema_version')!r}")
    return SessionState.from_dict(snapshot["state"])


def engine_from_snapshot(
    snapshot: dict,
    gateway: GenerationGateway | None,
    templates: dict[str, PromptTemplate],
    guidelines: list[Guideline],
    clock=None,
) -> SessionEngine:
    return SessionEngine(load_snapshot(snapshot), gateway, templates, guidelines, clock=clock)


# --- shared helpers ----------------------------------------------------------------

def _storybook(state: SessionState) -> story.Storybook:
    framework = _confirmed_framework(state)
    return story.build_storybook(framework, state.config.target_words, tuple(state.provenance))


def _confirmed_framework(state: SessionState) -> story.StoryFramework:
    framework = state.frameworks.get(state.active_framework_id or "")
    if framework is None or framework.status != "confirmed":
        raise WrongStatus("no confirmed framework")
    return framework


def _require_phase(state: SessionState, *phases: str) -> None:
    if state.phase not in phases:
        raise WrongPhase(f"command requires phase {' or '.join(phases)}, session is in {state.phase}")


def _child(state: SessionState, child_id: str) -> ChildProfile:
    for child in state.config.children:
        if child.child_id == child_id:
            return child
    raise UnknownParticipant(f"unknown child: {child_id!r}")


def _question_ids(state: SessionState):
    counter = {"n": len(state.questions)}

    def next_id() -> str:
        counter["n"] += 1
        return f"q-{counter['n']:04d}"

    return next_id


# --- command handlers -----------------------------------------------------------------
# Each returns (event_kind, payload, result_dict, warning) or None for a no-op.

def _cmd_join(engine: SessionEngine, state: SessionState, args: dict):
    participant_id = args["participant_id"]
    role = args["role"]
    if role == "coordinator":
        if participant_id != state.config.coordinator_id:
            raise UnknownParticipant(f"{participant_id!r} is not the session coordinator")
    elif role == "child":
        _child(state, participant_id)
    else:
        raise InvalidConfig(f"unknown role: {role!r}")
    return (
        "participant_joined",
        {"participant_id": participant_id, "role": role},
        None,
        "rejoined; prior stream replaced" if participant_id in state.participants else None,
    )


def _cmd_upsert_profile(engine: SessionEngine, state: SessionState, args: dict):
    _require_phase(state, "Preparation", "Review")
    profile = ChildProfile.from_dict({**args["profile"], "version": 1})
    existing = next((c for c in state.config.children if c.child_id == profile.child_id), None)
    if existing is None:
        raise UnknownParticipant(f"profile {profile.child_id!r} is not a session child")
    stored = replace(profile, version=existing.version + 1)
    if stored.learning_language != existing.learning_language:
        raise InvariantViolation("learning_language cannot change mid-session")
    return ("profile_upserted", {"profile": stored.to_dict()}, {"version": stored.version}, None)


def _cmd_set_target_words(engine: SessionEngine, state: SessionState, args: dict):
    _require_phase(state, "Preparation")
    words = TargetWordSet(words_by_language={k: tuple(v) for k, v in args["words_by_language"].items()})
    return ("target_words_set", {"target_words": words.to_dict()}, {"total": words.total()}, None)


def _cmd_summarize_individual(engine: SessionEngine, state: SessionState, args: dict):
    profile = _child(state, args["child_id"])
    summary = characteristics.summarize_individual(
        profile, engine.gateway, engine.templates, engine.guidelines
    )
    existing = state.summaries.get(profile.child_id)
    if existing:
        summary = replace(summary, version=existing.version + 1)
    return ("individual_summarized", {"summary": summary.to_dict()}, None, None)


def _cmd_edit_individual_summary(engine: SessionEngine, state: SessionState, args: dict):
    existing = state.summaries.get(args["child_id"])
    if existing is None:
        raise InvariantViolation(f"no summary for {args['child_id']!r} to edit")
    edited = characteristics.IndividualSummary(
        child_id=args["child_id"],
        sentences=tuple(args["sentences"]),
        source_tags=tuple(tuple(s) for s in args["source_tags"]),
        version=existing.version + 1,
    )
    return ("summary_edited", {"summary": edited.to_dict()}, None, None)


def _cmd_summarize_common(engine: SessionEngine, state: SessionState, args: dict):
    a, b = state.config.children
    match_set = characteristics.match_tags(a, b, engine.gateway, engine.templates)
    outcome = characteristics.reason_commonalities(
        a, b, engine.guidelines, engine.gateway, engine.templates
    )
    common = characteristics.compose_common_summary(
        match_set, outcome.commonalities, no_applicable_guideline=outcome.no_applicable_guideline
    )
    return ("common_summarized", {"common_summary": common.to_dict()}, None, None)


def _cmd_advance_phase(engine: SessionEngine, state: SessionState, args: dict):
    target = args["target"]
    check_transition(state, target)
    payload: dict = {"phase": target}
    if target == "Extension":
        storyteller = args.get("storyteller")
        if storyteller is None:
            storyteller = _default_storyteller(state)
        _child(state, storyteller)
        listener = state.config.other_child(storyteller).child_id
        payload["roles"] = RoleAssignment(storyteller=storyteller, storylistener=listener).to_dict()
    return ("phase_advanced", payload, None, None)


def _default_storyteller(state: SessionState) -> str:
    if state.cloze is not None and state.cloze.blanks:
        assigned = state.cloze.blanks[0].assigned_child
        if assigned:
            return assigned
    return state.config.children[0].child_id


def _framework_prompt(engine: SessionEngine, state: SessionState, paragraph_count: int) -> RenderedPrompt:
    common_sentences = state.common_summary.sentences if state.common_summary else ()
    return story.build_story_prompt(
        common_sentences,
        state.config.target_words,
        state.config,
        engine.templates,
        paragraph_count=paragraph_count,
    )


def _generate_framework_event(engine: SessionEngine, state: SessionState, prompt: RenderedPrompt):
    reply = engine.gateway.complete(prompt, story.STORY_SCHEMA)
    framework_id = f"f-{len(state.frameworks) + 1}"
    draft = story.parse_framework_reply(framework_id, reply)
    report = story.validate_framework(draft.paragraphs, state.config.target_words)
    draft = replace(draft, validation=report)
    payload = {
        "framework": draft.to_dict(),
        "prompt": {
            "template_id": prompt.template_id,
            "bound_variables": prompt.bound_variables,
            "text": prompt.text,
        },
    }
    return ("framework_generated", payload, {"validation": report.to_dict()}, None)


def _cmd_generate_framework(engine: SessionEngine, state: SessionState, args: dict):
    _require_phase(state, "Framework")
    paragraph_count = int(args.get("paragraph_count", story.DEFAULT_PARAGRAPH_COUNT))
    prompt = _framework_prompt(engine, state, paragraph_count)
    return _generate_framework_event(engine, state, prompt)


def _cmd_regenerate(engine: SessionEngine, state: SessionState, args: dict):
    _require_phase(state, "Framework")
    if state.story_prompt is None:
        raise WrongStatus("nothing generated yet; use generate_framework first")
    active = state.frameworks.get(state.active_framework_id or "")
    if active is not None and active.status == "confirmed":
        raise WrongStatus("framework already confirmed")
    prompt = RenderedPrompt(
        template_id=state.story_prompt["template_id"],
        bound_variables=state.story_prompt["bound_variables"],
        text=state.story_prompt["text"],
    )
    return _generate_framework_event(engine, state, prompt)


def _cmd_edit_paragraph(engine: SessionEngine, state: SessionState, args: dict):
    _require_phase(state, "Framework")
    framework = state.frameworks.get(args.get("framework_id") or state.active_framework_id or "")
    if framework is None:
        raise WrongStatus("no framework to edit")
    edited = story.edit_paragraph(framework, int(args["index"]), args["new_text"], state.config.target_words)
    return (
        "paragraph_edited",
        {"framework": edited.to_dict()},
        {"validation": edited.validation.to_dict()},
        None,
    )


def _cmd_confirm_framework(engine: SessionEngine, state: SessionState, args: dict):
    _require_phase(state, "Framework")
    framework = state.frameworks.get(args.get("framework_id") or state.active_framework_id or "")
    if framework is None:
        raise WrongStatus("no framework to confirm")
    confirmed = story.confirm_framework(framework, state.config.target_words)
    return ("framework_confirmed", {"framework": confirmed.to_dict()}, None, None)


def _cmd_create_cloze(engine: SessionEngine, state: SessionState, args: dict):
    _require_phase(state, "Framework", "Cloze")
    if state.cloze is not None:
        raise WrongStatus("cloze already created")
    framework = _confirmed_framework(state)
    cloze = story.to_cloze(framework, state.config.target_words)
    cloze = story.assign_blanks(cloze, state.config.children)
    return ("cloze_created", {"cloze": cloze.to_dict()}, {"blanks": len(cloze.blanks)}, None)


def _cmd_generate_cloze_questions(engine: SessionEngine, state: SessionState, args: dict):
    _require_phase(state, "Cloze")
    if state.cloze is None:
        raise WrongStatus("no cloze story")
    blank = state.cloze.blank(int(args["blank_index"]))
    profile = _child(state, blank.assigned_child)
    generated = questions.generate_cloze_questions(
        state.cloze,
        blank.blank_index,
        profile,
        engine.gateway,
        engine.templates,
        id_factory=_question_ids(state),
        count=int(args.get("count", 3)),
    )
    return (
        "questions_generated",
        {"questions": [q.to_dict() for q in generated]},
        {"question_ids": [q.question_id for q in generated]},
        None,
    )


def _cmd_generate_adaptation_questions(engine: SessionEngine, state: SessionState, args: dict):
    _require_phase(state, "Adaptation")
    book = _storybook(state)
    index = int(args["paragraph_index"])
    if not 0 <= index < len(book.paragraphs):
        raise WordNotFound(f"no paragraph {index}")
    profile = _child(state, args["child_id"])
    generated = questions.generate_adaptation_questions(
        book.paragraphs[index],
        profile,
        engine.gateway,
        engine.templates,
        id_factory=_question_ids(state),
    )
    return (
        "questions_generated",
        {"questions": [q.to_dict() for q in generated]},
        {"question_ids": [q.question_id for q in generated]},
        None,
    )


def _cmd_record_utterance(engine: SessionEngine, state: SessionState, args: dict):
    _require_phase(state, "Extension")
    if state.roles is None:
        raise WrongStatus("roles not assigned")
    child_id = args["child_id"]
    _child(state, child_id)
    if child_id != state.roles.storyteller:
        raise NotStoryteller(f"{child_id!r} is not the current Storyteller")
    text = args["text"].strip()
    if not text:
        raise EmptyInput("utterance text is blank")
    utterance_id = f"u-{len(state.utterances) + 1:04d}"
    utterance = Utterance(utterance_id=utterance_id, child_id=child_id, text=text)
    return ("utterance_recorded", {"utterance": utterance.to_dict()}, {"utterance_id": utterance_id}, None)


def _cmd_generate_extension_questions(engine: SessionEngine, state: SessionState, args: dict):
    _require_phase(state, "Extension")
    utterance = state.utterances.get(args["utterance_id"])
    if utterance is None:
        raise WordNotFound(f"unknown utterance: {args['utterance_id']!r}")
    if state.roles is None or utterance.child_id != state.roles.storyteller:
        raise NotStoryteller("extension questions anchor the current Storyteller's utterance")
    teller = _child(state, state.roles.storyteller)
    listener = _child(state, state.roles.storylistener)
    teller_questions, listener_questions = questions.generate_extension_questions(
        utterance.utterance_id,
        utterance.text,
        teller,
        listener,
        engine.gateway,
        engine.templates,
        id_factory=_question_ids(state),
    )
    generated = teller_questions + listener_questions
    return (
        "questions_generated",
        {"questions": [q.to_dict() for q in generated]},
        {
            "teller_question_ids": [q.question_id for q in teller_questions],
            "listener_question_ids": [q.question_id for q in listener_questions],
        },
        None,
    )


def _cmd_select_question(engine: SessionEngine, state: SessionState, args: dict):
    question_id = args["question_id"]
    override = bool(args.get("override", False))
    question = state.questions.get(question_id)
    if question is None:
        raise UnknownQuestion(f"unknown question: {question_id!r}")
    if question.status != "proposed":
        raise WrongStatus(f"question {question_id} is {question.status}, not proposed")
    target = question.spec.target_child
    expected = next_respondent(state)
    if target != expected and not override:
        raise FairnessViolation(
            f"allocator expects {expected!r} to answer next; pass override to insist"
        )
    profile = _child(state, target)
    payload = {
        "question_id": question_id,
        "text": question.text,
        "language": question.language,
        "target_child": target,
        "target_name": profile.display_name,
        "anchor_kind": question.spec.anchor_kind,
        "anchor_value": question.spec.anchor_value,
        "override": override and target != expected,
    }
    return ("question_selected", payload, None, None)


def _cmd_skip_question(engine: SessionEngine, state: SessionState, args: dict):
    question = state.questions.get(args["question_id"])
    if question is None:
        raise UnknownQuestion(f"unknown question: {args['question_id']!r}")
    if question.status != "proposed":
        raise WrongStatus(f"question {question.question_id} is {question.status}, not proposed")
    return ("question_skipped", {"question_id": question.question_id}, None, None)


def _cmd_fill_blank(engine: SessionEngine, state: SessionState, args: dict):
    _require_phase(state, "Cloze")
    if state.cloze is None:
        raise WrongStatus("no cloze story")
    blank_index = int(args["blank_index"])
    blank = state.cloze.blank(blank_index)
    if blank.fill is not None and blank.fill.approved:
        raise AlreadyFilled(f"blank {blank_index} already has an approved fill")
    payload = {
        "blank_index": blank_index,
        "answer_text": args["answer_text"],
        "filled_by": args["filled_by"],
        "approved": bool(args.get("approved", True)),
    }
    return ("blank_filled", payload, None, None)


def _cmd_apply_adaptation_edit(engine: SessionEngine, state: SessionState, args: dict):
    _require_phase(state, "Adaptation")
    book = _storybook(state)
    index = int(args["paragraph_index"])
    if not 0 <= index < len(book.paragraphs):
        raise WordNotFound(f"no paragraph {index}")
    new_text = args["new_text"]
    if not new_text.strip():
        raise EmptyInput("replacement text is blank")
    payload = {
        "paragraph_index": index,
        "new_text": new_text,
        "rationale": args.get("rationale", ""),
    }
    return ("adaptation_edited", payload, None, None)


def _cmd_append_extension(engine: SessionEngine, state: SessionState, args: dict):
    _require_phase(state, "Extension")
    if state.roles is None:
        raise WrongStatus("roles not assigned")
    child_id = args["child_id"]
    profile = _child(state, child_id)
    if child_id != state.roles.storyteller:
        raise NotStoryteller(f"{child_id!r} is not the current Storyteller")
    text = args["text"].strip()
    if not text:
        raise EmptyInput("extension text is blank")
    book = _storybook(state)
    language = profile.learning_language
    if book.paragraphs and book.paragraphs[-1].language == language:
        raise AlternationViolation(
            f"extension in {language} would repeat the previous paragraph's language"
        )
    payload = {"child_id": child_id, "language": language, "text": text}
    return ("extension_appended", payload, None, None)


def _cmd_rotate_roles(engine: SessionEngine, state: SessionState, args: dict):
    _require_phase(state, "Extension")
    if state.roles is None:
        raise WrongStatus("roles not assigned")
    if state.extensions_this_round < 1:
        raise NoContributionYet("current Storyteller has not appended an extension paragraph yet")
    return ("roles_rotated", {"roles": state.roles.swapped().to_dict()}, None, None)


def _cmd_generate_material(engine: SessionEngine, state: SessionState, args: dict):
    profile = _child(state, args["child_id"])
    material_id = f"m-{len(state.materials) + 1:04d}"
    material = materials.generate_material(
        args["keyword"],
        profile,
        engine.gateway,
        engine.templates,
        material_id,
        guidelines=engine.guidelines,
    )
    return (
        "material_generated",
        {"material": material.to_dict()},
        {"material_id": material.material_id},
        None,
    )


def _cmd_present_material(engine: SessionEngine, state: SessionState, args: dict):
    material = state.materials.get(args["material_id"])
    if material is None:
        raise UnknownMaterial(f"unknown material: {args['material_id']!r}")
    if material.status == "presented":
        args["_warning"] = "material already presented; no-op"
        return None
    payload = {
        "material_id": material.material_id,
        "keyword": material.keyword,
        "target_child": material.target_child,
        "explanation_text": material.explanation_text,
        "cultural_analogy": material.cultural_analogy,
        "image": material.image.to_dict() if material.image else None,
    }
    return ("material_presented", payload, None, None)


def _cmd_record_response(engine: SessionEngine, state: SessionState, args: dict):
    question = state.questions.get(args["question_id"])
    if question is None:
        raise UnknownQuestion(f"unknown question: {args['question_id']!r}")
    if question.status != "selected":
        raise QuestionNotSelected(f"question {question.question_id} is {question.status}, not selected")
    child_id = args["child_id"]
    if question.spec.target_child != child_id:
        raise WrongChild(f"question {question.question_id} targets {question.spec.target_child!r}")
    record_id = f"r-{len(state.records) + 1:04d}"
    record = analytics.make_record(
        record_id,
        question.question_id,
        child_id,
        args["transcript"],
        manual_codes=args.get("manual_codes"),
    )
    return (
        "response_recorded",
        {"record": record.to_dict(), "question_id": question.question_id},
        {"record_id": record_id, "tokens": len(record.tokens)},
        None,
    )


def _cmd_suggest_codes(engine: SessionEngine, state: SessionState, args: dict):
    record = state.records.get(args["record_id"])
    if record is None:
        raise WordNotFound(f"unknown record: {args['record_id']!r}")
    question = state.questions[record.question_id]
    rendered = render_template(
        engine.templates["code_suggestion"],
        {"question_text": question.text, "transcript": record.transcript},
    )
    reply = engine.gateway.complete(
        rendered,
        {
            "type": "object",
            "required": ["topical_relevance", "accuracy"],
            "properties": {
                "topical_relevance": {"enum": [0, 1, 2]},
                "accuracy": {"enum": [0, 1]},
            },
        },
    )
    payload = {
        "record_id": record.record_id,
        "topical_relevance": reply["topical_relevance"],
        "accuracy": reply["accuracy"],
    }
    return ("codes_suggested", payload, payload, None)


def _cmd_code_response(engine: SessionEngine, state: SessionState, args: dict):
    record = state.records.get(args["record_id"])
    if record is None:
        raise WordNotFound(f"unknown record: {args['record_id']!r}")
    by = args.get("by", "coordinator")
    # Raises OutOfRange / GatewayCannotCode before any event is emitted.
    analytics.code_response(record, args["dimension"], args["value"], by)
    payload = {
        "record_id": record.record_id,
        "dimension": args["dimension"],
        "value": args["value"],
        "by": by,
    }
    return ("response_coded", payload, None, None)


def _cmd_build_report(engine: SessionEngine, state: SessionState, args: dict):
    _require_phase(state, "Review")
    if state.report is not None:
        args["_warning"] = "report already built; reports are read-only"
        return None
    report = _build_report(state)
    return ("report_built", {"report": report.to_dict()}, None, None)


def _build_report(state: SessionState) -> analytics.EngagementReport:
    attribute_of = {q.question_id: q.spec.attribute for q in state.questions.values()}
    records = list(state.records.values())
    metrics = []
    answered: dict[str, tuple] = {}
    for child in state.config.children:
        metrics.append(
            analytics.compute_engagement(
                records,
                child.child_id,
                attribute_of=attribute_of,
                attributes=questions.ATTRIBUTES,
            )
        )
        mine = sorted(
            (r for r in records if r.child_id == child.child_id), key=lambda r: r.record_id
        )
        answered[child.child_id] = tuple(
            (r.question_id, state.questions[r.question_id].text) for r in mine
        )
    feedback: list[analytics.FeatureFeedback] = []
    for child in state.config.children:
        feedback.extend(analytics.derive_feature_feedback(records, child.child_id))
    return analytics.EngagementReport(
        metrics=tuple(metrics),
        answered_questions=answered,
        feedback=tuple(feedback),
    )


_HANDLERS = {
    "join": _cmd_join,
    "upsert_profile": _cmd_upsert_profile,
    "set_target_words": _cmd_set_target_words,
    "summarize_individual": _cmd_summarize_individual,
    "edit_individual_summary": _cmd_edit_individual_summary,
    "summarize_common": _cmd_summarize_common,
    "advance_phase": _cmd_advance_phase,
    "generate_framework": _cmd_generate_framework,
    "regenerate": _cmd_regenerate,
    "edit_paragraph": _cmd_edit_paragraph,
    "confirm_framework": _cmd_confirm_framework,
    "create_cloze": _cmd_create_cloze,
    "generate_cloze_questions": _cmd_generate_cloze_questions,
    "generate_adaptation_questions": _cmd_generate_adaptation_questions,
    "record_utterance": _cmd_record_utterance,
    "generate_extension_questions": _cmd_generate_extension_questions,
    "select_question": _cmd_select_question,
    "skip_question": _cmd_skip_question,
    "fill_blank": _cmd_fill_blank,
    "apply_adaptation_edit": _cmd_apply_adaptation_edit,
    "append_extension": _cmd_append_extension,
    "rotate_roles": _cmd_rotate_roles,
    "generate_material": _cmd_generate_material,
    "present_material": _cmd_present_material,
    "record_response": _cmd_record_response,
    "submit_answer_transcript": _cmd_record_response,
    "suggest_codes": _cmd_suggest_codes,
    "code_response": _cmd_code_response,
    "build_report": _cmd_build_report,
}


# --- event application (pure) -------------------------------------------------------

def _apply_session_opened(state: SessionState, event: Event) -> None:
    pass  # construction state is the open state


def _apply_participant_joined(state: SessionState, event: Event) -> None:
    participant = event.payload["participant_id"]
    if participant not in state.participants:
        state.participants.append(participant)


def _apply_profile_upserted(state: SessionState, event: Event) -> None:
    profile = ChildProfile.from_dict(event.payload["profile"])
    children = tuple(
        profile if c.child_id == profile.child_id else c for c in state.config.children
    )
    state.config = replace(state.config, children=children)


def _apply_target_words_set(state: SessionState, event: Event) -> None:
    words = TargetWordSet.from_dict(event.payload["target_words"])
    state.config = replace(state.config, target_words=words)


def _apply_individual_summarized(state: SessionState, event: Event) -> None:
    summary = characteristics.IndividualSummary.from_dict(event.payload["summary"])
    state.summaries[summary.child_id] = summary


def _apply_common_summarized(state: SessionState, event: Event) -> None:
    state.common_summary = characteristics.CommonSummary.from_dict(event.payload["common_summary"])


def _apply_phase_advanced(state: SessionState, event: Event) -> None:
    state.phase = event.payload["phase"]
    if "roles" in event.payload:
        state.roles = RoleAssignment.from_dict(event.payload["roles"])
        state.extensions_this_round = 0


def _apply_framework_generated(state: SessionState, event: Event) -> None:
    framework = story.StoryFramework.from_dict(event.payload["framework"])
    state.frameworks[framework.framework_id] = framework
    state.active_framework_id = framework.framework_id
    state.story_prompt = event.payload["prompt"]


def _apply_paragraph_edited(state: SessionState, event: Event) -> None:
    framework = story.StoryFramework.from_dict(event.payload["framework"])
    state.frameworks[framework.framework_id] = framework


def _apply_framework_confirmed(state: SessionState, event: Event) -> None:
    framework = story.StoryFramework.from_dict(event.payload["framework"])
    state.frameworks[framework.framework_id] = framework
    state.active_framework_id = framework.framework_id


def _apply_cloze_created(state: SessionState, event: Event) -> None:
    cloze = story.ClozeStory.from_dict(event.payload["cloze"])
    state.cloze = cloze
    counts: dict[str, int] = {c: 0 for c in state.child_ids()}
    for blank in cloze.blanks:
        if blank.assigned_child:
            counts[blank.assigned_child] = counts.get(blank.assigned_child, 0) + 1
    state.ledger.blanks_assigned = counts


def _apply_questions_generated(state: SessionState, event: Event) -> None:
    for data in event.payload["questions"]:
        question = questions.GeneratedQuestion.from_dict(data)
        state.questions[question.question_id] = question


def _apply_question_selected(state: SessionState, event: Event) -> None:
    question_id = event.payload["question_id"]
    state.questions[question_id] = state.questions[question_id].with_status("selected")
    target = event.payload["target_child"]
    state.ledger.questions_selected[target] = state.ledger.questions_selected.get(target, 0) + 1
    state.ledger.last_selected_seq[target] = event.seq
    if event.payload.get("override"):
        state.ledger.overrides.append({"seq": event.seq, "child_id": target})


def _apply_question_skipped(state: SessionState, event: Event) -> None:
    question_id = event.payload["question_id"]
    state.questions[question_id] = state.questions[question_id].with_status("skipped")


def _apply_blank_filled(state: SessionState, event: Event) -> None:
    p = event.payload
    state.cloze = story.fill_blank(
        state.cloze, p["blank_index"], p["answer_text"], p["filled_by"], p["approved"]
    )
    state.provenance.append(
        story.ProvenanceEntry(
            kind="fill",
            payload={
                "blank_index": p["blank_index"],
                "answer_text": p["answer_text"],
                "filled_by": p["filled_by"],
                "approved": p["approved"],
            },
        )
    )


def _apply_material_generated(state: SessionState, event: Event) -> None:
    material = materials.Material.from_dict(event.payload["material"])
    state.materials[material.material_id] = material


def _apply_material_presented(state: SessionState, event: Event) -> None:
    material = state.materials[event.payload["material_id"]]
    state.materials[material.material_id] = replace(material, status="presented")


def _apply_utterance_recorded(state: SessionState, event: Event) -> None:
    utterance = Utterance.from_dict(event.payload["utterance"])
    state.utterances[utterance.utterance_id] = utterance


def _apply_extension_appended(state: SessionState, event: Event) -> None:
    state.provenance.append(
        story.ProvenanceEntry(kind="extension_append", payload=dict(event.payload))
    )
    state.extensions_this_round += 1


def _apply_adaptation_edited(state: SessionState, event: Event) -> None:
    state.provenance.append(
        story.ProvenanceEntry(kind="adaptation_edit", payload=dict(event.payload))
    )


def _apply_roles_rotated(state: SessionState, event: Event) -> None:
    state.roles = RoleAssignment.from_dict(event.payload["roles"])
    state.extensions_this_round = 0


def _apply_response_recorded(state: SessionState, event: Event) -> None:
    record = analytics.ResponseRecord.from_dict(event.payload["record"])
    state.records[record.record_id] = record
    question_id = event.payload["question_id"]
    state.questions[question_id] = state.questions[question_id].with_status("answered")


def _apply_codes_suggested(state: SessionState, event: Event) -> None:
    record = state.records[event.payload["record_id"]]
    record = analytics.code_response(
        record, "topical_relevance", event.payload["topical_relevance"], "gateway_suggestion"
    )
    record = analytics.code_response(record, "accuracy", event.payload["accuracy"], "gateway_suggestion")
    state.records[record.record_id] = record


def _apply_response_coded(state: SessionState, event: Event) -> None:
    p = event.payload
    record = state.records[p["record_id"]]
    state.records[record.record_id] = analytics.code_response(
        record, p["dimension"], p["value"], p["by"]
    )


def _apply_report_built(state: SessionState, event: Event) -> None:
    state.report = analytics.EngagementReport.from_dict(event.payload["report"])


_APPLIERS = {
    "session_opened": _apply_session_opened,
    "participant_joined": _apply_participant_joined,
    "profile_upserted": _apply_profile_upserted,
    "target_words_set": _apply_target_words_set,
    "individual_summarized": _apply_individual_summarized,
    "summary_edited": _apply_individual_summarized,
    "common_summarized": _apply_common_summarized,
    "phase_advanced": _apply_phase_advanced,
    "framework_generated": _apply_framework_generated,
    "paragraph_edited": _apply_paragraph_edited,
    "framework_confirmed": _apply_framework_confirmed,
    "cloze_created": _apply_cloze_created,
    "questions_generated": _apply_questions_generated,
    "question_selected": _apply_question_selected,
    "question_skipped": _apply_question_skipped,
    "blank_filled": _apply_blank_filled,
    "material_generated": _apply_material_generated,
    "material_presented": _apply_material_presented,
    "utterance_recorded": _apply_utterance_recorded,
    "extension_appended": _apply_extension_appended,
    "adaptation_edited": _apply_adaptation_edited,
    "roles_rotated": _apply_roles_rotated,
    "response_recorded": _apply_response_recorded,
    "codes_suggested": _apply_codes_suggested,
    "response_coded": _apply_response_coded,
    "report_built": _apply_report_built,
}
