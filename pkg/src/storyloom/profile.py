"""Tag-structured child profiles, target vocabulary, and session configuration.

Tags are normalized on construction: surrounding whitespace trimmed, internal
whitespace runs collapsed to one space. Display case is preserved; uniqueness
within a profile compares case-insensitively (lowercasing is a no-op for CJK,
which is exactly what we want for cross-language labels).
"""

from __future__ import annotations

import re
from dataclasses import dataclass, replace

from .errors import DuplicateWord, EmptyInput, InvalidConfig, InvariantViolation

LANGUAGES = ("zh", "en")
CEFR_LEVELS = ("A1", "A2", "B1", "B2", "C1", "C2")

METADATA_CATEGORIES = ("Gender", "Age", "Nationality", "LanguageProficiency", "Personality")
PREFERENCE_CATEGORIES = ("PreferredTopic", "PreferredContent", "InteractionStyle")

POLARITIES = ("like", "dislike")
ORIGINS = ("selection", "input", "feedback")

MIN_AGE = 4
MAX_AGE = 18

# Free-text tag input splits on whitespace plus common list delimiters,
# including the fullwidth comma and enumeration comma used in Chinese.
_TAG_SPLIT = re.compile(r"[\s,，、/]+")
_WS_RUN = re.compile(r"\s+")
# Characters that would collide with how tags are rendered in prompts/lists.
_FORBIDDEN_IN_VALUE = (",", "，", "、", "/", ":", "：")


def normalize_label(text: str) -> str:
    """Trim and collapse internal whitespace; preserves case."""
    return _WS_RUN.sub(" ", text.strip())


@dataclass(frozen=True)
class TagCategory:
    kind: str  # "Metadata" | "Preference"
    name: str

    def __post_init__(self):
        if self.kind == "Metadata":
            allowed = METADATA_CATEGORIES
        elif self.kind == "Preference":
            allowed = PREFERENCE_CATEGORIES
        else:
            raise InvariantViolation(f"unknown tag category kind: {self.kind!r}")
        if self.name not in allowed:
            raise InvariantViolation(f"unknown {self.kind} category: {self.name!r}")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "name": self.name}

    @classmethod
    def from_dict(cls, data: dict) -> "TagCategory":
        return cls(kind=data["kind"], name=data["name"])


def category(name: str) -> TagCategory:
    """Look up a category by panel field name."""
    if name in METADATA_CATEGORIES:
        return TagCategory("Metadata", name)
    if name in PREFERENCE_CATEGORIES:
        return TagCategory("Preference", name)
    raise InvariantViolation(f"unknown tag category: {name!r}")


@dataclass(frozen=True)
class Tag:
    category: TagCategory
    value: str
    polarity: str = "like"
    origin: str = "selection"

    def __post_init__(self):
        normalized = normalize_label(self.value)
        if not normalized:
            raise InvariantViolation("tag value is empty after trimming")
        object.__setattr__(self, "value", normalized)
        for ch in _FORBIDDEN_IN_VALUE:
            if ch in normalized:
                raise InvariantViolation(f"tag value contains delimiter {ch!r}: {normalized!r}")
        if self.polarity not in POLARITIES:
            raise InvariantViolation(f"unknown polarity: {self.polarity!r}")
        if self.origin not in ORIGINS:
            raise InvariantViolation(f"unknown origin: {self.origin!r}")

    def key(self) -> tuple:
        """Uniqueness key: category + case-folded value + polarity."""
        return (self.category.kind, self.category.name, self.value.casefold(), self.polarity)

    def to_dict(self) -> dict:
        return {
            "category": self.category.to_dict(),
            "value": self.value,
            "polarity": self.polarity,
            "origin": self.origin,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Tag":
        return cls(
            category=TagCategory.from_dict(data["category"]),
            value=data["value"],
            polarity=data["polarity"],
            origin=data["origin"],
        )


def tags_from_input(text: str, cat: TagCategory, polarity: str = "like") -> list[Tag]:
    """Split free text into tags.

    Tokens split on whitespace and list delimiters, trimmed, and deduplicated
    preserving first-seen order. Every produced tag has origin="input".
    """
    if not text or not text.strip():
        raise EmptyInput("tag input is blank")
    tags: list[Tag] = []
    seen: set[tuple] = set()
    for token in _TAG_SPLIT.split(text):
        token = token.strip()
        if not token:
            continue
        tag = Tag(category=cat, value=token, polarity=polarity, origin="input")
        if tag.key() in seen:
            continue
        seen.add(tag.key())
        tags.append(tag)
    return tags


@dataclass(frozen=True)
class ChildProfile:
    child_id: str
    display_name: str
    native_language: str
    learning_language: str
    proficiency: str
    tags: tuple[Tag, ...] = ()
    version: int = 1

    def __post_init__(self):
        if not self.child_id:
            raise InvariantViolation("child_id is empty")
        if self.native_language not in LANGUAGES:
            raise InvariantViolation(f"unknown native_language: {self.native_language!r}")
        if self.learning_language not in LANGUAGES:
            raise InvariantViolation(f"unknown learning_language: {self.learning_language!r}")
        if self.native_language == self.learning_language:
            raise InvariantViolation("native_language equals learning_language")
        if self.proficiency not in CEFR_LEVELS:
            raise InvariantViolation(f"proficiency must be a CEFR level, got {self.proficiency!r}")
        object.__setattr__(self, "tags", tuple(self.tags))
        seen: set[tuple] = set()
        for tag in self.tags:
            if tag.key() in seen:
                raise InvariantViolation(f"duplicate tag {tag.value!r} in category {tag.category.name}")
            seen.add(tag.key())
        ages = [t for t in self.tags if t.category.name == "Age"]
        if len(ages) > 1:
            raise InvariantViolation("more than one Age tag")
        for t in ages:
            try:
                age = int(t.value)
            except ValueError:
                raise InvariantViolation(f"Age tag is not an integer: {t.value!r}") from None
            if not MIN_AGE <= age <= MAX_AGE:
                raise InvariantViolation(f"Age {age} outside accepted range {MIN_AGE}..{MAX_AGE}")
        genders = [t for t in self.tags if t.category.name == "Gender"]
        if len(genders) > 1:
            raise InvariantViolation("more than one Gender tag")

    def tags_in(self, category_name: str, polarity: str | None = None) -> list[Tag]:
        return [
            t
            for t in self.tags
            if t.category.name == category_name and (polarity is None or t.polarity == polarity)
        ]

    def metadata_tags(self) -> list[Tag]:
        return [t for t in self.tags if t.category.kind == "Metadata"]

    def preference_tags(self, polarity: str = "like") -> list[Tag]:
        return [t for t in self.tags if t.category.kind == "Preference" and t.polarity == polarity]

    def dislike_tags(self) -> list[Tag]:
        return [t for t in self.tags if t.polarity == "dislike"]

    def age(self) -> int | None:
        ages = self.tags_in("Age")
        return int(ages[0].value) if ages else None

    def gender(self) -> str | None:
        genders = self.tags_in("Gender")
        return genders[0].value if genders else None

    def nationality(self) -> str | None:
        found = self.tags_in("Nationality")
        return found[0].value if found else None

    def to_dict(self) -> dict:
        return {
            "child_id": self.child_id,
            "display_name": self.display_name,
            "native_language": self.native_language,
            "learning_language": self.learning_language,
            "proficiency": self.proficiency,
            "tags": [t.to_dict() for t in self.tags],
            "version": self.version,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ChildProfile":
        return cls(
            child_id=data["child_id"],
            display_name=data["display_name"],
            native_language=data["native_language"],
            learning_language=data["learning_language"],
            proficiency=data["proficiency"],
            tags=tuple(Tag.from_dict(t) for t in data["tags"]),
            version=data.get("version", 1),
        )


@dataclass(frozen=True)
class TargetWordSet:
    words_by_language: dict[str, tuple[str, ...]]

    def __post_init__(self):
        cleaned: dict[str, tuple[str, ...]] = {}
        for lang, words in self.words_by_language.items():
            if lang not in LANGUAGES:
                raise InvariantViolation(f"unknown language: {lang!r}")
            normalized = tuple(normalize_label(w) for w in words)
            if not normalized:
                raise InvariantViolation(f"empty word list for {lang}")
            if any(not w for w in normalized):
                raise InvariantViolation(f"blank word in {lang} list")
            seen: set[str] = set()
            for w in normalized:
                if w.casefold() in seen:
                    raise DuplicateWord(f"duplicate word {w!r} in {lang} list")
                seen.add(w.casefold())
            cleaned[lang] = normalized
        object.__setattr__(self, "words_by_language", cleaned)

    def words(self, language: str) -> tuple[str, ...]:
        return self.words_by_language.get(language, ())

    def all_words(self) -> list[tuple[str, str]]:
        """(language, word) pairs in configured order, zh before en."""
        out = []
        for lang in LANGUAGES:
            out.extend((lang, w) for w in self.words_by_language.get(lang, ()))
        return out

    def total(self) -> int:
        return sum(len(v) for v in self.words_by_language.values())

    def to_dict(self) -> dict:
        return {"words_by_language": {k: list(v) for k, v in self.words_by_language.items()}}

    @classmethod
    def from_dict(cls, data: dict) -> "TargetWordSet":
        return cls(words_by_language={k: tuple(v) for k, v in data["words_by_language"].items()})


@dataclass(frozen=True)
class SessionConfig:
    children: tuple[ChildProfile, ChildProfile]
    target_words: TargetWordSet | None
    first_paragraph_language: str
    coordinator_id: str

    def __post_init__(self):
        if len(self.children) != 2:
            raise InvalidConfig("a session needs exactly two children")
        a, b = self.children
        if a.child_id == b.child_id:
            raise InvalidConfig("children must have distinct ids")
        learning = {a.learning_language, b.learning_language}
        if learning != set(LANGUAGES):
            raise InvalidConfig("the two children's learning languages must jointly cover zh and en")
        if self.first_paragraph_language not in LANGUAGES:
            raise InvalidConfig(f"unknown first_paragraph_language: {self.first_paragraph_language!r}")
        if not self.coordinator_id:
            raise InvalidConfig("coordinator_id is empty")
        object.__setattr__(self, "children", tuple(self.children))

    def child(self, child_id: str) -> ChildProfile:
        for c in self.children:
            if c.child_id == child_id:
                return c
        raise InvalidConfig(f"unknown child: {child_id!r}")

    def child_ids(self) -> tuple[str, str]:
        return (self.children[0].child_id, self.children[1].child_id)

    def other_child(self, child_id: str) -> ChildProfile:
        a, b = self.children
        return b if child_id == a.child_id else a

    def child_learning(self, language: str) -> ChildProfile:
        for c in self.children:
            if c.learning_language == language:
                return c
        raise InvalidConfig(f"no child learning {language!r}")

    def to_dict(self) -> dict:
        return {
            "children": [c.to_dict() for c in self.children],
            "target_words": self.target_words.to_dict() if self.target_words else None,
            "first_paragraph_language": self.first_paragraph_language,
            "coordinator_id": self.coordinator_id,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SessionConfig":
        words = data.get("target_words")
        return cls(
            children=tuple(ChildProfile.from_dict(c) for c in data["children"]),
            target_words=TargetWordSet.from_dict(words) if words else None,
            first_paragraph_language=data["first_paragraph_language"],
            coordinator_id=data["coordinator_id"],
        )


class ProfileStore:
    """Serialized single-writer profile store; reads return immutable snapshots."""

    def __init__(self):
        self._profiles: dict[str, ChildProfile] = {}

    def upsert(self, profile: ChildProfile) -> ChildProfile:
        """Store or replace a profile, bumping the version on replacement."""
        existing = self._profiles.get(profile.child_id)
        version = existing.version + 1 if existing else 1
        stored = replace(profile, version=version)
        self._profiles[profile.child_id] = stored
        return stored

    def get(self, child_id: str) -> ChildProfile | None:
        return self._profiles.get(child_id)

    def to_dict(self) -> dict:
        return {cid: p.to_dict() for cid, p in self._profiles.items()}
