from __future__ import annotations

import pytest

import storyloom
from storyloom import characteristics, gateway, profile, scripted


def make_tag(cat: str, value: str, polarity: str = "like", origin: str = "selection") -> profile.Tag:
    return profile.Tag(profile.category(cat), value, polarity, origin)


def make_lisa() -> profile.ChildProfile:
    return profile.ChildProfile(
        child_id="lisa",
        display_name="Lisa",
        native_language="en",
        learning_language="zh",
        proficiency="A1",
        tags=(
            make_tag("Gender", "Female"),
            make_tag("Age", "7"),
            make_tag("Nationality", "US"),
            make_tag("Personality", "quiet"),
            make_tag("Personality", "introverted"),
            make_tag("PreferredTopic", "Adventure", origin="input"),
            make_tag("PreferredTopic", "Princess", origin="input"),
            make_tag("PreferredContent", "Cartoons"),
            make_tag("InteractionStyle", "logical reasoning"),
        ),
    )


def make_lele() -> profile.ChildProfile:
    return profile.ChildProfile(
        child_id="lele",
        display_name="Lele",
        native_language="zh",
        learning_language="en",
        proficiency="A1",
        tags=(
            make_tag("Gender", "Male"),
            make_tag("Age", "8"),
            make_tag("Nationality", "China"),
            make_tag("Personality", "curious"),
            make_tag("Personality", "lively"),
            make_tag("PreferredTopic", "Adventure"),
            make_tag("PreferredContent", "superhero", origin="input"),
            make_tag("InteractionStyle", "logical reasoning"),
        ),
    )


ZOO_WORDS = {"zh": ("老虎", "狮子", "兔子", "狗", "猫"), "en": ("zoo", "animal", "bird", "dog")}


@pytest.fixture
def lisa():
    return make_lisa()


@pytest.fixture
def lele():
    return make_lele()


@pytest.fixture
def zoo_words():
    return profile.TargetWordSet(words_by_language=dict(ZOO_WORDS))


@pytest.fixture
def config(lisa, lele, zoo_words):
    return profile.SessionConfig(
        children=(lisa, lele),
        target_words=zoo_words,
        first_paragraph_language="zh",
        coordinator_id="teacher-1",
    )


@pytest.fixture(scope="session")
def templates():
    return gateway.load_templates(storyloom.default_templates_dir())


@pytest.fixture(scope="session")
def guidelines():
    return characteristics.load_guidelines(storyloom.default_guidelines_dir())


@pytest.fixture
def live_gateway():
    """Offline deterministic gateway: live mode against the scripted provider."""
    return gateway.GenerationGateway("live", provider=scripted.ScriptedProvider())


@pytest.fixture
def zoo_script_path():
    return storyloom.demo_data_dir() / "script.json"


@pytest.fixture
def zoo_transcript_path():
    return storyloom.demo_data_dir() / "transcript.json"
