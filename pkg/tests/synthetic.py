"""Seeded synthetic framework generator for property tests.

Generates confirmed frameworks that satisfy the framework invariants by
construction: alternating languages, contiguous pyramid-ordered stages, and
every target word embedded in a paragraph of its own language.
"""

from __future__ import annotations

import random

from storyloom.profile import TargetWordSet
from storyloom.story import FREYTAG_STAGES, Paragraph, StoryFramework, confirm_framework

_ZH_CHARS = "山水火木金土日月云风花鸟虫鱼石田天地人口"
_EN_LETTERS = "abcdefghijklmnopqrstuvwxyz"

_ZH_SENTENCES = (
    "他们一起看见了{words}，觉得非常神奇。",
    "路上出现了{words}，大家停下来仔细观察。",
    "最后他们记住了{words}，开开心心回家了。",
    "远处的{words}在阳光下闪闪发光。",
)
_EN_SENTENCES = (
    "Together they found the {words} and cheered.",
    "Along the road the {words} appeared in the sunshine.",
    "At last they remembered the {words} and walked home.",
    "Far away the {words} sparkled in the light.",
)
_ZH_FILLER = "他们手拉着手继续往前走。"
_EN_FILLER = "They kept walking hand in hand."


def _zh_word(rng: random.Random, taken: set) -> str:
    while True:
        word = rng.choice(_ZH_CHARS) + rng.choice(_ZH_CHARS)
        if word not in taken:
            taken.add(word)
            return word


def _en_word(rng: random.Random, taken: set) -> str:
    while True:
        word = "".join(rng.choice(_EN_LETTERS) for _ in range(rng.randint(4, 6)))
        if word not in taken:
            taken.add(word)
            return word


def _stage_layout(rng: random.Random, count: int) -> list[str]:
    if count >= len(FREYTAG_STAGES):
        cuts = sorted(rng.sample(range(1, count), len(FREYTAG_STAGES) - 1))
        sizes = [b - a for a, b in zip([0] + cuts, cuts + [count])]
    else:
        picks = sorted(rng.sample(range(len(FREYTAG_STAGES)), count))
        return [FREYTAG_STAGES[i] for i in picks]
    stages = []
    for stage, size in zip(FREYTAG_STAGES, sizes):
        stages.extend([stage] * size)
    return stages


def generate_framework(seed: int) -> tuple[StoryFramework, TargetWordSet]:
    rng = random.Random(seed)
    count = rng.randint(4, 10)
    first = rng.choice(("zh", "en"))
    languages = [first if i % 2 == 0 else ("en" if first == "zh" else "zh") for i in range(count)]
    stages = _stage_layout(rng, count)

    taken: set = set()
    zh_words = [_zh_word(rng, taken) for _ in range(rng.randint(1, 5))]
    en_words = [_en_word(rng, taken) for _ in range(rng.randint(1, 5))]
    words = TargetWordSet(words_by_language={"zh": tuple(zh_words), "en": tuple(en_words)})

    queues = {"zh": list(zh_words), "en": list(en_words)}
    paragraphs = []
    for index, language in enumerate(languages):
        queue = queues[language]
        remaining_slots = languages[index:].count(language)
        take = -(-len(queue) // remaining_slots) if queue else 0
        chunk = [queue.pop(0) for _ in range(min(take, len(queue)))]
        if chunk:
            joined = "、".join(chunk) if language == "zh" else " and the ".join(chunk)
            sentence = rng.choice(_ZH_SENTENCES if language == "zh" else _EN_SENTENCES)
            text = sentence.format(words=joined)
        else:
            text = _ZH_FILLER if language == "zh" else _EN_FILLER
        paragraphs.append(Paragraph(index=index, language=language, text=text, stage=stages[index]))

    draft = StoryFramework(framework_id=f"synthetic-{seed}", paragraphs=tuple(paragraphs))
    return confirm_framework(draft, words), words
