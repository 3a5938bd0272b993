"""Deterministic offline provider for desk-scale runs and fixture recording.

Selected by a ``scripted:`` endpoint in the provider config. Replies are a
pure function of (prompt text, per-prompt call ordinal), so repeated identical
prompts — a coordinator clicking regenerate — yield a fresh variant while two
whole runs from a cold start stay byte-identical.

The provider reads the structured bound variables of the rendered prompt where
the templates carry them (target words, preferences, metadata), which is what
a hosted model would have to parse back out of the prose.
"""

from __future__ import annotations

import hashlib
import random
import re

from .gateway import RenderedPrompt

FREYTAG = ("exposition", "rising_action", "climax", "falling_action", "resolution")

# Related-concept pairs the offline matcher recognizes, keyed case-insensitively
# in either slot order.
_RELATED_PAIRS = {
    ("superhero", "kungfu warrior"): "action-themed heroes",
    ("cartoons", "animation"): "animated shows",
    ("princess", "fairy tales"): "fairy-tale characters",
    ("dinosaurs", "dragons"): "giant creatures",
    ("football", "basketball"): "ball sports",
    ("puzzles", "logical reasoning"): "reasoning games",
    ("animals", "pets"): "animal friends",
}

_GENDER_WORDS = {"female": "girl", "male": "boy"}
_LANG_NAMES = {"zh": "Chinese", "en": "English"}

_ZH_FRAMES = [
    "一个晴朗的早晨，两个好朋友一起出发去探险，他们先遇到了{words}。",
    "他们沿着小路慢慢往前走，惊喜地发现了{words}，两个人都兴奋极了。",
    "突然，{words}出现在他们面前，他们屏住呼吸，仔细地看着。",
    "过了一会儿大家安静下来，{words}看起来也变得温和友好了。",
    "回家的路上，他们约好下一次还要一起来看{words}。",
]
_ZH_FILLERS = [
    "两个好朋友一路说说笑笑，心里都盼着接下来的惊喜。",
    "他们互相提醒要小心脚下，一边走一边猜前面会有什么。",
    "风轻轻吹过，他们手拉着手继续往前走。",
]
_EN_FRAMES = [
    "Early that morning, the two friends set off on an adventure and soon reached the {words}.",
    "Walking along the path, they spotted the {words} and cheered out loud.",
    "All of a sudden, the {words} appeared right in front of them.",
    "Little by little everyone calmed down, and even the {words} seemed gentle.",
    "On the way home, they promised to come back and visit the {words} again.",
]
_EN_FILLERS = [
    "The two friends laughed and talked all the way, wondering what they would find next.",
    "They held hands and kept walking, guessing what might be around the corner.",
    "A soft wind blew past as they marched on together.",
]

_EN_CLOZE_FRAMES = [
    "Read the sentence around blank ({n}). Which word begins with \"{first}\" and fits there?",
    "Think of a word that means the same as the missing one near blank ({n}). What could it be?",
    "What do we call the thing this part of the story is about? Its first letter is \"{first}\".",
]
_ZH_CLOZE_FRAMES = [
    "看看第（{n}）个空格前后的句子，哪个词最合适？它的第一个字是“{first}”。",
    "想一想，有没有一个词和第（{n}）个空缺的意思一样？",
    "这一段讲的是什么？第（{n}）个空格里应该填哪个词呢？",
]

_ADAPT_STEMS = {
    ("character", "explicit", "en"): "Who appears in this paragraph, and what do they do?",
    ("character", "implicit", "en"): "If the main character were one of your favorites — {fav} — what would they do here?",
    ("setting", "explicit", "en"): "Where does this part of the story happen?",
    ("setting", "implicit", "en"): "If this scene moved to a place you love, like {fav}, how would it look?",
    ("action", "explicit", "en"): "What happens first in this paragraph, and what happens next?",
    ("action", "implicit", "en"): "What else could the friends try here that nobody has thought of yet?",
    ("feeling", "explicit", "en"): "How do the characters feel in this paragraph?",
    ("feeling", "implicit", "en"): "How would you feel if you were standing right there with them?",
    ("causal_relationship", "explicit", "en"): "Why does this moment happen the way it does?",
    ("causal_relationship", "implicit", "en"): "If the friends wanted to find out more, who would be the best person to ask, and why?",
    ("outcome_resolution", "explicit", "en"): "How does this part of the story turn out?",
    ("outcome_resolution", "implicit", "en"): "Can you invent a different ending for this part?",
    ("prediction", "explicit", "en"): "Judging from this paragraph, what will happen right after?",
    ("prediction", "implicit", "en"): "What surprising thing might happen next that the story has not hinted at?",
    ("character", "explicit", "zh"): "这一段里出现了谁？他们在做什么？",
    ("character", "implicit", "zh"): "如果主角换成你最喜欢的{fav}，他会怎么做？",
    ("setting", "explicit", "zh"): "这一段故事发生在什么地方？",
    ("setting", "implicit", "zh"): "如果把这个场景搬到你喜欢的地方，会变成什么样子？",
    ("action", "explicit", "zh"): "这一段里先发生了什么，然后发生了什么？",
    ("action", "implicit", "zh"): "朋友们在这里还可以尝试什么新的做法？",
    ("feeling", "explicit", "zh"): "这一段里人物的心情是什么样的？",
    ("feeling", "implicit", "zh"): "如果你也站在那里，你会有什么感觉？",
    ("causal_relationship", "explicit", "zh"): "为什么会发生这样的事情？",
    ("causal_relationship", "implicit", "zh"): "如果想弄清楚原因，问谁最合适？为什么？",
    ("outcome_resolution", "explicit", "zh"): "这一段的结果是什么？",
    ("outcome_resolution", "implicit", "zh"): "你能为这一段想一个不一样的结局吗？",
    ("prediction", "explicit", "zh"): "从这一段来看，接下来会发生什么？",
    ("prediction", "implicit", "zh"): "接下来可能发生什么故事里完全没有提到的事？",
}

_TELLER_STEMS = {
    "en": [
        "You mentioned something wonderful — what new corners or details could make it even more fun?",
        "Tell us more: what colors, sounds, or smells were there?",
        "Who else could join this part of your story, and what would they bring along?",
    ],
    "zh": [
        "你刚才讲得真棒——还有哪些新的角落或细节可以让它更有趣？",
        "再多讲一点：那里有什么颜色、声音或气味？",
        "还有谁可以加入你的故事？他们会带来什么？",
    ],
}
_LISTENER_STEMS = {
    "en": [
        "Can you retell what your friend just said in your own words?",
        "What was the most important thing that happened in what you just heard?",
        "Where did your friend say the story continues, and who goes there?",
    ],
    "zh": [
        "你能用自己的话把刚才听到的故事再讲一遍吗？",
        "刚才听到的内容里，最重要的事情是什么？",
        "你的朋友说故事接下来发生在哪里？谁会去那里？",
    ],
}

_STOPWORDS = {
    "the", "a", "an", "and", "or", "of", "to", "in", "is", "it", "you", "what",
    "who", "where", "when", "why", "how", "did", "do", "does", "was", "were",
}


def _seed_for(prompt: RenderedPrompt, ordinal: int) -> int:
    digest = hashlib.sha256(f"{prompt.template_id}\n{prompt.text}\n{ordinal}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")


def _split_listing(raw: str) -> list[tuple[str, str]]:
    """Parse "Key: value; Key: value" listings rendered by the engine."""
    out = []
    for part in raw.split(";"):
        part = part.strip()
        if not part or part == "-":
            continue
        if ":" in part:
            key, value = part.split(":", 1)
            out.append((key.strip(), value.strip()))
        else:
            out.append(("", part))
    return out


def _join_words(words: list[str], language: str) -> str:
    if language == "zh":
        return "、".join(words[:-1]) + "和" + words[-1] if len(words) > 1 else words[0]
    if len(words) == 1:
        return words[0]
    return ", ".join(words[:-1]) + " and the " + words[-1]


class ScriptedProvider:
    """Offline stand-in provider; output depends only on prompt text + ordinal."""

    def __init__(self):
        self._ordinals: dict[str, int] = {}

    def _ordinal(self, prompt: RenderedPrompt) -> int:
        key = hashlib.sha256(f"{prompt.template_id}\n{prompt.text}".encode("utf-8")).hexdigest()
        self._ordinals[key] = self._ordinals.get(key, 0) + 1
        return self._ordinals[key]

    def complete(self, prompt: RenderedPrompt, output_schema: dict):
        ordinal = self._ordinal(prompt)
        rng = random.Random(_seed_for(prompt, ordinal))
        handler = {
            "individual_summary": self._individual_summary,
            "tag_match": self._tag_match,
            "common_reasoning": self._common_reasoning,
            "story_framework": self._story_framework,
            "cloze_question": self._cloze_question,
            "adaptation_question": self._stage_question,
            "extension_teller_question": self._stage_question,
            "extension_listener_question": self._stage_question,
            "material": self._material,
            "code_suggestion": self._code_suggestion,
        }.get(prompt.template_id)
        if handler is None:
            raise ValueError(f"scripted provider has no handler for template {prompt.template_id!r}")
        return handler(prompt, rng)

    def generate_image(self, prompt: RenderedPrompt) -> dict:
        digest = hashlib.sha256(prompt.text.encode("utf-8")).hexdigest()[:16]
        return {
            "prompt_text": prompt.text,
            "uri": f"placeholder://images/{digest}",
            "style": "cartoon",
            "placeholder": True,
        }

    # --- summaries ---------------------------------------------------------

    def _individual_summary(self, prompt: RenderedPrompt, rng: random.Random):
        v = prompt.bound_variables
        name = v["child_name"]
        metadata = dict(_split_listing(v["metadata"]))
        preferences = _split_listing(v["preferences"])
        dislikes = _split_listing(v["dislikes"])
        hints = [h.strip() for h in v.get("inferred_hints", "").split(",") if h.strip() and h.strip() != "-"]

        gender = metadata.get("Gender", "")
        pronoun = {"girl": "She", "boy": "He"}.get(_GENDER_WORDS.get(gender.lower(), ""), "They")
        sentences = []

        intro_bits = []
        intro_sources = []
        if "Age" in metadata:
            intro_bits.append(f"{metadata['Age']}-year-old")
            intro_sources.append(f"Age:{metadata['Age']}")
        if gender:
            intro_bits.append(_GENDER_WORDS.get(gender.lower(), gender))
            intro_sources.append(f"Gender:{gender}")
        intro = f"{name} is a {' '.join(intro_bits)}" if intro_bits else f"{name} is a child"
        if "Nationality" in metadata:
            intro += f" from {metadata['Nationality']}"
            intro_sources.append(f"Nationality:{metadata['Nationality']}")
        sentences.append({"text": intro + ".", "source_tags": intro_sources or ["Name"]})

        personalities = [val for key, val in _split_listing(v["metadata"]) if key == "Personality"]
        if personalities:
            sentences.append(
                {
                    "text": f"{pronoun} tends to be {', '.join(personalities)}.",
                    "source_tags": [f"Personality:{p}" for p in personalities],
                }
            )

        by_category: dict[str, list[str]] = {}
        for key, val in preferences:
            by_category.setdefault(key, []).append(val)
        phrasing = {
            "PreferredTopic": "{p} loves stories about {vals}.",
            "PreferredContent": "{p} especially enjoys {vals}.",
            "InteractionStyle": "{p} responds well to {vals}.",
        }
        for cat, vals in by_category.items():
            text = phrasing.get(cat, "{p} likes {vals}.").format(p=pronoun, vals=", ".join(vals))
            sentences.append({"text": text, "source_tags": [f"{cat}:{val}" for val in vals]})

        if dislikes:
            vals = [val for _, val in dislikes]
            sentences.append(
                {
                    "text": f"Better to avoid {', '.join(vals)}.",
                    "source_tags": [f"dislike:{val}" for val in vals],
                }
            )

        lang_name = _LANG_NAMES.get(v["learning_language"], v["learning_language"])
        sentences.append(
            {
                "text": f"{name} is learning {lang_name} at CEFR level {v['proficiency']}.",
                "source_tags": ["proficiency"],
            }
        )

        if hints:
            sentences.append(
                {
                    "text": f"{pronoun} may also enjoy specifics such as {', '.join(hints)} (inferred, to confirm).",
                    "source_tags": [f"inferred:{h}" for h in hints],
                }
            )
        return {"sentences": sentences}

    # --- matching / reasoning ------------------------------------------------

    def _tag_match(self, prompt: RenderedPrompt, rng: random.Random):
        pairs_raw = prompt.bound_variables["pairs"]
        results = []
        differences = []
        for line in pairs_raw.splitlines():
            line = line.strip().lstrip("-").strip()
            if not line or "|" not in line:
                continue
            a, b = [part.strip() for part in line.split("|", 1)]
            label = self._unify(a, b)
            results.append({"a": a, "b": b, "label": label})
            if label != "no-match":
                differences.append(
                    f"Both like {label}, though one leans toward {a} and the other toward {b}."
                )
        return {"pairs": results, "differences": differences}

    @staticmethod
    def _unify(a: str, b: str) -> str:
        la, lb = a.casefold(), b.casefold()
        for (x, y), label in _RELATED_PAIRS.items():
            if {la, lb} == {x, y}:
                return label
        if la == lb:
            return a

        def contains_word(haystack: str, needle: str) -> bool:
            return re.search(rf"(?<!\w){re.escape(needle)}(?!\w)", haystack) is not None

        if len(la) >= 4 and contains_word(lb, la):
            return a
        if len(lb) >= 4 and contains_word(la, lb):
            return b
        tokens_a = {t for t in re.findall(r"\w+", la) if t not in _STOPWORDS}
        tokens_b = {t for t in re.findall(r"\w+", lb) if t not in _STOPWORDS}
        shared = tokens_a & tokens_b
        if shared:
            return sorted(shared)[0]
        return "no-match"

    def _common_reasoning(self, prompt: RenderedPrompt, rng: random.Random):
        v = prompt.bound_variables
        meta_a = dict(_split_listing(v["metadata_a"]))
        meta_b = dict(_split_listing(v["metadata_b"]))
        commonalities = []
        for line in v["guidelines"].splitlines():
            line = line.strip().lstrip("-").strip()
            if not line:
                continue
            parts = [p.strip() for p in line.split("|", 2)]
            if len(parts) != 3:
                continue
            gid, kind, rule = parts
            if kind == "exam_level":
                statement = (
                    f"With CEFR levels {meta_a.get('Proficiency', '?')} and {meta_b.get('Proficiency', '?')}, "
                    f"shared vocabulary and grammar guidance applies: {rule}"
                )
                evidence = ["proficiency", "learning_language"]
            else:
                statement = (
                    f"Both children are {meta_a.get('Age', '?')} and {meta_b.get('Age', '?')} years old; {rule}"
                )
                evidence = ["age"]
                if meta_a.get("Gender") and meta_a.get("Gender") == meta_b.get("Gender"):
                    evidence.append("gender")
            commonalities.append({"guideline_id": gid, "statement": statement, "evidence": evidence})
        return {"commonalities": commonalities}

    # --- story ----------------------------------------------------------------

    def _story_framework(self, prompt: RenderedPrompt, rng: random.Random):
        premise = prompt.bound_variables["premise"]
        instruction = prompt.bound_variables["instruction"]

        def words_from(label: str) -> list[str]:
            match = re.search(rf"{label} target words: (.+)", premise)
            if not match:
                return []
            return [w.strip() for w in match.group(1).split("|") if w.strip()]

        zh_words = words_from("Chinese")
        en_words = words_from("English")
        count_match = re.search(r"exactly (\d+) paragraphs", instruction)
        count = int(count_match.group(1)) if count_match else 6
        first_match = re.search(r"starting with (zh|en)", instruction)
        first = first_match.group(1) if first_match else "zh"

        languages = [first if i % 2 == 0 else ("en" if first == "zh" else "zh") for i in range(count)]
        stages = _spread_stages(count)

        queues = {"zh": list(zh_words), "en": list(en_words)}
        slots = {lang: languages.count(lang) for lang in ("zh", "en")}
        paragraphs = []
        position = {"zh": 0, "en": 0}
        for index, lang in enumerate(languages):
            queue = queues[lang]
            remaining_slots = slots[lang] - position[lang]
            if not remaining_slots or not queue:
                take = 0
            elif position[lang] == 0 and remaining_slots > 1:
                # Open gently: the first paragraph of each language carries
                # fewer words so early blanks land one per paragraph.
                take = len(queue) // remaining_slots
            else:
                take = -(-len(queue) // remaining_slots)
            chunk = [queue.pop(0) for _ in range(min(take, len(queue)))]
            position[lang] += 1
            frames = _ZH_FRAMES if lang == "zh" else _EN_FRAMES
            fillers = _ZH_FILLERS if lang == "zh" else _EN_FILLERS
            frame_index = min(index * len(frames) // max(count, 1), len(frames) - 1)
            if chunk:
                text = frames[frame_index].format(words=_join_words(chunk, lang))
            else:
                text = fillers[rng.randrange(len(fillers))]
            paragraphs.append({"language": lang, "text": text, "stage": stages[index]})
        return {"paragraphs": paragraphs}

    # --- questions ---------------------------------------------------------------

    def _cloze_question(self, prompt: RenderedPrompt, rng: random.Random):
        v = prompt.bound_variables
        language = v["language"]
        word = v["target_word"]
        n = v["blank_number"]
        frames = _ZH_CLOZE_FRAMES if language == "zh" else _EN_CLOZE_FRAMES
        if len(word) == 1:
            # A first-character hint would spell out the whole word.
            frames = [f for f in frames if "{first}" not in f]
        text = frames[rng.randrange(len(frames))].format(n=n, first=word[0])
        return {"questions": [{"text": text}]}

    def _stage_question(self, prompt: RenderedPrompt, rng: random.Random):
        v = prompt.bound_variables
        language = v["language"]
        attribute = v["attribute"]
        ex_or_im = v["ex_or_im"]
        preferences = [val for _, val in _split_listing(v.get("preferences", ""))]
        fav = preferences[rng.randrange(len(preferences))] if preferences else (
            "你的朋友" if language == "zh" else "your favorite hero"
        )
        if prompt.template_id == "adaptation_question":
            stem = _ADAPT_STEMS[(attribute, ex_or_im, language)]
            return {"questions": [{"text": stem.format(fav=fav)}]}
        stems = _TELLER_STEMS if prompt.template_id == "extension_teller_question" else _LISTENER_STEMS
        text = stems[language][rng.randrange(len(stems[language]))]
        return {"questions": [{"text": text}]}

    # --- materials -----------------------------------------------------------------

    def _material(self, prompt: RenderedPrompt, rng: random.Random):
        v = prompt.bound_variables
        keyword = v["keyword"]
        native = v["native_language"]
        background = v.get("cultural_background", "")
        if native == "zh":
            explanation = f"“{keyword}”是故事里出现的一个词。它指的是一种孩子们容易见到或想到的事物，想一想你在生活里哪里见过它。"
            analogy = f"可以把它想成你在{background or '家附近'}常见的类似活动或事物。" if background else None
        else:
            explanation = (
                f"\"{keyword}\" is a word from the story. It names something children can picture easily — "
                f"think about where you might have seen it in your own life."
            )
            analogy = (
                f"You can think of it like a familiar activity or thing from {background}, "
                f"such as a community event people enjoy together."
                if background
                else None
            )
        image_prompt = f"A friendly cartoon illustration of {keyword} for children, cheerful and simple."
        return {"explanation": explanation, "cultural_analogy": analogy, "image_prompt": image_prompt}

    # --- analytics suggestions ----------------------------------------------------------

    def _code_suggestion(self, prompt: RenderedPrompt, rng: random.Random):
        v = prompt.bound_variables
        question_tokens = {t for t in re.findall(r"\w+", v["question_text"].casefold()) if t not in _STOPWORDS}
        answer_tokens = [t for t in re.findall(r"\w+", v["transcript"].casefold()) if t not in _STOPWORDS]
        if not answer_tokens:
            return {"topical_relevance": 0, "accuracy": 0}
        overlap = question_tokens.intersection(answer_tokens)
        relevance = 2 if overlap else (1 if len(answer_tokens) >= 2 else 0)
        accuracy = 1 if relevance >= 1 else 0
        return {"topical_relevance": relevance, "accuracy": accuracy}


def _spread_stages(count: int) -> list[str]:
    """Assign Freytag stages to ``count`` paragraphs, contiguous and in order."""
    if count >= len(FREYTAG):
        base = count // len(FREYTAG)
        extra = count % len(FREYTAG)
        stages = []
        for i, stage in enumerate(FREYTAG):
            copies = base + (1 if i < extra else 0)
            stages.extend([stage] * copies)
        return stages
    if count == 4:
        picks = ("exposition", "rising_action", "climax", "resolution")
    elif count == 3:
        picks = ("exposition", "climax", "resolution")
    elif count == 2:
        picks = ("exposition", "resolution")
    else:
        picks = ("climax",)
    return list(picks)
