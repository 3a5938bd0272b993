"""Comprehension-oriented multimodal materials tailored to one child.

The text explanation is mandatory and written in the child's native language;
the image is optional and degrades to text-only when the image provider is
unavailable. Materials are read-only once generated — presentation is the only
state change, and it is owned by the session writer.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass

from .characteristics import Guideline
from .errors import (
    EmptyInput,
    GenerationUnavailable,
    MalformedOutput,
    ProviderError,
)
from .gateway import GenerationGateway, ImageDescriptor, PromptTemplate, render_template
from .profile import ChildProfile

logger = logging.getLogger(__name__)

MATERIAL_SCHEMA = {
    "type": "object",
    "required": ["explanation", "image_prompt"],
    "properties": {
        "explanation": {"type": "string", "minLength": 1},
        "cultural_analogy": {"type": ["string", "null"]},
        "image_prompt": {"type": "string", "minLength": 1},
    },
}


@dataclass(frozen=True)
class Material:
    material_id: str
    keyword: str
    target_child: str
    explanation_text: str
    cultural_analogy: str | None
    image: ImageDescriptor | None
    status: str = "proposed"  # proposed | presented
    degraded: bool = False
    vocabulary_flags: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {
            "material_id": self.material_id,
            "keyword": self.keyword,
            "target_child": self.target_child,
            "explanation_text": self.explanation_text,
            "cultural_analogy": self.cultural_analogy,
            "image": self.image.to_dict() if self.image else None,
            "status": self.status,
            "degraded": self.degraded,
            "vocabulary_flags": list(self.vocabulary_flags),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Material":
        return cls(
            material_id=data["material_id"],
            keyword=data["keyword"],
            target_child=data["target_child"],
            explanation_text=data["explanation_text"],
            cultural_analogy=data.get("cultural_analogy"),
            image=ImageDescriptor.from_dict(data["image"]) if data.get("image") else None,
            status=data["status"],
            degraded=data.get("degraded", False),
            vocabulary_flags=tuple(data.get("vocabulary_flags", ())),
        )


def vocabulary_flags(explanation: str, language: str, keyword: str, guidelines: list[Guideline]) -> tuple[str, ...]:
    """Words outside every matching exam-level wordlist, flagged not blocked.

    Only applied to English explanations; Chinese has no word segmenter here.
    With no wordlist covering the language, nothing is flagged.
    """
    if language != "en":
        return ()
    allowed: set[str] = set()
    found_list = False
    for guideline in guidelines:
        if guideline.wordlist and language in guideline.languages:
            found_list = True
            allowed.update(w.casefold() for w in guideline.wordlist)
    if not found_list:
        return ()
    allowed.update(t.casefold() for t in re.findall(r"[A-Za-z']+", keyword))
    tokens = [t.casefold() for t in re.findall(r"[A-Za-z']+", explanation)]
    flagged = sorted({t for t in tokens if t not in allowed and len(t) > 2})
    return tuple(flagged)


def generate_material(
    keyword: str,
    profile: ChildProfile,
    gateway: GenerationGateway,
    templates: dict[str, PromptTemplate],
    material_id: str,
    guidelines: list[Guideline] | None = None,
) -> Material:
    """Generate explanation + image for one keyword, culturally aligned.

    Text is mandatory; image failure degrades to a text-only material with
    the degraded flag set.
    """
    keyword = keyword.strip()
    if not keyword:
        raise EmptyInput("material keyword is blank")
    variables = {
        "keyword": keyword,
        "native_language": profile.native_language,
        "cultural_background": profile.nationality() or "",
        "proficiency": profile.proficiency,
    }
    prompt = render_template(templates["material"], variables)
    try:
        reply = gateway.complete(prompt, MATERIAL_SCHEMA)
    except (ProviderError, MalformedOutput) as exc:
        raise GenerationUnavailable(str(exc)) from exc

    image = None
    degraded = False
    image_prompt = render_template(
        templates["material_image"],
        {"image_prompt": reply["image_prompt"], "style": "cartoon"},
    )
    try:
        image = gateway.generate_image(image_prompt)
    except (ProviderError, MalformedOutput) as exc:
        logger.warning("image generation degraded to text-only: %s", exc)
        degraded = True

    flags = vocabulary_flags(reply["explanation"], profile.native_language, keyword, guidelines or [])
    return Material(
        material_id=material_id,
        keyword=keyword,
        target_child=profile.child_id,
        explanation_text=reply["explanation"],
        cultural_analogy=reply.get("cultural_analogy"),
        image=image,
        degraded=degraded,
        vocabulary_flags=flags,
    )
