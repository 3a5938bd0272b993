"""Provider-agnostic generation gateway with record/replay transcripts.

Every generative call flows through :class:`GenerationGateway`:

* ``live``   — forward to the configured provider, validate the reply.
* ``record`` — live call, then append the reply to the transcript file.
* ``replay`` — look the reply up in the transcript; never touches the network.

Transcript entries are keyed by a content hash of (template_id, rendered
prompt text, call ordinal). The ordinal counts repeated identical prompts so
"regenerate" gets the second recorded reply, while unrelated call-order
changes do not invalidate the fixture.
"""

from __future__ import annotations

import hashlib
import json
import logging
import re
import socket
import threading
from dataclasses import dataclass
from pathlib import Path

import jsonschema

from .errors import (
    MalformedOutput,
    MissingFixture,
    ProviderError,
    UnboundVariable,
    UnknownVariable,
)

logger = logging.getLogger(__name__)

_PLACEHOLDER = re.compile(r"\{\{(\w+)\}\}")

TRANSCRIPT_SCHEMA_VERSION = 1


@dataclass(frozen=True)
class PromptTemplate:
    template_id: str
    body: str
    required_variables: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "required_variables", tuple(self.required_variables))
        in_body = set(_PLACEHOLDER.findall(self.body))
        declared = set(self.required_variables)
        if in_body != declared:
            missing = declared - in_body
            extra = in_body - declared
            parts = []
            if missing:
                parts.append(f"declared but not in body: {sorted(missing)}")
            if extra:
                parts.append(f"in body but undeclared: {sorted(extra)}")
            raise UnknownVariable(f"template {self.template_id}: " + "; ".join(parts))


@dataclass(frozen=True)
class RenderedPrompt:
    template_id: str
    bound_variables: dict[str, str]
    text: str


def render_template(template: PromptTemplate, variables: dict[str, str]) -> RenderedPrompt:
    """Deterministic substitution: identical inputs yield identical text."""
    missing = [name for name in template.required_variables if name not in variables]
    if missing:
        raise UnboundVariable(f"template {template.template_id}: unbound {missing[0]!r}")
    unknown = [name for name in variables if name not in template.required_variables]
    if unknown:
        raise UnknownVariable(f"template {template.template_id}: unknown variable {unknown[0]!r}")
    text = _PLACEHOLDER.sub(lambda m: str(variables[m.group(1)]), template.body)
    if _PLACEHOLDER.search(text):
        leftover = _PLACEHOLDER.search(text).group(1)
        raise UnboundVariable(f"template {template.template_id}: unresolved placeholder {leftover!r}")
    return RenderedPrompt(
        template_id=template.template_id,
        bound_variables={k: str(v) for k, v in variables.items()},
        text=text,
    )


def load_templates(templates_dir: str | Path) -> dict[str, PromptTemplate]:
    """Load ``*.txt`` templates; the template id is the file stem.

    Required variables are inferred from the placeholders in the body, which
    keeps the file format plain text as documented.
    """
    templates: dict[str, PromptTemplate] = {}
    for path in sorted(Path(templates_dir).glob("*.txt")):
        body = path.read_text(encoding="utf-8")
        names = tuple(dict.fromkeys(_PLACEHOLDER.findall(body)))
        templates[path.stem] = PromptTemplate(template_id=path.stem, body=body, required_variables=names)
    return templates


@dataclass(frozen=True)
class ImageDescriptor:
    prompt_text: str
    uri: str
    style: str = "cartoon"
    placeholder: bool = False

    def to_dict(self) -> dict:
        return {
            "prompt_text": self.prompt_text,
            "uri": self.uri,
            "style": self.style,
            "placeholder": self.placeholder,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ImageDescriptor":
        return cls(
            prompt_text=data["prompt_text"],
            uri=data["uri"],
            style=data.get("style", "cartoon"),
            placeholder=data.get("placeholder", False),
        )


def _entry_key(template_id: str, text: str, ordinal: int) -> str:
    digest = hashlib.sha256()
    digest.update(template_id.encode("utf-8"))
    digest.update(b"\x00")
    digest.update(text.encode("utf-8"))
    digest.update(b"\x00")
    digest.update(str(ordinal).encode("ascii"))
    return digest.hexdigest()


class GenerationTranscript:
    """One JSON document of recorded replies, keyed by prompt content hash."""

    def __init__(self, entries: dict[str, dict] | None = None):
        self.entries: dict[str, dict] = entries or {}

    @classmethod
    def load(cls, path: str | Path) -> "GenerationTranscript":
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        if data.get("schema_version") != TRANSCRIPT_SCHEMA_VERSION:
            raise MalformedOutput(f"unsupported transcript schema_version: {data.get('schema_version')!r}")
        return cls(entries=data["entries"])

    def save(self, path: str | Path) -> None:
        payload = {"schema_version": TRANSCRIPT_SCHEMA_VERSION, "entries": self.entries}
        Path(path).write_text(
            json.dumps(payload, ensure_ascii=False, indent=2, sort_keys=True) + "\n",
            encoding="utf-8",
        )

    def put(self, key: str, template_id: str, ordinal: int, kind: str, reply) -> None:
        self.entries[key] = {
            "template_id": template_id,
            "ordinal": ordinal,
            "kind": kind,
            "reply": reply,
        }

    def get(self, key: str) -> dict | None:
        return self.entries.get(key)


@dataclass
class ProviderConfig:
    endpoint: str = "scripted://default"
    model: str = "scripted-demo"
    mode: str = "replay"  # live | record | replay
    timeout_ms: int = 30000

    @classmethod
    def from_file(cls, path: str | Path, env: dict | None = None) -> "ProviderConfig":
        """Read the ``provider.*`` keys; environment variables override.

        Overrides mirror the config keys: STORYLOOM_PROVIDER_ENDPOINT,
        STORYLOOM_PROVIDER_MODEL, STORYLOOM_PROVIDER_MODE,
        STORYLOOM_PROVIDER_TIMEOUT_MS.
        """
        import os

        env = env if env is not None else os.environ
        data = {}
        if path is not None and Path(path).exists():
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
            data = raw.get("provider", raw)
        cfg = cls(
            endpoint=data.get("endpoint", cls.endpoint),
            model=data.get("model", cls.model),
            mode=data.get("mode", cls.mode),
            timeout_ms=int(data.get("timeout_ms", cls.timeout_ms)),
        )
        cfg.endpoint = env.get("STORYLOOM_PROVIDER_ENDPOINT", cfg.endpoint)
        cfg.model = env.get("STORYLOOM_PROVIDER_MODEL", cfg.model)
        cfg.mode = env.get("STORYLOOM_PROVIDER_MODE", cfg.mode)
        cfg.timeout_ms = int(env.get("STORYLOOM_PROVIDER_TIMEOUT_MS", cfg.timeout_ms))
        return cfg


class HttpProvider:
    """Minimal JSON-over-HTTP text/image provider client."""

    def __init__(self, config: ProviderConfig):
        self.config = config

    def complete(self, prompt: RenderedPrompt, output_schema: dict):
        import httpx

        try:
            response = httpx.post(
                self.config.endpoint.rstrip("/") + "/complete",
                json={
                    "model": self.config.model,
                    "template_id": prompt.template_id,
                    "prompt": prompt.text,
                    "output_schema": output_schema,
                },
                timeout=self.config.timeout_ms / 1000.0,
            )
            response.raise_for_status()
            return response.json()
        except httpx.HTTPError as exc:
            raise ProviderError(f"provider call failed: {exc}") from exc

    def generate_image(self, prompt: RenderedPrompt) -> dict:
        import httpx

        try:
            response = httpx.post(
                self.config.endpoint.rstrip("/") + "/images",
                json={"model": self.config.model, "prompt": prompt.text},
                timeout=self.config.timeout_ms / 1000.0,
            )
            response.raise_for_status()
            data = response.json()
            return {
                "prompt_text": prompt.text,
                "uri": data["uri"],
                "style": data.get("style", "cartoon"),
                "placeholder": False,
            }
        except httpx.HTTPError as exc:
            raise ProviderError(f"image provider call failed: {exc}") from exc


class GenerationGateway:
    """Routes generation calls through live/record/replay handling.

    Thread-safe: transcript reads/appends and ordinal bookkeeping are held
    under one lock; providers may be called concurrently outside it.
    """

    def __init__(
        self,
        mode: str,
        provider=None,
        transcript: GenerationTranscript | None = None,
        transcript_path: str | Path | None = None,
    ):
        if mode not in ("live", "record", "replay"):
            raise ProviderError(f"unknown gateway mode: {mode!r}")
        if mode in ("live", "record") and provider is None:
            raise ProviderError(f"mode {mode!r} requires a provider")
        if mode == "replay" and transcript is None:
            raise ProviderError("replay mode requires a transcript")
        self.mode = mode
        self.provider = provider
        self.transcript = transcript if transcript is not None else GenerationTranscript()
        self.transcript_path = Path(transcript_path) if transcript_path else None
        self._ordinals: dict[tuple[str, str], int] = {}
        self._lock = threading.Lock()
        self.call_count = 0
        self.network_call_count = 0

    @classmethod
    def from_config(cls, config: ProviderConfig, transcript_path: str | Path | None = None) -> "GenerationGateway":
        from .scripted import ScriptedProvider

        provider = None
        if config.mode in ("live", "record"):
            if config.endpoint.startswith("scripted:"):
                provider = ScriptedProvider()
            else:
                provider = HttpProvider(config)
        transcript = None
        if config.mode == "replay":
            if transcript_path is None:
                raise ProviderError("replay mode requires a transcript path")
            transcript = GenerationTranscript.load(transcript_path)
        return cls(config.mode, provider=provider, transcript=transcript, transcript_path=transcript_path)

    def _next_ordinal(self, template_id: str, text: str) -> int:
        pair = (template_id, hashlib.sha256(text.encode("utf-8")).hexdigest())
        ordinal = self._ordinals.get(pair, 0) + 1
        self._ordinals[pair] = ordinal
        return ordinal

    def _call(self, prompt: RenderedPrompt, kind: str, perform, validate):
        with self._lock:
            ordinal = self._next_ordinal(prompt.template_id, prompt.text)
            key = _entry_key(prompt.template_id, prompt.text, ordinal)
            self.call_count += 1
        if self.mode == "replay":
            entry = self.transcript.get(key)
            if entry is None:
                raise MissingFixture(
                    f"no transcript entry for {prompt.template_id} call #{ordinal} (key {key})"
                )
            reply = entry["reply"]
            validate(reply)
            return reply
        if isinstance(self.provider, HttpProvider):
            with self._lock:
                self.network_call_count += 1
        reply = perform()
        validate(reply)
        if self.mode == "record":
            with self._lock:
                self.transcript.put(key, prompt.template_id, ordinal, kind, reply)
                if self.transcript_path is not None:
                    self.transcript.save(self.transcript_path)
        return reply

    def complete(self, prompt: RenderedPrompt, output_schema: dict):
        """Structured text completion validated against ``output_schema``."""

        def validate(reply):
            try:
                jsonschema.validate(reply, output_schema)
            except jsonschema.ValidationError as exc:
                raise MalformedOutput(f"reply failed schema validation: {exc.message}", raw=reply) from exc

        return self._call(
            prompt,
            "complete",
            lambda: self.provider.complete(prompt, output_schema),
            validate,
        )

    def generate_image(self, prompt: RenderedPrompt) -> ImageDescriptor:
        def validate(reply):
            if not isinstance(reply, dict) or "uri" not in reply or "prompt_text" not in reply:
                raise MalformedOutput("image reply missing uri/prompt_text", raw=reply)

        reply = self._call(
            prompt,
            "image",
            lambda: self.provider.generate_image(prompt),
            validate,
        )
        return ImageDescriptor.from_dict(reply)


class NetworkGuard:
    """Test-mode guard: any socket construction inside the context raises.

    Used to prove replay mode performs zero network operations.
    """

    def __init__(self):
        self.attempts = 0
        self._original = None

    def __enter__(self):
        guard = self

        class _BlockedSocket(socket.socket):
            def __init__(self, *args, **kwargs):
                guard.attempts += 1
                raise AssertionError("network operation attempted under NetworkGuard")

        self._original = socket.socket
        socket.socket = _BlockedSocket
        return self

    def __exit__(self, exc_type, exc, tb):
        socket.socket = self._original
        return False
