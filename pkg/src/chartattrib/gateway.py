"""Single chokepoint for model calls: prompts, caching, structured output."""

from __future__ import annotations

import hashlib
import io
import json
import logging
import re
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from functools import lru_cache
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Iterator, Sequence, TypeVar, Union

import jsonschema
from PIL import Image

logger = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")

DEFAULT_MAX_REPAIRS = 2
DEFAULT_PARALLELISM = 4
REPAIR_DELIMITER = "\n\n-----\n"


class GatewayError(RuntimeError):
    pass


class TransportError(GatewayError):
    pass


class CapabilityError(GatewayError):
    pass


class MockMiss(GatewayError):
    pass


class CacheMiss(GatewayError):
    def __init__(self, key: str):
        super().__init__(f"cache miss for transcript key {key}")
        self.key = key


class StructuredOutputExhausted(GatewayError):
    def __init__(self, message: str, attempts: Sequence[str], errors: Sequence[str] = ()):
        super().__init__(message)
        self.attempts = list(attempts)
        self.errors = list(errors)


@dataclass(frozen=True)
class ImagePart:
    """PNG (or any Pillow-decodable) image bytes."""

    data: bytes
    mime: str = "image/png"

    def __post_init__(self):
        try:
            with Image.open(io.BytesIO(self.data)) as im:
                im.verify()
        except Exception as exc:
            raise ValueError(f"image part is not decodable: {exc}") from None

    @property
    def digest(self) -> str:
        return hashlib.sha256(self.data).hexdigest()

    def placeholder(self) -> str:
        return f"[image sha256:{self.digest}]"


Part = Union[str, ImagePart]


@dataclass(frozen=True)
class Prompt:
    system: str
    user_parts: tuple[Part, ...]
    temperature: float = 0.0
    max_tokens: int = 1024
    model: str | None = None

    def __post_init__(self):
        parts = tuple(self.user_parts)
        object.__setattr__(self, "user_parts", parts)
        if not parts:
            raise ValueError("prompt needs at least one user part")
        for p in parts:
            if not isinstance(p, (str, ImagePart)):
                raise TypeError(f"unsupported prompt part {type(p).__name__}")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.max_tokens < 1:
            raise ValueError("max_tokens must be positive")

    @property
    def has_images(self) -> bool:
        return any(isinstance(p, ImagePart) for p in self.user_parts)

    @property
    def images(self) -> list[ImagePart]:
        return [p for p in self.user_parts if isinstance(p, ImagePart)]

    def render(self) -> str:
        """Text form used by mock matchers; images appear as digest placeholders."""
        body = "\n\n".join(p if isinstance(p, str) else p.placeholder() for p in self.user_parts)
        return f"{self.system}\n\n{body}" if self.system else body

    def canonical(self) -> dict:
        return {
            "system": self.system,
            "user_parts": [
                {"text": p} if isinstance(p, str) else {"image": p.digest, "mime": p.mime} for p in self.user_parts
            ],
            "temperature": self.temperature,
            "max_tokens": self.max_tokens,
            "model": self.model,
        }

    def with_appended(self, text: str) -> Prompt:
        return Prompt(self.system, self.user_parts + (text,), self.temperature, self.max_tokens, self.model)


def transcript_key(backend_id: str, prompt: Prompt) -> str:
    payload = json.dumps({"backend": backend_id, "prompt": prompt.canonical()}, sort_keys=True, ensure_ascii=False)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


class Backend:
    """Port every model backend implements.

    Subclasses set ``identity`` and ``vision`` and implement :meth:`generate`.
    """

    identity: str = "backend"
    vision: bool = False

    def generate(self, prompt: Prompt) -> str:
        raise NotImplementedError


@dataclass
class Transcript:
    key: str
    raw_response: str
    parsed_ok: bool
    timestamp: float
    backend: str = ""

    def to_json(self) -> dict:
        return {
            "key": self.key,
            "raw_response": self.raw_response,
            "parsed_ok": self.parsed_ok,
            "timestamp": self.timestamp,
            "backend": self.backend,
        }


class TranscriptCache:
    """Append-only JSONL store of transcripts, keyed by content hash.

    A later line for the same key wins, so a response that was re-validated
    can be rewritten without editing earlier lines.
    """

    def __init__(self, path: str | Path | None = None):
        self.path = Path(path) if path is not None else None
        self._entries: dict[str, Transcript] = {}
        self._lock = threading.Lock()
        if self.path is not None and self.path.exists():
            with self.path.open(encoding="utf-8") as fh:
                for lineno, line in enumerate(fh, 1):
                    line = line.strip()
                    if not line:
                        continue
                    try:
                        rec = json.loads(line)
                    except json.JSONDecodeError:
                        # a torn final line from an interrupted run is skipped, not fatal
                        logger.warning("skipping unreadable cache line %d in %s", lineno, self.path)
                        continue
                    self._entries[rec["key"]] = Transcript(
                        rec["key"], rec["raw_response"], bool(rec.get("parsed_ok", True)),
                        float(rec.get("timestamp", 0.0)), rec.get("backend", ""),
                    )

    def __contains__(self, key: str) -> bool:
        return key in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def get(self, key: str) -> Transcript | None:
        return self._entries.get(key)

    def keys(self) -> list[str]:
        return list(self._entries)

    def put(self, transcript: Transcript) -> None:
        with self._lock:
            self._entries[transcript.key] = transcript
            if self.path is not None:
                self.path.parent.mkdir(parents=True, exist_ok=True)
                line = json.dumps(transcript.to_json(), ensure_ascii=False) + "\n"
                with self.path.open("a", encoding="utf-8") as fh:
                    fh.write(line)
                    fh.flush()

    def digest(self) -> str:
        h = hashlib.sha256()
        for key in sorted(self._entries):
            h.update(key.encode())
            h.update(self._entries[key].raw_response.encode("utf-8"))
        return h.hexdigest()


class Gateway:
    """Routes prompts to one backend with caching and bounded parallelism.

    ``models`` maps agent names to model identifiers; agents build prompts
    through :meth:`prompt` so the per-agent model lands in the cache key.
    """

    def __init__(
        self,
        backend: Backend,
        cache: TranscriptCache | None = None,
        parallelism: int = DEFAULT_PARALLELISM,
        models: dict[str, str] | None = None,
        default_model: str | None = None,
        max_repairs: int = DEFAULT_MAX_REPAIRS,
    ):
        if parallelism < 1:
            raise ValueError("parallelism must be >= 1")
        self.backend = backend
        self.cache = cache
        self.parallelism = parallelism
        self.models = dict(models or {})
        self.default_model = default_model
        self.max_repairs = max_repairs
        self._slots = threading.BoundedSemaphore(parallelism)
        self._stats_lock = threading.Lock()
        self.backend_calls = 0
        self.cache_hits = 0
        self.keys_used: list[str] = []
        self._local = threading.local()

    @property
    def vision(self) -> bool:
        return self.backend.vision

    def prompt(self, agent: str, system: str, parts: Iterable[Part], max_tokens: int = 1024) -> Prompt:
        model = self.models.get(agent, self.default_model)
        return Prompt(system=system, user_parts=tuple(parts), temperature=0.0, max_tokens=max_tokens, model=model)

    def complete(self, prompt: Prompt, check: Callable[[str], bool] | None = None) -> str:
        if prompt.has_images and not self.backend.vision:
            raise CapabilityError(f"backend {self.backend.identity!r} does not accept image parts")
        key = transcript_key(self.backend.identity, prompt)
        with self._stats_lock:
            self.keys_used.append(key)
        for sink in getattr(self._local, "sinks", ()):
            sink.append(key)
        if self.cache is not None:
            hit = self.cache.get(key)
            if hit is not None:
                with self._stats_lock:
                    self.cache_hits += 1
                return hit.raw_response
        with self._slots:
            with self._stats_lock:
                self.backend_calls += 1
            text = self.backend.generate(prompt)
        if self.cache is not None:
            ok = True if check is None else bool(check(text))
            self.cache.put(Transcript(key, text, ok, time.time(), self.backend.identity))
        return text

    @contextmanager
    def recording(self) -> Iterator[list[str]]:
        """Collect the transcript keys of calls made from the current thread."""
        sinks = self._local.__dict__.setdefault("sinks", [])
        keys: list[str] = []
        sinks.append(keys)
        try:
            yield keys
        finally:
            sinks.remove(keys)

    def map(self, fn: Callable[[T], R], items: Sequence[T]) -> list[R]:
        """Apply ``fn`` concurrently; results come back in input order."""
        items = list(items)
        if self.parallelism == 1 or len(items) <= 1:
            return [fn(x) for x in items]
        with ThreadPoolExecutor(max_workers=min(self.parallelism, len(items))) as pool:
            return list(pool.map(fn, items))


def complete(backend: Backend | Gateway, prompt: Prompt, cache: TranscriptCache | None = None) -> str:
    gw = backend if isinstance(backend, Gateway) else Gateway(backend, cache=cache)
    return gw.complete(prompt)


# -- structured output ----------------------------------------------------------

_FENCE_RE = re.compile(r"```(?:json|JSON)?\s*(.*?)```", re.DOTALL)


def extract_json(text: str) -> Any:
    """Decode the JSON value in a model reply, tolerating code fences and chatter."""
    stripped = text.strip()
    try:
        return json.loads(stripped)
    except json.JSONDecodeError:
        pass
    for block in _FENCE_RE.findall(stripped):
        try:
            return json.loads(block.strip())
        except json.JSONDecodeError:
            continue
    decoder = json.JSONDecoder()
    for i, ch in enumerate(stripped):
        if ch in "{[":
            try:
                value, _ = decoder.raw_decode(stripped[i:])
                return value
            except json.JSONDecodeError:
                continue
    raise ValueError("no JSON value found in response")


def repair_prompt(prompt: Prompt, error: str) -> Prompt:
    return prompt.with_appended(
        REPAIR_DELIMITER
        + f"Your previous output failed validation: {error}. Emit only valid JSON matching the schema."
    )


def complete_parsed(
    gateway: Gateway,
    prompt: Prompt,
    parse: Callable[[str], T],
    max_repairs: int | None = None,
) -> T:
    """Call the model until ``parse`` accepts a reply.

    ``parse`` raises ``ValueError`` (or a subclass) to reject a reply; the
    error text is fed back in a repair prompt. At most ``1 + max_repairs``
    calls are made.
    """
    repairs = gateway.max_repairs if max_repairs is None else max_repairs
    if repairs < 0:
        raise ValueError("max_repairs must be >= 0")
    attempts: list[str] = []
    errors: list[str] = []
    current = prompt
    for _ in range(repairs + 1):
        outcome: dict[str, Any] = {}

        def check(text: str) -> bool:
            try:
                outcome["value"] = parse(text)
            except (ValueError, jsonschema.ValidationError) as exc:
                outcome["error"] = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
                return False
            return True

        raw = gateway.complete(current, check=check)
        attempts.append(raw)
        if not outcome:
            check(raw)  # cache hit: the hook was not invoked
        if "value" in outcome:
            return outcome["value"]
        errors.append(outcome["error"])
        current = repair_prompt(prompt, outcome["error"])
    raise StructuredOutputExhausted(
        f"no valid output after {len(attempts)} attempts; last error: {errors[-1]}", attempts, errors
    )


@lru_cache(maxsize=64)
def _validator(schema_json: str) -> jsonschema.Draft202012Validator:
    schema = json.loads(schema_json)
    jsonschema.Draft202012Validator.check_schema(schema)
    if schema.get("type") != "object":
        raise ValueError("structured output schemas must describe an object")
    return jsonschema.Draft202012Validator(schema)


def json_schema_parser(schema: dict, coerce: Callable[[Any], Any] | None = None) -> Callable[[str], Any]:
    validator = _validator(json.dumps(schema, sort_keys=True))

    def parse(text: str) -> Any:
        value = extract_json(text)
        if coerce is not None:
            value = coerce(value)
        error = jsonschema.exceptions.best_match(validator.iter_errors(value))
        if error is not None:
            path = "/".join(str(p) for p in error.absolute_path) or "<root>"
            raise ValueError(f"schema violation at {path}: {error.message}")
        return value

    return parse


def complete_structured(
    gateway: Gateway,
    prompt: Prompt,
    schema: dict,
    max_repairs: int | None = None,
    coerce: Callable[[Any], Any] | None = None,
) -> Any:
    """Return the first reply that decodes as JSON and validates against ``schema``."""
    return complete_parsed(gateway, prompt, json_schema_parser(schema, coerce), max_repairs)
