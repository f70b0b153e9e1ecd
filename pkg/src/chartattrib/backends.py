"""Backend implementations: scripted mock, OpenAI-compatible HTTP, cache-only replay."""

from __future__ import annotations

import base64
import hashlib
import json
import os
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Sequence, Union

import httpx

from .gateway import Backend, CacheMiss, ImagePart, MockMiss, Prompt, TransportError, transcript_key

ENV_API_BASE = "CHARTATTRIB_API_BASE"
ENV_API_KEY = "CHARTATTRIB_API_KEY"
ENV_MODEL = "CHARTATTRIB_MODEL"


@dataclass(frozen=True)
class HashMatcher:
    """Matches a prompt whose rendered text hashes (sha256) to ``digest``."""

    digest: str

    def matches(self, rendered: str) -> bool:
        return hashlib.sha256(rendered.encode("utf-8")).hexdigest() == self.digest


Matcher = Union[str, Sequence[str], HashMatcher]


@dataclass
class ScriptEntry:
    matcher: Matcher
    response: str
    once: bool = True

    def matches(self, rendered: str) -> bool:
        m = self.matcher
        if isinstance(m, HashMatcher):
            return m.matches(rendered)
        if isinstance(m, str):
            return m in rendered
        return all(s in rendered for s in m)


class ScriptedMock(Backend):
    """Deterministic backend that answers from an ordered script.

    The first entry whose matcher fits the rendered prompt wins. One-shot
    entries are consumed when used; repeating entries stay in place.
    """

    def __init__(self, entries: Sequence[ScriptEntry], vision: bool = True, identity: str | None = None):
        self.entries = list(entries)
        self.vision = vision
        self.identity = identity or "mock:" + self.fingerprint()
        self.calls: list[str] = []
        self._lock = threading.Lock()

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for e in self.entries:
            m = e.matcher
            desc = {"hash": m.digest} if isinstance(m, HashMatcher) else {"match": m if isinstance(m, str) else list(m)}
            h.update(json.dumps([desc, e.response, e.once], sort_keys=True).encode("utf-8"))
        return h.hexdigest()[:16]

    def generate(self, prompt: Prompt) -> str:
        rendered = prompt.render()
        with self._lock:
            self.calls.append(rendered)
            for i, entry in enumerate(self.entries):
                if entry.matches(rendered):
                    if entry.once:
                        del self.entries[i]
                    return entry.response
        head = rendered[:200].replace("\n", " ")
        raise MockMiss(f"no script entry matches prompt: {head!r}...")

    @classmethod
    def from_json(cls, data: Any, vision: bool = True) -> ScriptedMock:
        raw = data["entries"] if isinstance(data, dict) else data
        if isinstance(data, dict):
            vision = bool(data.get("vision", vision))
        entries = []
        for i, item in enumerate(raw):
            if "hash" in item:
                matcher: Matcher = HashMatcher(item["hash"])
            elif "match" in item:
                matcher = item["match"] if isinstance(item["match"], str) else tuple(item["match"])
            else:
                raise ValueError(f"script entry {i} needs 'match' or 'hash'")
            response = item["response"]
            if not isinstance(response, str):
                response = json.dumps(response)
            entries.append(ScriptEntry(matcher, response, once=not item.get("repeat", False)))
        return cls(entries, vision=vision)

    @classmethod
    def from_file(cls, path: str | Path, vision: bool = True) -> ScriptedMock:
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")), vision=vision)


def scripted_mock(script: Sequence[tuple[Matcher, Any]], vision: bool = True, repeat: bool = False) -> ScriptedMock:
    """Build a mock from ``(matcher, response)`` pairs; non-string responses are JSON-encoded."""
    entries = [
        ScriptEntry(m, r if isinstance(r, str) else json.dumps(r), once=not repeat) for m, r in script
    ]
    return ScriptedMock(entries, vision=vision)


class CacheOnlyBackend(Backend):
    """Replay backend: anything not already in the transcript cache is a miss."""

    def __init__(self, identity: str, vision: bool = True):
        self.identity = identity
        self.vision = vision

    def generate(self, prompt: Prompt) -> str:
        raise CacheMiss(transcript_key(self.identity, prompt))


def _message_content(prompt: Prompt) -> list[dict]:
    content = []
    for part in prompt.user_parts:
        if isinstance(part, ImagePart):
            b64 = base64.b64encode(part.data).decode("ascii")
            content.append({"type": "image_url", "image_url": {"url": f"data:{part.mime};base64,{b64}"}})
        else:
            content.append({"type": "text", "text": part})
    return content


class OpenAICompatibleBackend(Backend):
    """Chat-completions client for any OpenAI-compatible endpoint."""

    RETRY_STATUS = {408, 409, 429, 500, 502, 503, 504}

    def __init__(
        self,
        base_url: str,
        api_key: str | None = None,
        model: str = "gpt-4o",
        vision: bool = True,
        retries: int = 3,
        backoff: float = 1.0,
        timeout: float = 120.0,
        transport: httpx.BaseTransport | None = None,
    ):
        self.base_url = base_url.rstrip("/")
        self.model = model
        self.vision = vision
        self.retries = retries
        self.backoff = backoff
        self.identity = f"openai:{self.base_url}"
        headers = {"Authorization": f"Bearer {api_key}"} if api_key else {}
        self._client = httpx.Client(timeout=timeout, headers=headers, transport=transport)

    @classmethod
    def from_env(cls, **kwargs) -> OpenAICompatibleBackend:
        base = os.environ.get(ENV_API_BASE)
        if not base:
            raise TransportError(f"{ENV_API_BASE} is not set")
        return cls(base, api_key=os.environ.get(ENV_API_KEY), model=os.environ.get(ENV_MODEL, "gpt-4o"), **kwargs)

    def payload(self, prompt: Prompt) -> dict:
        messages = []
        if prompt.system:
            messages.append({"role": "system", "content": prompt.system})
        messages.append({"role": "user", "content": _message_content(prompt)})
        return {
            "model": prompt.model or self.model,
            "messages": messages,
            "temperature": prompt.temperature,
            "max_tokens": prompt.max_tokens,
        }

    def generate(self, prompt: Prompt) -> str:
        body = self.payload(prompt)
        last = "no attempt made"
        for attempt in range(self.retries + 1):
            if attempt:
                time.sleep(self.backoff * 2 ** (attempt - 1))
            try:
                resp = self._client.post(f"{self.base_url}/chat/completions", json=body)
            except httpx.HTTPError as exc:
                last = f"{type(exc).__name__}: {exc}"
                continue
            if resp.status_code in self.RETRY_STATUS:
                last = f"HTTP {resp.status_code}"
                continue
            if resp.status_code >= 400:
                raise TransportError(f"HTTP {resp.status_code}: {resp.text[:300]}")
            try:
                return resp.json()["choices"][0]["message"]["content"] or ""
            except (ValueError, KeyError, IndexError, TypeError) as exc:
                raise TransportError(f"unexpected response shape: {exc}") from None
        raise TransportError(f"request failed after {self.retries + 1} attempts: {last}")
