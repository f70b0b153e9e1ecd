"""Answer reformulation: split an answer into independent single-fact claims."""

from __future__ import annotations

import json
from dataclasses import dataclass

from . import prompts
from .core import Claim
from .gateway import Gateway, complete_structured

CLAIMS_SCHEMA = {
    "type": "object",
    "properties": {"claims": {"type": "array", "items": {"type": "string"}}},
    "required": ["claims"],
}


@dataclass(frozen=True)
class ClaimSet:
    claims: tuple[Claim, ...]
    source_answer: str

    def __post_init__(self):
        if not self.claims:
            raise ValueError("a claim set needs at least one claim")
        texts = [c.text for c in self.claims]
        if len(set(texts)) != len(texts):
            raise ValueError("claim texts must be distinct")
        if [c.index for c in self.claims] != list(range(len(self.claims))):
            raise ValueError("claim indices must be 0..n-1")

    def __iter__(self):
        return iter(self.claims)

    def __len__(self):
        return len(self.claims)


def _examples() -> str:
    blocks = []
    for ex in prompts.fewshot()["reformulate"]:
        blocks.append(
            f"Question: {ex['question']}\nAnswer: {ex['answer']}\n"
            + json.dumps({"claims": ex["claims"]}, ensure_ascii=False)
        )
    return "\n\n".join(blocks)


def normalize_claims(raw: list[str], answer: str) -> ClaimSet:
    """Trim, drop blanks and duplicates (first occurrence wins); empty falls back to the answer."""
    seen: list[str] = []
    for text in raw:
        text = " ".join(str(text).split())
        if text and text not in seen:
            seen.append(text)
    if not seen:
        seen = [answer.strip()]
    return ClaimSet(tuple(Claim(i, t) for i, t in enumerate(seen)), answer)


def decompose_answer(question: str, answer: str, gateway: Gateway) -> ClaimSet:
    if not answer.strip():
        raise ValueError("answer must be non-empty")
    system, user = prompts.render("reformulate", examples=_examples(), question=question, answer=answer)
    value = complete_structured(gateway, gateway.prompt("reformulate", system, [user]), CLAIMS_SCHEMA)
    return normalize_claims(value["claims"], answer)
