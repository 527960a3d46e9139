"""Rule-based rewards: boxed-answer accuracy and a language penalty.

There is intentionally no format reward.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Optional, Sequence

from .taskgen import BOX_OPEN, Vocabulary

DEFAULT_LAMBDA_LANG = 0.5

_INT_RE = re.compile(r"\s*[+-]?[0-9]+\s*")


@dataclass(frozen=True)
class RewardBreakdown:
    accuracy_reward: float
    language_reward: float

    @property
    def total(self) -> float:
        return self.accuracy_reward + self.language_reward

    def to_json(self) -> dict:
        return {
            "accuracy_reward": self.accuracy_reward,
            "language_reward": self.language_reward,
            "total": self.total,
        }


def extract_boxed(text: str) -> Optional[str]:
    """Contents of the last well-formed ``\\boxed{...}`` span, braces balanced.

    Spans are ranked by start offset; an unterminated later span is skipped
    in favour of an earlier complete one.
    """
    start = text.rfind(BOX_OPEN)
    while start != -1:
        depth = 1
        pos = start + len(BOX_OPEN)
        while pos < len(text):
            ch = text[pos]
            if ch == "{":
                depth += 1
            elif ch == "}":
                depth -= 1
                if depth == 0:
                    return text[start + len(BOX_OPEN):pos]
            pos += 1
        start = text.rfind(BOX_OPEN, 0, start)
    return None


def verify_answer(extracted: Optional[str], gold: int) -> bool:
    if extracted is None or not _INT_RE.fullmatch(extracted):
        return False
    return int(extracted) == gold


def language_penalty(
    response_tokens: Sequence[int], vocab: Vocabulary, lambda_lang: float = DEFAULT_LAMBDA_LANG
) -> float:
    # presence-gated: one marker costs as much as many
    if any(int(t) in vocab.marker_ids for t in response_tokens):
        return -lambda_lang
    return 0.0


def score(
    response_tokens: Sequence[int],
    gold_answer: int,
    vocab: Vocabulary,
    lambda_lang: float = DEFAULT_LAMBDA_LANG,
) -> RewardBreakdown:
    text = vocab.decode(response_tokens)
    correct = verify_answer(extract_boxed(text), gold_answer)
    return RewardBreakdown(
        accuracy_reward=1.0 if correct else 0.0,
        language_reward=language_penalty(response_tokens, vocab, lambda_lang),
    )
