"""Answer correctness, abstention detection and outcome buckets."""

from __future__ import annotations

import enum
import re
import string
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

DEFAULT_PHRASES: tuple[str, ...] = (
    "unknown answer",
    "answer is unknown",
    "unable to answer",
    "no answer",
    "cannot answer",
    "don't know",
    "do not know",
)

ABSTENTION_TEXT = "unknown"

_WS = re.compile(r"\s+")
# left boundary only: keeps detection monotone when text is appended
_BARE_UNKNOWN = re.compile(r"(?<![^\W\d_])unknown")
_PUNCT = string.punctuation + "‘’“”"


def _collapse(text: str) -> str:
    return _WS.sub(" ", text.lower().replace("’", "'"))


def normalize_answer(text: str) -> str:
    return _collapse(text).strip().strip(_PUNCT).strip()


@dataclass(frozen=True)
class EvalInstance:
    id: str
    question: str
    context: str
    golds: tuple[str, ...]
    answerable: bool

    def __post_init__(self) -> None:
        if not self.golds:
            raise ValueError(f"instance {self.id} has no gold answers")


class OutcomeBucket(enum.Enum):
    N1 = "N1"  # answerable, answered correctly
    N2 = "N2"  # answerable, answered incorrectly
    N3 = "N3"  # answerable, abstained
    N4 = "N4"  # unanswerable, answered
    N5 = "N5"  # unanswerable, abstained


@dataclass(frozen=True)
class Judge:
    phrases: tuple[str, ...] = DEFAULT_PHRASES
    bare_unknown: bool = True
    _normalized: tuple[str, ...] = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "_normalized", tuple(_collapse(p).strip() for p in self.phrases if p.strip()))

    def is_abstention(self, text: str) -> bool:
        norm = _collapse(text)
        if any(p in norm for p in self._normalized):
            return True
        return self.bare_unknown and _BARE_UNKNOWN.search(norm) is not None

    def is_correct(self, text: str, golds: Sequence[str]) -> bool:
        pred = normalize_answer(text)
        return any(g and g in pred for g in map(normalize_answer, golds))

    def classify(self, text: str, abstained: bool, instance: EvalInstance) -> OutcomeBucket:
        abstained = abstained or self.is_abstention(text)
        if not instance.answerable:
            return OutcomeBucket.N5 if abstained else OutcomeBucket.N4
        if abstained:
            return OutcomeBucket.N3
        return OutcomeBucket.N1 if self.is_correct(text, instance.golds) else OutcomeBucket.N2


DEFAULT_JUDGE = Judge()


def is_abstention(text: str) -> bool:
    return DEFAULT_JUDGE.is_abstention(text)


def is_correct(text: str, golds: Sequence[str]) -> bool:
    return DEFAULT_JUDGE.is_correct(text, golds)


def classify_outcome(pred, instance: EvalInstance, judge: Judge = DEFAULT_JUDGE) -> OutcomeBucket:
    """Bucket a prediction (anything with ``text`` and ``abstained``)."""
    return judge.classify(pred.text, pred.abstained, instance)


def load_phrases(path: str | Path) -> tuple[str, ...]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return tuple(line.strip() for line in lines if line.strip())
