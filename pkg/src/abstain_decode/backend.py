"""Language-model backends.

A backend maps a rendered prompt (which already ends with the generated
prefix) to next-token logits. ``TableLM`` is a deterministic, rule-driven
mock used by the tests and by ``mock:`` backend specs on the command line.
"""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .dist import as_logits, softmax
from .errors import CapacityError, InvalidArgumentError, ShapeError, TokenizationError
from .prompts import RenderedPrompt, TemplateKind

DEFAULT_MAX_TOKENS = 32


class Vocabulary:
    """Ordered token strings with greedy longest-match tokenization."""

    def __init__(self, tokens: Sequence[str], eos_id: int):
        tokens = list(tokens)
        if len(set(tokens)) != len(tokens):
            raise InvalidArgumentError("vocabulary tokens must be unique")
        if not 0 <= eos_id < len(tokens):
            raise InvalidArgumentError(f"eos_id {eos_id} outside vocabulary of size {len(tokens)}")
        self.tokens = tokens
        self.eos_id = eos_id
        self._ids = {t: i for i, t in enumerate(tokens)}
        self._by_first: dict[str, list[str]] = {}
        for i, tok in enumerate(tokens):
            if tok and i != eos_id:
                self._by_first.setdefault(tok[0], []).append(tok)
        for cands in self._by_first.values():
            cands.sort(key=len, reverse=True)

    def __len__(self) -> int:
        return len(self.tokens)

    def id(self, token: str) -> int:
        return self._ids[token]

    def tokenize(self, text: str) -> list[int]:
        out: list[int] = []
        i = 0
        while i < len(text):
            tok = self._match(text, i)
            if tok is None:
                j = i + 1
                while j < len(text) and self._match(text, j) is None:
                    j += 1
                raise TokenizationError(text, i, j)
            out.append(self._ids[tok])
            i += len(tok)
        return out

    def _match(self, text: str, i: int) -> str | None:
        for tok in self._by_first.get(text[i], ()):
            if text.startswith(tok, i):
                return tok
        return None

    def detokenize(self, ids: Sequence[int]) -> str:
        return "".join(self.tokens[i] for i in ids if i != self.eos_id)


@dataclass(frozen=True)
class BackendCapabilities:
    concurrent_safe: bool = True
    max_context_tokens: int = 1 << 20

    def __post_init__(self) -> None:
        if self.max_context_tokens <= 0:
            raise InvalidArgumentError("max_context_tokens must be positive")


class Backend:
    """Interface every backend implements.

    Subclasses provide ``vocab``, ``capabilities`` and ``logits``; sampling and
    tokenization are shared.
    """

    vocab: Vocabulary
    capabilities: BackendCapabilities

    @property
    def vocab_size(self) -> int:
        return len(self.vocab)

    @property
    def eos_id(self) -> int:
        return self.vocab.eos_id

    def logits(self, prompt: RenderedPrompt) -> np.ndarray:
        raise NotImplementedError

    def tokenize(self, text: str) -> list[int]:
        return self.vocab.tokenize(text)

    def detokenize(self, ids: Sequence[int]) -> str:
        return self.vocab.detokenize(ids)

    def sample_sequence(
        self,
        prompt: RenderedPrompt,
        temperature: float,
        max_tokens: int,
        seed: int,
    ) -> str:
        """Seeded ancestral sampling from ``softmax(logits / temperature)``.

        ``temperature == 0`` means greedy decoding. Generation stops at the
        end-of-sequence token or after ``max_tokens`` tokens.
        """
        if max_tokens < 1:
            raise InvalidArgumentError("max_tokens must be at least 1")
        if temperature < 0:
            raise InvalidArgumentError("temperature must be non-negative")
        rng = np.random.default_rng(seed)
        generated: list[int] = []
        base = prompt
        for _ in range(max_tokens):
            logits = self.logits(base.extend(prompt.generated_prefix + self.detokenize(generated)))
            if temperature == 0:
                tok = int(np.argmax(logits))
            else:
                tok = draw(softmax(logits, temperature), rng)
            if tok == self.eos_id:
                break
            generated.append(tok)
        return self.detokenize(generated)


def draw(probs: np.ndarray, rng: np.random.Generator) -> int:
    """Inverse-CDF draw of one index."""
    cdf = np.cumsum(probs)
    u = rng.random() * cdf[-1]
    return int(min(np.searchsorted(cdf, u, side="right"), probs.size - 1))


@dataclass(frozen=True)
class Rule:
    """Matches prompts of an optional kind that contain every ``contains``
    substring and end with ``endswith``."""

    logits: np.ndarray
    kind: TemplateKind | None = None
    contains: tuple[str, ...] = ()
    endswith: str = ""

    def matches(self, prompt: RenderedPrompt) -> bool:
        if self.kind is not None and prompt.kind is not self.kind:
            return False
        if self.endswith and not prompt.text.endswith(self.endswith):
            return False
        return all(s in prompt.text for s in self.contains)


class TableLM(Backend):
    """Deterministic rule-table model. The first matching rule wins.

    Prompt length for the capacity check is counted in characters.
    """

    def __init__(
        self,
        vocab: Vocabulary,
        default,
        rules: Sequence[Rule] = (),
        capabilities: BackendCapabilities | None = None,
    ):
        self.vocab = vocab
        self.capabilities = capabilities or BackendCapabilities()
        self.default = self._checked(default)
        self.rules = tuple(
            Rule(self._checked(r.logits), r.kind, tuple(r.contains), r.endswith) for r in rules
        )
        for r in self.rules:
            r.logits.setflags(write=False)
        self.default.setflags(write=False)

    def _checked(self, values) -> np.ndarray:
        arr = np.array(as_logits(values), dtype=np.float64)
        if arr.size != len(self.vocab):
            raise ShapeError(f"logit vector of length {arr.size} for vocabulary of size {len(self.vocab)}")
        return arr

    def logits(self, prompt: RenderedPrompt) -> np.ndarray:
        if len(prompt.text) > self.capabilities.max_context_tokens:
            raise CapacityError(
                f"prompt of {len(prompt.text)} tokens exceeds {self.capabilities.max_context_tokens}"
            )
        for rule in self.rules:
            if rule.matches(prompt):
                return rule.logits.copy()
        return self.default.copy()


class SerializedBackend(Backend):
    """Wraps a backend that is not concurrent-safe so calls never overlap."""

    def __init__(self, inner: Backend):
        self.inner = inner
        self.vocab = inner.vocab
        self.capabilities = inner.capabilities
        self._lock = threading.Lock()

    @property
    def vocab_size(self) -> int:
        return self.inner.vocab_size

    @property
    def eos_id(self) -> int:
        return self.inner.eos_id

    def tokenize(self, text: str) -> list[int]:
        return self.inner.tokenize(text)

    def detokenize(self, ids: Sequence[int]) -> str:
        return self.inner.detokenize(ids)

    def logits(self, prompt: RenderedPrompt) -> np.ndarray:
        with self._lock:
            return self.inner.logits(prompt)


# --- mock world files -----------------------------------------------------


def _vector(spec, vocab: Vocabulary) -> list[float]:
    if isinstance(spec, dict):
        vec = [float(spec.get("fill", 0.0))] * len(vocab)
        for tok, value in spec.get("set", {}).items():
            vec[vocab.id(tok)] = float(value)
        return vec
    return [float(v) for v in spec]


def table_lm_from_dict(data: dict) -> TableLM:
    """Build a ``TableLM`` from its JSON form.

    ``{"tokens": [...], "eos": "</s>", "default": <vec>, "rules": [{"kind":
    "contextual", "contains": [...], "endswith": "...", "logits": <vec>}],
    "max_context_tokens": N, "concurrent_safe": true}`` where a vector is
    either a full list or ``{"fill": x, "set": {token: value}}``.
    """
    tokens = data["tokens"]
    vocab = Vocabulary(tokens, tokens.index(data["eos"]))
    rules = []
    for r in data.get("rules", []):
        contains = r.get("contains", ())
        if isinstance(contains, str):
            contains = (contains,)
        kind = TemplateKind(r["kind"]) if r.get("kind") else None
        rules.append(Rule(np.asarray(_vector(r["logits"], vocab)), kind, tuple(contains), r.get("endswith", "")))
    caps = BackendCapabilities(
        concurrent_safe=bool(data.get("concurrent_safe", True)),
        max_context_tokens=int(data.get("max_context_tokens", 1 << 20)),
    )
    return TableLM(vocab, _vector(data.get("default", {"fill": 0.0}), vocab), rules, caps)


def table_lm_to_dict(lm: TableLM) -> dict:
    def vec(a: np.ndarray) -> dict:
        fill = float(np.median(a))
        return {"fill": fill, "set": {lm.vocab.tokens[i]: float(v) for i, v in enumerate(a) if v != fill}}

    return {
        "tokens": lm.vocab.tokens,
        "eos": lm.vocab.tokens[lm.vocab.eos_id],
        "max_context_tokens": lm.capabilities.max_context_tokens,
        "concurrent_safe": lm.capabilities.concurrent_safe,
        "default": vec(lm.default),
        "rules": [
            {
                "kind": r.kind.value if r.kind else None,
                "contains": list(r.contains),
                "endswith": r.endswith,
                "logits": vec(r.logits),
            }
            for r in lm.rules
        ],
    }


def load_table_lm(path: str | Path) -> TableLM:
    return table_lm_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
