"""Controlled testbed construction.

Pipeline: cut contexts into answer-bearing spans, estimate parametric
knowledge by sampling consistency, keep spans the model answers from
consistently, pick an irrelevant context from the training pool that yields no
correct samples, and balance records with and without parametric knowledge.
"""

from __future__ import annotations

import enum
import hashlib
import logging
import re
from dataclasses import asdict, dataclass, field
from typing import Iterable, Protocol, Sequence

import numpy as np

from .backend import DEFAULT_MAX_TOKENS, Backend
from .errors import EmptyTestbedError, InvalidArgumentError, NoSpanError, ProviderError
from .judge import DEFAULT_JUDGE, EvalInstance, Judge, normalize_answer
from .prompts import Demo, PromptKit, TemplateKind

log = logging.getLogger(__name__)

MAX_QUESTION_WORDS = 50
MAX_ANSWER_WORDS = 10
SPAN_WORDS = 100


class Split(enum.Enum):
    TRAIN = "train"
    EVAL = "eval"


@dataclass(frozen=True)
class QARecord:
    id: str
    question: str
    answer: str
    context: str
    split: Split = Split.EVAL

    def __post_init__(self) -> None:
        if len(self.question.split()) > MAX_QUESTION_WORDS:
            raise InvalidArgumentError(f"{self.id}: question exceeds {MAX_QUESTION_WORDS} words")
        if len(self.answer.split()) > MAX_ANSWER_WORDS:
            raise InvalidArgumentError(f"{self.id}: answer exceeds {MAX_ANSWER_WORDS} words")
        if not self.answer.strip():
            raise InvalidArgumentError(f"{self.id}: empty answer")

    def to_demo(self, context: str | None = None) -> Demo:
        return Demo(question=self.question, context=context or self.context, answer=self.answer)


@dataclass(frozen=True)
class TestbedRecord:
    __test__ = False  # not a pytest class

    id: str
    question: str
    context_pos: str
    context_neg: str
    answer: str
    p: int
    consistency_p: float = 0.0
    consistency_c_pos: float = 0.0
    candidate_rank: int = 0

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "question": self.question,
            "context_pos": self.context_pos,
            "context_neg": self.context_neg,
            "answer": self.answer,
            "p": self.p,
            "consistency_p": self.consistency_p,
            "consistency_c_pos": self.consistency_c_pos,
            "candidate_rank": self.candidate_rank,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TestbedRecord":
        return cls(
            id=str(d["id"]),
            question=d["question"],
            context_pos=d["context_pos"],
            context_neg=d["context_neg"],
            answer=d["answer"],
            p=int(d["p"]),
            consistency_p=float(d.get("consistency_p", 0.0)),
            consistency_c_pos=float(d.get("consistency_c_pos", 0.0)),
            candidate_rank=int(d.get("candidate_rank", 0)),
        )


# --- embeddings -------------------------------------------------------------


class EmbeddingProvider(Protocol):
    def embed(self, text: str) -> np.ndarray: ...


class HashedBagOfWords:
    """Deterministic signed feature-hashing embedding of lowercased words."""

    def __init__(self, dim: int = 256):
        self.dim = dim

    def embed(self, text: str) -> np.ndarray:
        vec = np.zeros(self.dim)
        for word in re.findall(r"\w+", text.lower()):
            h = int.from_bytes(hashlib.md5(word.encode("utf-8")).digest()[:8], "little")
            vec[h % self.dim] += 1.0 if (h >> 63) & 1 else -1.0
        return vec


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(a @ b / (na * nb))


# --- pipeline stages --------------------------------------------------------


def split_context_spans(context: str, answer: str, span_words: int = SPAN_WORDS) -> list[str]:
    """Non-overlapping ``span_words`` windows of the context that contain the answer."""
    if span_words < 1:
        raise InvalidArgumentError("span_words must be positive")
    target = normalize_answer(answer)
    words = context.split()
    spans = []
    for start in range(0, len(words), span_words):
        window = " ".join(words[start : start + span_words])
        if target and target in normalize_answer(window):
            spans.append(window)
    if not spans:
        raise NoSpanError(f"answer {answer!r} not found in any {span_words}-word span")
    return spans


def estimate_consistency(
    question: str,
    kind: TemplateKind,
    context: str | None,
    golds: Sequence[str],
    backend: Backend,
    n: int = 10,
    temperature: float = 1.0,
    seed: int = 0,
    *,
    kit: PromptKit | None = None,
    demos: Sequence[Demo] = (),
    max_tokens: int = DEFAULT_MAX_TOKENS,
    judge: Judge = DEFAULT_JUDGE,
) -> float:
    """Fraction of ``n`` sampled answers judged correct; sample ``i`` uses seed ``seed + i``."""
    if n < 1:
        raise InvalidArgumentError("n must be at least 1")
    if kind not in (TemplateKind.PARAMETRIC, TemplateKind.CONTEXTUAL):
        raise InvalidArgumentError(f"consistency is estimated for parametric or contextual prompts, not {kind.value}")
    prompt = (kit or PromptKit()).render(kind, context=context, question=question, demos=demos)
    hits = sum(
        judge.is_correct(backend.sample_sequence(prompt, temperature, max_tokens, seed + i), golds)
        for i in range(n)
    )
    return hits / n


class ParametricClass(enum.Enum):
    NO_KNOWLEDGE = "no_knowledge"
    HAS_KNOWLEDGE = "has_knowledge"
    DISCARD = "discard"


def classify_parametric(r: float, eta: float = 0.7) -> ParametricClass:
    if r == 0:
        return ParametricClass.NO_KNOWLEDGE
    if r > eta:
        return ParametricClass.HAS_KNOWLEDGE
    return ParametricClass.DISCARD


@dataclass(frozen=True)
class TestbedConfig:
    __test__ = False

    n: int = 10
    temperature: float = 1.0
    eta: float = 0.7
    seed: int = 0
    span_words: int = SPAN_WORDS
    candidate_cap: int = 5
    max_tokens: int = DEFAULT_MAX_TOKENS

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class _Pool:
    contexts: list[str]
    vectors: np.ndarray

    @classmethod
    def build(cls, train: Sequence[QARecord], embedder: EmbeddingProvider, span_words: int) -> "_Pool":
        contexts: list[str] = []
        seen = set()
        for rec in train:
            try:
                spans = split_context_spans(rec.context, rec.answer, span_words)
            except NoSpanError:
                continue
            for span in spans:
                if span not in seen:
                    seen.add(span)
                    contexts.append(span)
        if not contexts:
            raise InvalidArgumentError("training pool has no usable contexts")
        try:
            vectors = np.stack([np.asarray(embedder.embed(c), dtype=np.float64) for c in contexts])
        except Exception as exc:  # provider failures surface as one error type
            raise ProviderError(f"embedding failed: {exc}") from exc
        return cls(contexts, vectors)

    def ranked(self, query_vec: np.ndarray) -> list[int]:
        sims = [cosine(query_vec, v) for v in self.vectors]
        # stable: equal similarities keep pool order
        return sorted(range(len(sims)), key=lambda i: -sims[i])


def select_irrelevant_context(
    question: str,
    context_pos: str,
    golds: Sequence[str],
    train_pool: Sequence[QARecord] | _Pool,
    embedder: EmbeddingProvider,
    backend: Backend,
    config: TestbedConfig = TestbedConfig(),
    *,
    kit: PromptKit | None = None,
) -> tuple[str, int] | None:
    """Most similar training context on which the model never answers correctly.

    Walks the similarity ranking up to ``config.candidate_cap`` candidates and
    returns ``(context, rank)`` (rank is 1-based), or ``None`` when no
    candidate reaches a consistency of exactly 0.
    """
    pool = train_pool if isinstance(train_pool, _Pool) else _Pool.build(train_pool, embedder, config.span_words)
    try:
        query = np.asarray(embedder.embed(context_pos), dtype=np.float64)
    except Exception as exc:
        raise ProviderError(f"embedding failed: {exc}") from exc
    for rank, idx in enumerate(pool.ranked(query)[: config.candidate_cap], start=1):
        candidate = pool.contexts[idx]
        r = estimate_consistency(
            question, TemplateKind.CONTEXTUAL, candidate, golds, backend,
            config.n, config.temperature, config.seed, kit=kit, max_tokens=config.max_tokens,
        )
        if r == 0:
            return candidate, rank
    return None


@dataclass
class TestbedBuild:
    __test__ = False

    records: list[TestbedRecord]
    attrition: dict[str, int] = field(default_factory=dict)


def build_testbed(
    records: Sequence[QARecord],
    backend: Backend,
    embedder: EmbeddingProvider,
    config: TestbedConfig = TestbedConfig(),
    *,
    kit: PromptKit | None = None,
) -> TestbedBuild:
    kit = kit or PromptKit()
    train = [r for r in records if r.split is Split.TRAIN]
    evals = [r for r in records if r.split is Split.EVAL]
    attrition = {"input": len(evals)}

    pool = _Pool.build(train, embedder, config.span_words) if train else None

    def consistency(question, kind, context, answer) -> float:
        return estimate_consistency(
            question, kind, context, [answer], backend, config.n, config.temperature, config.seed,
            kit=kit, max_tokens=config.max_tokens,
        )

    spans: list[tuple[QARecord, int, str]] = []
    for rec in evals:
        try:
            found = split_context_spans(rec.context, rec.answer, config.span_words)
        except NoSpanError:
            continue
        spans.extend((rec, k, s) for k, s in enumerate(found))
    attrition["spans"] = len(spans)

    param_rate: dict[str, float] = {}
    kept: list[tuple[QARecord, int, str, int]] = []
    for rec, k, span in spans:
        if rec.id not in param_rate:
            param_rate[rec.id] = consistency(rec.question, TemplateKind.PARAMETRIC, None, rec.answer)
        cls = classify_parametric(param_rate[rec.id], config.eta)
        if cls is not ParametricClass.DISCARD:
            kept.append((rec, k, span, int(cls is ParametricClass.HAS_KNOWLEDGE)))
    attrition["parametric_kept"] = len(kept)

    relevant = []
    for rec, k, span, p in kept:
        r_c = consistency(rec.question, TemplateKind.CONTEXTUAL, span, rec.answer)
        if r_c > config.eta:
            relevant.append((rec, k, span, p, r_c))
    attrition["relevant_context"] = len(relevant)

    built: list[TestbedRecord] = []
    for rec, k, span, p, r_c in relevant:
        if pool is None:
            break
        picked = select_irrelevant_context(rec.question, span, [rec.answer], pool, embedder, backend, config, kit=kit)
        if picked is None:
            continue
        neg, rank = picked
        built.append(TestbedRecord(f"{rec.id}#{k}", rec.question, span, neg, rec.answer, p,
                                   param_rate[rec.id], r_c, rank))
    attrition["irrelevant_context"] = len(built)

    balanced = balance(built, config.seed)
    attrition["balanced"] = len(balanced)
    if not balanced:
        raise EmptyTestbedError(attrition)
    log.info("testbed attrition: %s", attrition)
    return TestbedBuild(balanced, attrition)


def balance(records: Sequence[TestbedRecord], seed: int) -> list[TestbedRecord]:
    """Downsample the larger of the p=0 / p=1 groups uniformly (seeded), keeping input order."""
    groups = {0: [i for i, r in enumerate(records) if r.p == 0], 1: [i for i, r in enumerate(records) if r.p == 1]}
    k = min(len(groups[0]), len(groups[1]))
    rng = np.random.default_rng(seed)
    keep: set[int] = set()
    for p in (0, 1):
        idx = groups[p]
        if len(idx) > k:
            idx = [idx[j] for j in rng.choice(len(idx), size=k, replace=False)]
        keep.update(idx)
    return [r for i, r in enumerate(records) if i in keep]


def expand_eval(records: Iterable[TestbedRecord]) -> list[EvalInstance]:
    """Two instances per record; only the irrelevant-context instance of a
    record without parametric knowledge is unanswerable."""
    out = []
    for rec in records:
        out.append(EvalInstance(f"{rec.id}:pos", rec.question, rec.context_pos, (rec.answer,), True))
        out.append(EvalInstance(f"{rec.id}:neg", rec.question, rec.context_neg, (rec.answer,), rec.p == 1))
    return out


# --- ingestion --------------------------------------------------------------


def qa_record_from_dict(d: dict) -> QARecord:
    return QARecord(
        id=str(d["id"]),
        question=d["question"],
        answer=d["answer"],
        context=d["context"],
        split=Split(d.get("split", "eval")),
    )


def ingest(rows: Iterable[dict]) -> tuple[list[QARecord], int]:
    """Parse QA rows, dropping those over the word limits. Returns (records, dropped)."""
    out, dropped = [], 0
    for row in rows:
        try:
            out.append(qa_record_from_dict(row))
        except InvalidArgumentError as exc:
            log.debug("dropping row: %s", exc)
            dropped += 1
    return out, dropped


def mrqa_rows(lines: Iterable[dict], split: str) -> list[dict]:
    """Flatten MRQA-format entries (``{"context", "qas": [...]}``) into QA rows."""
    rows = []
    for entry in lines:
        if "header" in entry:
            continue
        for qa in entry.get("qas", []):
            answers = qa.get("answers") or []
            if not answers:
                continue
            rows.append({
                "id": qa.get("qid") or qa.get("id"),
                "question": qa["question"],
                "answer": answers[0],
                "context": entry["context"],
                "split": split,
            })
    return rows
