"""Synthetic worlds for the table-driven mock model.

Each question has a one-token gold answer (``" AnsNNN"``). Whether the model
"knows" it parametrically is set per question; whether a context helps is
decided by whether the context text contains the gold word. Prompts that lack
the knowledge get a near-uniform distribution with the gold token pushed far
down, so sampling never hits it and entropy stays close to the null prompts.
Anything not covered by a rule (i.e. every step after the first) predicts
end-of-sequence.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal, Sequence

import numpy as np

from .backend import BackendCapabilities, Rule, TableLM, Vocabulary
from .prompts import TemplateKind
from .testbed import QARecord, Split, TestbedRecord

Knowledge = Literal["known", "unknown", "partial"]

EOS = "</s>"
UNKNOWN = " unknown"
KNOWN = " known"
_FILLER_TOKENS = (" the", " a", " of", " city", " river", " year", " king", " war")
_WORDS = (
    "river mountain valley harbor castle village market bridge forest island "
    "tower garden temple palace meadow canyon desert glacier lagoon prairie "
    "orchard quarry cathedral fortress lighthouse monastery plateau reservoir "
    "summit tundra vineyard wetland archive gallery museum observatory "
    "parliament railway stadium theater university"
).split()

NOISE = 0.05
SUPPRESSED = -30.0


@dataclass(frozen=True)
class Question:
    id: str
    text: str
    gold_word: str
    parametric: Knowledge
    context_helps: bool = True

    @property
    def gold_token(self) -> str:
        return " " + self.gold_word


def gold_word(i: int) -> str:
    return f"Ans{i:03d}"


def question_text(i: int) -> str:
    return f"Who founded the settlement of Org{i:03d}?"


def world_vocab(questions: Sequence[Question]) -> Vocabulary:
    tokens = [EOS, UNKNOWN, KNOWN, *_FILLER_TOKENS, *(q.gold_token for q in questions)]
    return Vocabulary(tokens, 0)


def build_lm(
    questions: Sequence[Question],
    seed: int = 0,
    peak: tuple[float, float] = (8.0, 14.0),
    capabilities: BackendCapabilities | None = None,
) -> TableLM:
    vocab = world_vocab(questions)
    size = len(vocab)
    rng = np.random.default_rng(seed)

    def noise() -> np.ndarray:
        return rng.normal(0.0, NOISE, size)

    def peaked(token: str) -> np.ndarray:
        v = noise()
        v[vocab.id(token)] += rng.uniform(*peak)
        return v

    def blind(token: str) -> np.ndarray:
        v = noise()
        v[vocab.id(token)] = SUPPRESSED
        return v

    def partial(token: str) -> np.ndarray:
        # gold carries about half the mass
        v = noise()
        v[vocab.id(token)] = np.log(size - 1)
        return v

    rules: list[Rule] = []
    for kind in (TemplateKind.NULL_PARAMETRIC, TemplateKind.NULL_CONTEXTUAL):
        rules.append(Rule(noise(), kind))
    cue = "Answer:"
    for q in questions:
        ask = f"Question: {q.text}"
        gold = q.gold_token
        p_vec = {"known": peaked, "unknown": blind, "partial": partial}[q.parametric](gold)
        rules += [
            Rule(p_vec, TemplateKind.PARAMETRIC, (ask,), cue),
            Rule(peaked(gold) if q.context_helps else blind(gold), TemplateKind.CONTEXTUAL, (ask, q.gold_word), cue),
            Rule(blind(gold), TemplateKind.CONTEXTUAL, (ask,), cue),
            Rule(peaked(gold), TemplateKind.ABSTENTION, (ask, q.gold_word), cue),
            Rule(peaked(UNKNOWN), TemplateKind.ABSTENTION, (ask,), cue),
            Rule(peaked(KNOWN), TemplateKind.VERIFICATION, (ask, f"Proposed answer: {q.gold_word}"), cue),
            Rule(peaked(UNKNOWN), TemplateKind.VERIFICATION, (ask,), cue),
        ]
    default = noise()
    default[vocab.eos_id] += peak[1]
    return TableLM(vocab, default, rules, capabilities)


def _passage(rng: np.random.Generator, n_words: int, inserts: dict[int, str] | None = None) -> str:
    words = [str(w) for w in rng.choice(_WORDS, size=n_words)]
    for pos, word in (inserts or {}).items():
        words[pos] = word
    return " ".join(words)


def quadrant_world(
    n_per_group: int = 20, seed: int = 0, capabilities: BackendCapabilities | None = None
) -> tuple[TableLM, list[TestbedRecord]]:
    """Testbed records covering all four (P, C) quadrants.

    ``n_per_group`` records have parametric knowledge (p=1) and as many do not
    (p=0); each record's positive context contains the gold word and its
    negative context does not, so ``expand_eval`` yields ``n_per_group``
    instances per quadrant.
    """
    rng = np.random.default_rng(seed)
    questions = [
        Question(f"q{i:03d}", question_text(i), gold_word(i), "known" if i < n_per_group else "unknown")
        for i in range(2 * n_per_group)
    ]
    lm = build_lm(questions, seed, capabilities=capabilities)
    records = []
    for q in questions:
        pos = _passage(rng, 40, {int(rng.integers(5, 35)): q.gold_word})
        neg = _passage(rng, 40)
        records.append(TestbedRecord(q.id, q.text, pos, neg, q.gold_word, int(q.parametric == "known")))
    return lm, records


def testbed_world(
    n_known: int = 6,
    n_unknown: int = 8,
    n_partial: int = 3,
    n_train: int = 12,
    seed: int = 0,
    multi_span_every: int = 3,
    unhelpful_contexts: Sequence[int] = (),
) -> tuple[TableLM, list[QARecord]]:
    """Raw QA records (eval + train) for exercising the testbed pipeline.

    Eval contexts are 150-250 words with the gold word placed in one or two
    100-word windows. The first ``n_known`` train contexts are near-copies of
    an eval context (gold word included), so they rank first by similarity
    but must be rejected as irrelevant candidates. Every ``multi_span_every``-th
    record gets a second gold occurrence (0 disables); questions listed in
    ``unhelpful_contexts`` are not answerable from their own context.
    """
    rng = np.random.default_rng(seed)
    kinds: list[Knowledge] = ["known"] * n_known + ["unknown"] * n_unknown + ["partial"] * n_partial
    questions = [
        Question(f"e{i:03d}", question_text(i), gold_word(i), k, i not in unhelpful_contexts)
        for i, k in enumerate(kinds)
    ]
    lm = build_lm(questions, seed)
    records: list[QARecord] = []
    contexts = []
    for i, q in enumerate(questions):
        n_words = int(rng.integers(150, 251))
        inserts = {int(rng.integers(0, 100)): q.gold_word}
        if multi_span_every and i % multi_span_every == 0:
            inserts[int(rng.integers(100, n_words))] = q.gold_word
        ctx = _passage(rng, n_words, inserts)
        contexts.append(ctx)
        records.append(QARecord(q.id, q.text, q.gold_word, ctx, Split.EVAL))
    for j in range(n_train):
        tid = f"t{j:03d}"
        if j < min(n_known, len(contexts)):
            # decoy: same span as an eval record, gold word and all
            ctx = contexts[j].split()[:100]
            answer = ctx[0]
            ctx = " ".join(ctx)
        else:
            answer = f"Trn{j:03d}"
            ctx = _passage(rng, 90, {int(rng.integers(0, 90)): answer})
        records.append(QARecord(tid, f"Which landmark is listed as entry {tid}?", answer, ctx, Split.TRAIN))
    return lm, records
