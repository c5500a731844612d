"""Reliability metrics over the five outcome buckets."""

from __future__ import annotations

import enum
import math
from dataclasses import asdict, dataclass
from fractions import Fraction
from typing import Iterable, Sequence

from .errors import EmptySetError, InvalidArgumentError
from .judge import OutcomeBucket


@dataclass(frozen=True)
class ConfusionCounts:
    n1: int = 0
    n2: int = 0
    n3: int = 0
    n4: int = 0
    n5: int = 0

    @property
    def total(self) -> int:
        return self.n1 + self.n2 + self.n3 + self.n4 + self.n5

    def as_tuple(self) -> tuple[int, int, int, int, int]:
        return (self.n1, self.n2, self.n3, self.n4, self.n5)


@dataclass(frozen=True)
class MetricsReport:
    f1_ans: float
    f1_abs: float
    rs: float
    acc: float
    cov: float
    answer_rate: float
    counts: ConfusionCounts

    @classmethod
    def from_counts(cls, counts: ConfusionCounts) -> "MetricsReport":
        rs, acc, cov, rate = reliability_score(counts)
        return cls(f1_ans(counts), f1_abs(counts), rs, acc, cov, rate, counts)

    def to_dict(self) -> dict:
        return asdict(self)


def count_confusion(outcomes: Iterable[OutcomeBucket]) -> ConfusionCounts:
    tally = dict.fromkeys(OutcomeBucket, 0)
    for o in outcomes:
        tally[o] += 1
    return ConfusionCounts(*(tally[b] for b in OutcomeBucket))


def _ratio(num: int, den: int) -> float:
    return num / den if den else 0.0


def _f1(p: float, r: float) -> float:
    return 2 * p * r / (p + r) if p + r > 0 else 0.0


def f1_ans(c: ConfusionCounts) -> float:
    if c.n1 == 0:
        return 0.0
    return _f1(_ratio(c.n1, c.n1 + c.n2 + c.n4), _ratio(c.n1, c.n1 + c.n2 + c.n3))


def f1_abs(c: ConfusionCounts) -> float:
    if c.n5 == 0:
        return 0.0
    return _f1(_ratio(c.n5, c.n3 + c.n5), _ratio(c.n5, c.n4 + c.n5))


def reliability_score(c: ConfusionCounts) -> tuple[float, float, float, float]:
    """Return ``(rs, acc, cov, answer_rate)``.

    RS weights coverage by the answer rate and accuracy by its complement.
    """
    n = c.total
    if n == 0:
        raise EmptySetError("reliability score of an empty set")
    acc = c.n1 / n
    cov = (c.n1 + c.n3 + c.n5) / n
    rate = 1 - (c.n3 + c.n5) / n
    return rate * cov + (1 - rate) * acc, acc, cov, rate


def rs_exact(c: ConfusionCounts) -> Fraction:
    n = c.total
    if n == 0:
        raise EmptySetError("reliability score of an empty set")
    acc = Fraction(c.n1, n)
    cov = Fraction(c.n1 + c.n3 + c.n5, n)
    rate = 1 - Fraction(c.n3 + c.n5, n)
    return rate * cov + (1 - rate) * acc


# --- entropy-threshold tuning ---------------------------------------------


class EntropyVariant(enum.Enum):
    FIRST_TOKEN = "first"
    AVERAGE = "average"
    MAX = "max"
    MIN = "min"


def aggregate_entropy(step_entropies: Sequence[float], variant: EntropyVariant) -> float:
    if not step_entropies:
        raise InvalidArgumentError("no step entropies to aggregate")
    if variant is EntropyVariant.FIRST_TOKEN:
        return float(step_entropies[0])
    if variant is EntropyVariant.AVERAGE:
        return float(math.fsum(step_entropies) / len(step_entropies))
    if variant is EntropyVariant.MAX:
        return float(max(step_entropies))
    return float(min(step_entropies))


@dataclass(frozen=True)
class TraceSummary:
    """One training instance for threshold tuning.

    ``outcome`` is the bucket the prediction receives if it is kept as is.
    """

    aggregate: float
    outcome: OutcomeBucket
    answerable: bool


def abstained_bucket(answerable: bool) -> OutcomeBucket:
    return OutcomeBucket.N3 if answerable else OutcomeBucket.N5


def threshold_candidates(aggregates: Iterable[float]) -> list[float]:
    """``-inf``, every distinct observed value but the largest, and ``+inf``.

    The largest observed value abstains on nothing, exactly like ``+inf``, so
    that decision is represented by the sentinel alone.
    """
    values = sorted(set(aggregates))
    return [-math.inf, *values[:-1], math.inf]


def tune_entropy_threshold(traces: Sequence[TraceSummary]) -> tuple[float, float]:
    """Threshold maximizing RS under "abstain iff aggregate > threshold".

    Returns ``(threshold, rs)``; ties go to the smallest threshold. Runs as a
    single sorted sweep with exact rational RS comparisons.
    """
    if not traces:
        raise InvalidArgumentError("threshold tuning needs at least one trace")
    order = sorted(traces, key=lambda t: t.aggregate)
    # start from "abstain on everything" and un-abstain in ascending order
    tally = dict.fromkeys(OutcomeBucket, 0)
    for t in order:
        tally[abstained_bucket(t.answerable)] += 1

    def counts() -> ConfusionCounts:
        return ConfusionCounts(*(tally[b] for b in OutcomeBucket))

    best_thr = -math.inf
    best_rs = rs_exact(counts())
    i = 0
    for thr in threshold_candidates(t.aggregate for t in order)[1:]:
        while i < len(order) and order[i].aggregate <= thr:
            t = order[i]
            tally[abstained_bucket(t.answerable)] -= 1
            tally[t.outcome] += 1
            i += 1
        rs = rs_exact(counts())
        if rs > best_rs:
            best_thr, best_rs = thr, rs
    return best_thr, float(best_rs)
